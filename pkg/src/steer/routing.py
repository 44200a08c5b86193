"""Routing rules that map step confidences onto a small/large model choice."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Hashable, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .mixture import MixtureParams, TwoComponentGMM, _validate_1d, posterior_confident


class ModelChoice(str, enum.Enum):
    SMALL = "small"
    LARGE = "large"


class PolicyKind(str, enum.Enum):
    POSTERIOR_THRESHOLD = "posterior_threshold"
    PERCENTILE = "percentile"
    ALWAYS_SMALL = "always_small"
    ALWAYS_LARGE = "always_large"


@dataclass(frozen=True)
class RoutingPolicy:
    kind: PolicyKind
    gamma: Optional[float] = None
    percentile_p: Optional[float] = None

    def __post_init__(self):
        kind = PolicyKind(self.kind)
        object.__setattr__(self, "kind", kind)
        needs_gamma = kind is PolicyKind.POSTERIOR_THRESHOLD
        needs_p = kind is PolicyKind.PERCENTILE
        if needs_gamma != (self.gamma is not None):
            raise ValueError(f"gamma must be set iff kind is posterior_threshold (kind={kind.value})")
        if needs_p != (self.percentile_p is not None):
            raise ValueError(f"percentile_p must be set iff kind is percentile (kind={kind.value})")
        if self.gamma is not None and not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.percentile_p is not None and not 0.0 <= self.percentile_p <= 100.0:
            raise ValueError(f"percentile_p must lie in [0, 100], got {self.percentile_p}")

    @classmethod
    def steer(cls, gamma: float) -> "RoutingPolicy":
        return cls(PolicyKind.POSTERIOR_THRESHOLD, gamma=gamma)

    @classmethod
    def percentile(cls, p: float) -> "RoutingPolicy":
        return cls(PolicyKind.PERCENTILE, percentile_p=p)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "gamma": self.gamma, "percentile_p": self.percentile_p}


def decide(posterior: float, gamma: float) -> ModelChoice:
    """Keep the small model iff the confident-posterior reaches ``gamma``."""
    if not (0.0 <= posterior <= 1.0 and 0.0 <= gamma <= 1.0):
        raise ValueError(f"posterior and gamma must lie in [0, 1], got {posterior}, {gamma}")
    return ModelChoice.SMALL if posterior >= gamma else ModelChoice.LARGE


Partition = Tuple[list, list]


def classify_batch(
    confidences: Sequence[Tuple[Hashable, float]],
    params: MixtureParams,
    gamma: float,
) -> Partition:
    """Split ``(trace_id, phi)`` pairs into ``(small_ids, large_ids)``.

    A fit flagged as weakly separated carries no evidence of an unconfident
    cluster, so every trace stays on the small model.
    """
    if len(confidences) == 0:
        raise ValueError("confidences must be non-empty")
    small, large = [], []
    for trace_id, phi in confidences:
        if params.weak_separation:
            small.append(trace_id)
            continue
        choice = decide(posterior_confident(phi, params), gamma)
        (small if choice is ModelChoice.SMALL else large).append(trace_id)
    return small, large


def ceil_fraction(p: float, n: int) -> int:
    """``ceil(p * n / 100)``, exact for percentages with up to six decimals."""
    # float arithmetic would turn e.g. 70 * 10 / 100 into 7.000000000000001
    return -(-int(round(p * 1_000_000)) * n // 100_000_000)


def percentile_cutoff(values: Sequence[float], p: float) -> float:
    """Confidence value at or above which a trace stays on the small model.

    With ``n`` values the cutoff is the ``k``-th order statistic (0-based)
    where ``k = ceil(p * n / 100)``, clipped to the largest value; so for
    distinct values exactly the ``k`` lowest fall strictly below it.
    """
    if len(values) == 0:
        raise ValueError("values must be non-empty")
    if not 0.0 <= p <= 100.0:
        raise ValueError(f"p must lie in [0, 100], got {p}")
    ordered = sorted(values)
    k = ceil_fraction(p, len(ordered))
    return ordered[min(k, len(ordered) - 1)]


def percentile_route(confidences: Sequence[Tuple[Hashable, float]], p: float) -> Partition:
    """Route traces whose confidence falls strictly below the p-th percentile to large.

    Ties with the cutoff stay small.
    """
    if len(confidences) == 0:
        raise ValueError("confidences must be non-empty")
    cutoff = percentile_cutoff([phi for _, phi in confidences], p)
    small, large = [], []
    for trace_id, phi in confidences:
        (large if phi < cutoff else small).append(trace_id)
    return small, large


class PosteriorThresholdRouter(ClassifierMixin, BaseEstimator):
    """Fit the confidence mixture on a batch, then route by posterior threshold.

    ``predict`` returns an object array of ``"small"`` / ``"large"``.
    """

    def __init__(self, gamma=0.5, max_iter=200, tol=1e-6, variance_floor=1e-8, min_samples=4):
        self.gamma = gamma
        self.max_iter = max_iter
        self.tol = tol
        self.variance_floor = variance_floor
        self.min_samples = min_samples

    def fit(self, X, y=None):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        self.mixture_ = TwoComponentGMM(
            max_iter=self.max_iter, tol=self.tol,
            variance_floor=self.variance_floor, min_samples=self.min_samples,
        ).fit(X)
        self.params_ = self.mixture_.params_
        self.classes_ = np.array([ModelChoice.SMALL.value, ModelChoice.LARGE.value], dtype=object)
        self.n_features_in_ = 1
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Columns follow ``classes_``: ``[P(confident), P(unconfident)]``."""
        check_is_fitted(self, "params_")
        proba = self.mixture_.predict_proba(X)
        return proba[:, ::-1]

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        x = _validate_1d(X)
        if self.params_.weak_separation:
            return np.full(x.shape[0], ModelChoice.SMALL.value, dtype=object)
        return np.array(
            [decide(posterior_confident(v, self.params_), self.gamma).value for v in x],
            dtype=object,
        )


class PercentileRouter(BaseEstimator):
    """Route the batch's lowest-confidence traces, up to ``p`` percent, to large."""

    def __init__(self, p=50.0):
        self.p = p

    def fit(self, X, y=None):
        x = _validate_1d(X)
        self.cutoff_ = percentile_cutoff(x.tolist(), self.p)
        self.n_features_in_ = 1
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "cutoff_")
        x = _validate_1d(X)
        return np.where(x < self.cutoff_, ModelChoice.LARGE.value, ModelChoice.SMALL.value).astype(object)

    def fit_predict(self, X, y=None) -> np.ndarray:
        return self.fit(X).predict(X)

