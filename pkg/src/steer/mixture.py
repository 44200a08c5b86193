"""Two-component univariate Gaussian mixture fitted by EM.

The higher-mean component is always labelled "confident". Everything is
computed in the log domain so posteriors stay accurate far into the tails.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, DensityMixin
from sklearn.utils.validation import check_array, check_is_fitted

_LOG_2PI = math.log(2.0 * math.pi)

# thresholds for flagging a fit whose two components are not really distinct
WEAK_MEAN_GAP = 1e-6
WEAK_MIN_WEIGHT = 1e-3


class MixtureFitError(ValueError):
    pass


class InsufficientDataError(MixtureFitError):
    pass


class DegenerateFitError(MixtureFitError):
    pass


@dataclass(frozen=True)
class EmConfig:
    max_iterations: int = 200
    loglik_tolerance: float = 1e-6
    variance_floor: float = 1e-8
    min_samples: int = 4
    # initialisation is quantile-based and deterministic; the seed is carried
    # so that every fit is reproducible from its recorded config alone
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if not self.loglik_tolerance > 0:
            raise ValueError("loglik_tolerance must be positive")
        if not self.variance_floor > 0:
            raise ValueError("variance_floor must be positive")
        if self.min_samples < 1:
            raise ValueError("min_samples must be positive")


@dataclass(frozen=True)
class MixtureParams:
    weight_c: float
    weight_u: float
    mean_c: float
    mean_u: float
    var_c: float
    var_u: float
    weak_separation: bool = False

    def __post_init__(self):
        if not (0.0 <= self.weight_c <= 1.0 and 0.0 <= self.weight_u <= 1.0):
            raise ValueError("mixture weights must lie in [0, 1]")
        if abs(self.weight_c + self.weight_u - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to 1")
        if not (self.var_c > 0 and self.var_u > 0):
            raise ValueError("component variances must be positive")
        if not all(math.isfinite(v) for v in (self.mean_c, self.mean_u, self.var_c, self.var_u)):
            raise ValueError("mixture parameters must be finite")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureParams":
        return cls(
            weight_c=float(d["weight_c"]),
            weight_u=float(d["weight_u"]),
            mean_c=float(d["mean_c"]),
            mean_u=float(d["mean_u"]),
            var_c=float(d["var_c"]),
            var_u=float(d["var_u"]),
            weak_separation=bool(d.get("weak_separation", False)),
        )


def _log_normal(x, mean, var):
    return -0.5 * (_LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


def _component_log_terms(x: np.ndarray, params: MixtureParams):
    with np.errstate(divide="ignore"):
        log_c = np.log(params.weight_c) + _log_normal(x, params.mean_c, params.var_c)
        log_u = np.log(params.weight_u) + _log_normal(x, params.mean_u, params.var_u)
    return log_c, log_u


def _as_samples(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64).ravel()
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    return x


def log_likelihood(samples, params: MixtureParams) -> float:
    x = _as_samples(samples)
    if x.size == 0:
        raise ValueError("samples must be non-empty")
    log_c, log_u = _component_log_terms(x, params)
    return float(np.logaddexp(log_c, log_u).sum())


def _log_odds(x, params: MixtureParams):
    """log p(c | x) - log p(u | x), with the shared constants cancelled
    symbolically so identical components give exactly the prior odds."""
    p = params
    with np.errstate(divide="ignore"):
        prior = np.log(p.weight_c) - np.log(p.weight_u)
    return (prior - 0.5 * np.log(p.var_c / p.var_u)
            - (x - p.mean_c) ** 2 / (2.0 * p.var_c) + (x - p.mean_u) ** 2 / (2.0 * p.var_u))


def posterior_confident(phi: float, params: MixtureParams) -> float:
    """Probability that ``phi`` was drawn from the confident component."""
    d = float(_log_odds(float(phi), params))
    if math.isnan(d):
        return 0.5
    # logistic of the log-odds, evaluated on the non-overflowing branch
    if d >= 0:
        post = 1.0 / (1.0 + math.exp(-d))
    else:
        e = math.exp(d)
        post = e / (1.0 + e)
    return min(1.0, max(0.0, post))


def posterior_confident_many(samples, params: MixtureParams) -> np.ndarray:
    d = _log_odds(_as_samples(samples), params)
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return np.clip(out, 0.0, 1.0)


def _flag_weak(params: MixtureParams) -> MixtureParams:
    weak = (
        abs(params.mean_c - params.mean_u) < WEAK_MEAN_GAP
        or min(params.weight_c, params.weight_u) < WEAK_MIN_WEIGHT
    )
    return replace(params, weak_separation=weak)


def _relabel(w, mu, var) -> MixtureParams:
    # index 1 is the confident (higher-mean) component after relabelling
    order = np.argsort(mu, kind="stable")
    w, mu, var = w[order], mu[order], var[order]
    weight_u = float(w[0])
    return MixtureParams(
        weight_c=1.0 - weight_u,
        weight_u=weight_u,
        mean_c=float(mu[1]),
        mean_u=float(mu[0]),
        var_c=float(var[1]),
        var_u=float(var[0]),
    )


def _check_fit_input(x: np.ndarray, config: EmConfig):
    if x.size < config.min_samples:
        raise InsufficientDataError(
            f"need at least {config.min_samples} samples to fit, got {x.size}"
        )
    if x.size == 0 or np.ptp(x) == 0.0:
        raise DegenerateFitError("all samples are identical; a two-component fit is undefined")


def run_em(samples, config: EmConfig = EmConfig(), init: Optional[MixtureParams] = None):
    """Run EM and return ``(params, loglik_history, n_iter, converged)``.

    ``loglik_history[0]`` is the log-likelihood at the starting point and one
    entry is appended after every EM iteration.
    """
    x = _as_samples(samples)
    _check_fit_input(x, config)
    n = x.size
    floor = config.variance_floor

    if init is None:
        pooled = max(float(x.var()), floor)
        mu = np.array(np.percentile(x, [25.0, 75.0]), dtype=np.float64)
        w = np.array([0.5, 0.5])
        var = np.array([pooled, pooled])
    else:
        mu = np.array([init.mean_u, init.mean_c])
        w = np.array([init.weight_u, init.weight_c])
        var = np.maximum(np.array([init.var_u, init.var_c]), floor)

    def loglik_and_resp(w, mu, var):
        with np.errstate(divide="ignore"):
            log_terms = np.log(w)[None, :] + _log_normal(x[:, None], mu[None, :], var[None, :])
        log_total = np.logaddexp(log_terms[:, 0], log_terms[:, 1])
        resp = np.exp(log_terms - log_total[:, None])
        return float(log_total.sum()), resp

    ll, resp = loglik_and_resp(w, mu, var)
    history = [ll]
    converged = False
    n_iter = 0
    for n_iter in range(1, config.max_iterations + 1):
        nk = resp.sum(axis=0)
        # a component that lost all responsibility keeps its previous shape
        nk_safe = np.where(nk > 0, nk, 1.0)
        w = nk / n
        mu = np.where(nk > 0, (resp * x[:, None]).sum(axis=0) / nk_safe, mu)
        sq = (resp * (x[:, None] - mu[None, :]) ** 2).sum(axis=0)
        var = np.maximum(np.where(nk > 0, sq / nk_safe, var), floor)
        w = w / w.sum()

        ll_new, resp = loglik_and_resp(w, mu, var)
        history.append(ll_new)
        if ll_new - ll < config.loglik_tolerance:
            converged = True
            ll = ll_new
            break
        ll = ll_new

    params = _flag_weak(_relabel(w, mu, var))
    return params, history, n_iter, converged


def fit_em(samples, config: EmConfig = EmConfig(), init: Optional[MixtureParams] = None) -> MixtureParams:
    """Fit the mixture to ``samples`` and return the relabelled parameters.

    Raises :class:`InsufficientDataError` when fewer than
    ``config.min_samples`` values are given and :class:`DegenerateFitError`
    when every sample is identical.
    """
    params, _, _, _ = run_em(samples, config, init)
    return params


class TwoComponentGMM(DensityMixin, BaseEstimator):
    """Estimator wrapper around :func:`run_em`.

    ``predict_proba`` returns columns ``[unconfident, confident]``;
    ``predict`` returns 1 for the confident component.

    >>> gmm = TwoComponentGMM().fit([0.1, 0.2, 0.15, 5.0, 5.2, 4.9])
    >>> gmm.predict([0.0, 5.1]).tolist()
    [0, 1]
    """

    def __init__(self, max_iter=200, tol=1e-6, variance_floor=1e-8, min_samples=4,
                 warm_start=False):
        self.max_iter = max_iter
        self.tol = tol
        self.variance_floor = variance_floor
        self.min_samples = min_samples
        self.warm_start = warm_start

    def _em_config(self) -> EmConfig:
        return EmConfig(
            max_iterations=self.max_iter,
            loglik_tolerance=self.tol,
            variance_floor=self.variance_floor,
            min_samples=self.min_samples,
        )

    def fit(self, X, y=None):
        x = _validate_1d(X)
        init = self.params_ if self.warm_start and hasattr(self, "params_") else None
        params, history, n_iter, converged = run_em(x, self._em_config(), init)
        self.params_ = params
        self.loglik_history_ = history
        self.n_iter_ = n_iter
        self.converged_ = converged
        self.n_features_in_ = 1
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        post = posterior_confident_many(_validate_1d(X), self.params_)
        return np.column_stack([1.0 - post, post])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def score_samples(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        x = _validate_1d(X)
        log_c, log_u = _component_log_terms(x, self.params_)
        return np.logaddexp(log_c, log_u)

    def score(self, X, y=None) -> float:
        return float(self.score_samples(X).mean())


def _validate_1d(X) -> np.ndarray:
    """Accept a 1-D sequence of scores or an ``(n, 1)`` column."""
    arr = check_array(X, ensure_2d=False, dtype=np.float64)
    if arr.ndim == 2:
        if arr.shape[1] != 1:
            raise ValueError(f"expected a single feature column, got shape {arr.shape}")
        arr = arr[:, 0]
    return arr


def fit_or_none(samples: Sequence[float], config: EmConfig, init=None) -> Optional[MixtureParams]:
    """Like :func:`fit_em` but returns ``None`` where a fit is not possible."""
    try:
        return fit_em(samples, config, init)
    except MixtureFitError:
        return None
