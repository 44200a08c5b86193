"""Token- and step-level confidence scores derived from generator logits."""

from __future__ import annotations

import enum
import math
import statistics
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class Metric(str, enum.Enum):
    MAX_LOGIT = "max_logit"
    MAX_PROB = "max_prob"
    ENTROPY = "entropy"


class Aggregation(str, enum.Enum):
    ALL_TOKENS_MEAN = "all_tokens_mean"
    MATH_TOKENS_MEAN = "math_tokens_mean"


class TokenSource(str, enum.Enum):
    RAW_LOGITS = "raw_logits"
    LOGPROBS_PROXY = "logprobs_proxy"


@dataclass(frozen=True)
class TokenObservation:
    """Confidence readings for one generated token.

    ``entropy`` is stored raw (nats). It is negated only when aggregated so
    that larger step confidence always means "more confident".
    """

    text: str
    max_logit: float
    max_prob: float
    entropy: float
    source: TokenSource = TokenSource.RAW_LOGITS

    def __post_init__(self):
        if not 0.0 <= self.max_prob <= 1.0:
            raise ValueError(f"max_prob must lie in [0, 1], got {self.max_prob}")
        if self.entropy < 0.0:
            raise ValueError(f"entropy must be non-negative, got {self.entropy}")

    def score(self, metric: Metric | str) -> float:
        metric = Metric(metric)
        if metric is Metric.MAX_LOGIT:
            return self.max_logit
        if metric is Metric.MAX_PROB:
            return self.max_prob
        return -self.entropy

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "max_logit": self.max_logit,
            "max_prob": self.max_prob,
            "entropy": self.entropy,
            "source": self.source.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TokenObservation":
        return cls(
            text=d["text"],
            max_logit=float(d["max_logit"]),
            max_prob=float(d["max_prob"]),
            entropy=float(d["entropy"]),
            source=TokenSource(d.get("source", TokenSource.RAW_LOGITS.value)),
        )


@dataclass(frozen=True)
class StepConfidence:
    value: float
    metric: Metric
    aggregation: Aggregation
    token_count: int

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "metric": self.metric.value,
            "aggregation": self.aggregation.value,
            "token_count": self.token_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepConfidence":
        return cls(
            value=float(d["value"]),
            metric=Metric(d["metric"]),
            aggregation=Aggregation(d["aggregation"]),
            token_count=int(d["token_count"]),
        )


def token_confidence(logits, text: str = "") -> TokenObservation:
    """Read max-logit, max-probability and entropy off a vocabulary logit vector."""
    z = np.asarray(logits, dtype=np.float64).ravel()
    if z.size == 0:
        raise ValueError("logit vector is empty")
    if not np.all(np.isfinite(z)):
        raise ValueError("logit vector contains non-finite entries")

    top = float(z.max())
    shifted = z - top
    log_norm = math.log(float(np.exp(shifted).sum()))
    log_p = shifted - log_norm
    p = np.exp(log_p)
    entropy = float(-(p * log_p).sum())
    return TokenObservation(
        text=text,
        max_logit=top,
        max_prob=min(1.0, math.exp(-log_norm)),
        entropy=max(0.0, entropy),
        source=TokenSource.RAW_LOGITS,
    )


def token_from_logprobs(text: str, top_logprobs: Sequence[float]) -> TokenObservation:
    """Build a token reading from the top-k log-probabilities a hosted API returns.

    The largest returned log-probability stands in for the max logit. Entropy
    is computed over the returned entries only, so it is a lower bound when
    ``k`` is smaller than the vocabulary.
    """
    lp = np.asarray(list(top_logprobs), dtype=np.float64)
    if lp.size == 0:
        raise ValueError("no log-probabilities supplied")
    if not np.all(np.isfinite(lp)):
        raise ValueError("log-probabilities must be finite")
    top = float(lp.max())
    p = np.exp(lp)
    entropy = float(-(p * lp).sum())
    return TokenObservation(
        text=text,
        max_logit=top,
        max_prob=min(1.0, math.exp(top)),
        entropy=max(0.0, entropy),
        source=TokenSource.LOGPROBS_PROXY,
    )


# digits, LaTeX backslash, operators and brackets
_MATH_CHARS = frozenset("0123456789\\+-−*/=<>^_()[]{}%!|√≤≥≠")


def is_math_token(text: str) -> bool:
    return any(ch in _MATH_CHARS for ch in text)


def aggregate_step(
    tokens: Sequence[TokenObservation],
    metric: Metric | str = Metric.MAX_LOGIT,
    aggregation: Aggregation | str = Aggregation.ALL_TOKENS_MEAN,
) -> StepConfidence:
    """Collapse per-token readings into one step confidence.

    With ``math_tokens_mean`` only tokens flagged by :func:`is_math_token`
    contribute; a step without any such token falls back to the mean over
    all tokens.
    """
    metric = Metric(metric)
    aggregation = Aggregation(aggregation)
    if len(tokens) == 0:
        raise ValueError("cannot aggregate an empty step")

    selected = list(tokens)
    if aggregation is Aggregation.MATH_TOKENS_MEAN:
        math_only = [t for t in tokens if is_math_token(t.text)]
        if math_only:
            selected = math_only
    # exact rational mean, rounded once: order-independent and never outside [min, max]
    value = float(statistics.mean(t.score(metric) for t in selected))
    return StepConfidence(
        value=value, metric=metric, aggregation=aggregation, token_count=len(tokens)
    )
