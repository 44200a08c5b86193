"""FLOPs accounting, accuracy-per-FLOPs and large-model usage statistics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional

FLOPS_UNIT = 10**12
N_DECILES = 10
ROLES = ("small", "large")


def flops_for(param_count: int, tokens: int) -> float:
    """Inference FLOPs for ``tokens`` generated tokens, in units of 1e12.

    Uses 2 FLOPs per parameter per token; the product is formed in integer
    arithmetic so the only rounding is the final division.
    """
    if param_count <= 0:
        raise ValueError(f"param_count must be positive, got {param_count}")
    if tokens < 0:
        raise ValueError(f"tokens must be non-negative, got {tokens}")
    return (2 * int(param_count) * int(tokens)) / FLOPS_UNIT


def accuracy_per_flops(accuracy: float, avg_flops: float) -> float:
    """A/F: accuracy (in percent, as reported) over mean per-query FLOPs (1e12 units)."""
    if not avg_flops > 0:
        raise ValueError(f"avg_flops must be positive, got {avg_flops}")
    return accuracy / avg_flops


@dataclass
class TraceCost:
    trace_id: str
    tokens_small: int = 0
    tokens_large: int = 0
    prompt_tokens_small: int = 0
    prompt_tokens_large: int = 0
    steps_small: int = 0
    steps_large: int = 0
    status: str = "ongoing"
    correct: Optional[bool] = None

    def to_dict(self) -> dict:
        return {
            "trace_id": self.trace_id,
            "tokens_small": self.tokens_small,
            "tokens_large": self.tokens_large,
            "prompt_tokens_small": self.prompt_tokens_small,
            "prompt_tokens_large": self.prompt_tokens_large,
            "steps_small": self.steps_small,
            "steps_large": self.steps_large,
            "status": self.status,
            "correct": self.correct,
        }


@dataclass
class CostLedger:
    param_counts: Dict[str, int]
    model_names: Dict[str, str] = field(default_factory=dict)
    records: Dict[str, TraceCost] = field(default_factory=dict)
    large_usage_by_relative_step: Optional[dict] = None

    def __post_init__(self):
        for role in ROLES:
            if role not in self.param_counts:
                raise ValueError(f"missing param_count for {role!r}")

    def record(self, trace_id: str) -> TraceCost:
        rec = self.records.get(trace_id)
        if rec is None:
            rec = self.records[trace_id] = TraceCost(trace_id)
        return rec

    def add_tokens(self, trace_id: str, role: str, tokens: int, prompt_tokens: int = 0) -> None:
        """Charge one generation call (one step, possibly later discarded) to a trace."""
        rec = self.record(trace_id)
        if rec.status not in ("ongoing",):
            raise RuntimeError(f"trace {trace_id!r} is {rec.status}; no further cost may accrue")
        if role == "small":
            rec.tokens_small += tokens
            rec.prompt_tokens_small += prompt_tokens
            rec.steps_small += 1
        elif role == "large":
            rec.tokens_large += tokens
            rec.prompt_tokens_large += prompt_tokens
            rec.steps_large += 1
        else:
            raise ValueError(f"unknown role {role!r}")

    def set_status(self, trace_id: str, status: str) -> None:
        self.record(trace_id).status = status

    def mark_correct(self, trace_id: str, correct: bool) -> None:
        self.record(trace_id).correct = bool(correct)

    def tokens(self, role: str) -> int:
        attr = "tokens_small" if role == "small" else "tokens_large"
        return sum(getattr(r, attr) for r in self.records.values())

    def prompt_tokens(self, role: str) -> int:
        attr = "prompt_tokens_small" if role == "small" else "prompt_tokens_large"
        return sum(getattr(r, attr) for r in self.records.values())

    def flops(self, role: str) -> float:
        return flops_for(self.param_counts[role], self.tokens(role))

    def prefill_flops(self, role: str) -> float:
        return flops_for(self.param_counts[role], self.prompt_tokens(role))

    @property
    def n_queries(self) -> int:
        return len(self.records)

    def total_flops(self) -> float:
        return sum(self.flops(role) for role in ROLES)

    def avg_flops(self) -> float:
        if not self.records:
            return 0.0
        return self.total_flops() / self.n_queries

    def accuracy(self) -> Optional[float]:
        """Percent correct over all queries; failed traces count as wrong.

        ``None`` unless every non-failed trace has a correctness label.
        """
        if not self.records:
            return None
        hits = 0
        for rec in self.records.values():
            if rec.status == "failed":
                continue
            if rec.correct is None:
                return None
            hits += rec.correct
        return 100.0 * hits / self.n_queries

    def a_per_f(self) -> Optional[float]:
        acc = self.accuracy()
        avg = self.avg_flops()
        if acc is None or avg <= 0:
            return None
        return accuracy_per_flops(acc, avg)

    def large_token_share(self) -> float:
        total = self.tokens("small") + self.tokens("large")
        return self.tokens("large") / total if total else 0.0

    def large_step_share(self) -> float:
        """Fraction of generation calls, discarded step-0 drafts included, made to large."""
        large = sum(r.steps_large for r in self.records.values())
        total = large + sum(r.steps_small for r in self.records.values())
        return large / total if total else 0.0

    def merge(self, other: "CostLedger") -> "CostLedger":
        """Combine ledgers of disjoint question groups."""
        if other.param_counts != self.param_counts:
            raise ValueError("cannot merge ledgers with different param counts")
        overlap = set(self.records) & set(other.records)
        if overlap:
            raise ValueError(f"ledgers share trace ids: {sorted(overlap)[:5]}")
        merged = CostLedger(dict(self.param_counts), dict(self.model_names or other.model_names))
        merged.records = {**self.records, **other.records}
        return merged

    def summary(self) -> dict:
        return {
            "n_queries": self.n_queries,
            "accuracy": self.accuracy(),
            "avg_flops": self.avg_flops(),
            "a_per_f": self.a_per_f(),
            "large_token_share": self.large_token_share(),
            "large_step_share": self.large_step_share(),
        }

    def to_dict(self) -> dict:
        per_model = {}
        for role in ROLES:
            per_model[role] = {
                "name": self.model_names.get(role, role),
                "param_count": self.param_counts[role],
                "tokens": self.tokens(role),
                "flops": self.flops(role),
                "prompt_tokens": self.prompt_tokens(role),
                "prefill_flops": self.prefill_flops(role),
            }
        return {
            "per_model": per_model,
            "per_trace": [self.records[k].to_dict() for k in sorted(self.records)],
            "summary": self.summary(),
            "usage_profile": self.large_usage_by_relative_step,
        }


def decile_bin(step_index: int, n_steps: int) -> int:
    """0-based decile of relative position ``(step_index + 1) / n_steps``.

    Bin ``b`` covers ``(b / 10, (b + 1) / 10]``, so the first step of a
    ten-step trace lands in bin 0 (labelled 0.1) and the last in bin 9 (1.0).
    """
    if not 0 <= step_index < n_steps:
        raise ValueError("step_index out of range")
    return -(-N_DECILES * (step_index + 1) // n_steps) - 1


def _profile(step_models: Iterable[List[str]]) -> List[Optional[float]]:
    large = [0] * N_DECILES
    total = [0] * N_DECILES
    for models in step_models:
        n = len(models)
        for i, m in enumerate(models):
            b = decile_bin(i, n)
            total[b] += 1
            large[b] += m == "large"
    return [large[b] / total[b] if total[b] else None for b in range(N_DECILES)]


def usage_profile(traces, correct: Optional[Mapping[str, bool]] = None) -> dict:
    """Share of steps produced by the large model, binned by relative step position.

    ``traces`` are objects with ``question_id`` and ``steps`` (each step
    having ``model``). Empty bins report ``None``. When ``correct`` maps
    trace ids to labels the profile is also split by outcome.
    """
    traces = list(traces)
    if not traces:
        raise ValueError("traces must be non-empty")

    def models_of(t):
        return [getattr(s.model, "value", s.model) for s in t.steps]

    out = {
        "bins": [round((b + 1) / N_DECILES, 1) for b in range(N_DECILES)],
        "overall": _profile(models_of(t) for t in traces if t.steps),
    }
    if correct is not None:
        out["correct"] = _profile(
            models_of(t) for t in traces if t.steps and correct.get(t.question_id) is True)
        out["incorrect"] = _profile(
            models_of(t) for t in traces if t.steps and correct.get(t.question_id) is False)
    return out
