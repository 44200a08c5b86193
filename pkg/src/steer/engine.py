"""Step-synchronised routing between a small and a large generator.

All ongoing traces finish step ``i`` before anything is decided about step
``i + 1``. At that barrier the step-``i`` confidences of the still-ongoing
traces are fitted with the two-component mixture and each trace is routed
by its own posterior. Step 0 is always produced by the small model first;
traces it is unconfident about get step 0 regenerated by the large model.
"""

from __future__ import annotations

import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .confidence import Aggregation, Metric, StepConfidence, TokenObservation, aggregate_step
from .cost import CostLedger, usage_profile
from .events import FIT_COMPUTED, ROUTE_DECIDED, STEP_GENERATED, TRACE_COMPLETED, EventLog
from .generators.base import STEP_SEPARATOR, Generator, GeneratorError, split_at_separator
from .mixture import EmConfig, MixtureFitError, MixtureParams, fit_em, posterior_confident
from .routing import ModelChoice, PolicyKind, RoutingPolicy, decide, percentile_cutoff

logger = logging.getLogger(__name__)

DEFAULT_MAX_STEPS = 64


class TraceStatus(str, enum.Enum):
    ONGOING = "ongoing"
    COMPLETE_EOS = "complete_eos"
    COMPLETE_MAX_STEPS = "complete_max_steps"
    FAILED = "failed"


class Pooling(str, enum.Enum):
    POOLED = "pooled"
    PER_MODEL = "per_model"


@dataclass(frozen=True)
class StepRecord:
    index: int
    text: str
    model: ModelChoice
    confidence: StepConfidence
    token_count: int
    refined: bool = False
    eos: bool = False
    tokens: Tuple[TokenObservation, ...] = ()

    def __post_init__(self):
        if STEP_SEPARATOR in self.text:
            raise ValueError("step text must not contain the step separator")
        if self.refined and self.index != 0:
            raise ValueError("only step 0 can be a refined step")
        if self.token_count < 1:
            raise ValueError("a step has at least one token")

    @property
    def phi(self) -> float:
        return self.confidence.value

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "text": self.text,
            "model": self.model.value,
            "confidence": self.confidence.to_dict(),
            "token_count": self.token_count,
            "refined": self.refined,
            "eos": self.eos,
            "tokens": [t.to_dict() for t in self.tokens],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepRecord":
        return cls(
            index=int(d["index"]),
            text=d["text"],
            model=ModelChoice(d["model"]),
            confidence=StepConfidence.from_dict(d["confidence"]),
            token_count=int(d["token_count"]),
            refined=bool(d.get("refined", False)),
            eos=bool(d.get("eos", False)),
            tokens=tuple(TokenObservation.from_dict(t) for t in d.get("tokens", [])),
        )


@dataclass
class Trace:
    question_id: str
    prompt: str
    steps: List[StepRecord] = field(default_factory=list)
    status: TraceStatus = TraceStatus.ONGOING
    current_model: ModelChoice = ModelChoice.SMALL
    error: Optional[str] = None

    @property
    def ongoing(self) -> bool:
        return self.status is TraceStatus.ONGOING

    def continuation_prompt(self, step_index: Optional[int] = None) -> str:
        """Question plus the steps before ``step_index`` (default: all of them),
        joined by the step separator."""
        steps = self.steps if step_index is None else self.steps[:step_index]
        return STEP_SEPARATOR.join([self.prompt] + [s.text for s in steps]) + STEP_SEPARATOR

    def solution_text(self) -> str:
        return STEP_SEPARATOR.join(s.text for s in self.steps)

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "prompt": self.prompt,
            "status": self.status.value,
            "current_model": self.current_model.value,
            "error": self.error,
            "steps": [s.to_dict() for s in self.steps],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trace":
        return cls(
            question_id=d["question_id"],
            prompt=d["prompt"],
            steps=[StepRecord.from_dict(s) for s in d["steps"]],
            status=TraceStatus(d["status"]),
            current_model=ModelChoice(d["current_model"]),
            error=d.get("error"),
        )


@dataclass(frozen=True)
class EngineConfig:
    max_steps: int = DEFAULT_MAX_STEPS
    gamma: float = 0.5
    aggregation: Aggregation = Aggregation.ALL_TOKENS_MEAN
    metric: Metric = Metric.MAX_LOGIT
    group_count: int = 1
    temperature: float = 0.7
    em: EmConfig = EmConfig()
    seed: int = 0
    pooling: Pooling = Pooling.POOLED
    warm_start: bool = False
    concurrency: int = 1

    def __post_init__(self):
        object.__setattr__(self, "aggregation", Aggregation(self.aggregation))
        object.__setattr__(self, "metric", Metric(self.metric))
        object.__setattr__(self, "pooling", Pooling(self.pooling))
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.group_count < 1:
            raise ValueError("group_count must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.concurrency < 1:
            raise ValueError("concurrency must be positive")

    def to_dict(self) -> dict:
        return {
            "max_steps": self.max_steps,
            "gamma": self.gamma,
            "aggregation": self.aggregation.value,
            "metric": self.metric.value,
            "group_count": self.group_count,
            "temperature": self.temperature,
            "em": {
                "max_iterations": self.em.max_iterations,
                "loglik_tolerance": self.em.loglik_tolerance,
                "variance_floor": self.em.variance_floor,
                "min_samples": self.em.min_samples,
                "seed": self.em.seed,
            },
            "seed": self.seed,
            "pooling": self.pooling.value,
            "warm_start": self.warm_start,
            "concurrency": self.concurrency,
        }


def segment_step(generated_text: str, eos: bool = False) -> Tuple[str, bool, bool]:
    """Cut generated text at the first step separator.

    Returns ``(step_text, hit_separator, hit_eos)``; ``hit_eos`` is true only
    when the generator signalled end-of-sequence before any separator.
    """
    step_text, hit_sep = split_at_separator(generated_text, STEP_SEPARATOR)
    return step_text, hit_sep, bool(eos) and not hit_sep


def group_split(questions: Sequence, k: int, seed: int = 0) -> List[list]:
    """Seeded partition into ``k`` groups whose sizes differ by at most one."""
    n = len(questions)
    if not 1 <= k <= n:
        raise ValueError(f"group count must lie in [1, {n}], got {k}")
    order = np.random.default_rng(seed).permutation(n) if k > 1 else np.arange(n)
    return [[questions[i] for i in chunk] for chunk in np.array_split(order, k)]


def is_complete(trace: Trace, config: EngineConfig) -> bool:
    if not trace.steps:
        return False
    return trace.steps[-1].eos or len(trace.steps) >= config.max_steps


class _Router:
    """Per-run routing state: last successful fit per pool, and the event log."""

    def __init__(self, policy: RoutingPolicy, config: EngineConfig, log: EventLog, group: int):
        self.policy = policy
        self.config = config
        self.log = log
        self.group = group
        self.last_fit: Dict[str, MixtureParams] = {}

    def _pools(self, traces: Sequence[Trace]) -> Dict[str, List[Trace]]:
        if self.config.pooling is Pooling.POOLED:
            return {"all": list(traces)}
        pools: Dict[str, List[Trace]] = {}
        for t in traces:
            pools.setdefault(t.steps[-1].model.value, []).append(t)
        return pools

    def _fit(self, key: str, phis: List[float], source_step: int) -> Tuple[Optional[MixtureParams], str]:
        init = self.last_fit.get(key) if self.config.warm_start else None
        params, source = None, "none"
        if len(phis) >= self.config.em.min_samples:
            try:
                params = fit_em(phis, self.config.em, init)
                source = "fit"
            except MixtureFitError as exc:
                logger.info("step %d pool %s: %s", source_step, key, exc)
        if params is None and key in self.last_fit:
            params, source = self.last_fit[key], "reused"
        elif params is not None:
            self.last_fit[key] = params
        self.log.emit(
            FIT_COMPUTED, step_index=source_step,
            params={
                "group": self.group, "pool": key, "n_samples": len(phis), "source": source,
                "mixture": params.to_dict() if params else None,
            },
        )
        return params, source

    def route(self, traces: Sequence[Trace], target_step: int) -> Dict[str, ModelChoice]:
        """Choose the model for ``target_step`` of each trace from its last step's confidence."""
        kind = self.policy.kind
        if kind is PolicyKind.ALWAYS_SMALL:
            return {t.question_id: ModelChoice.SMALL for t in traces}
        if kind is PolicyKind.ALWAYS_LARGE:
            return {t.question_id: ModelChoice.LARGE for t in traces}

        source_step = traces[0].steps[-1].index if traces else 0
        decisions: Dict[str, ModelChoice] = {}
        for key, pool in self._pools(traces).items():
            phis = [t.steps[-1].phi for t in pool]
            if kind is PolicyKind.PERCENTILE:
                cutoff = percentile_cutoff(phis, self.policy.percentile_p)
                self.log.emit(
                    FIT_COMPUTED, step_index=source_step,
                    params={"group": self.group, "pool": key, "n_samples": len(phis),
                            "source": "percentile", "cutoff": cutoff,
                            "p": self.policy.percentile_p},
                )
                for t, phi in zip(pool, phis):
                    choice = ModelChoice.LARGE if phi < cutoff else ModelChoice.SMALL
                    decisions[t.question_id] = choice
                    self.log.emit(
                        ROUTE_DECIDED, step_index=target_step, trace_id=t.question_id,
                        model=choice, phi=phi,
                        params={"group": self.group, "pool": key, "policy": kind.value,
                                "cutoff": cutoff, "p": self.policy.percentile_p},
                    )
                continue

            gamma = self.policy.gamma
            params, source = self._fit(key, phis, source_step)
            for t, phi in zip(pool, phis):
                if params is None or params.weak_separation:
                    posterior = None
                    choice = ModelChoice.SMALL
                else:
                    posterior = posterior_confident(phi, params)
                    choice = decide(posterior, gamma)
                decisions[t.question_id] = choice
                self.log.emit(
                    ROUTE_DECIDED, step_index=target_step, trace_id=t.question_id,
                    model=choice, phi=phi, posterior=posterior,
                    params={"group": self.group, "pool": key, "policy": kind.value,
                            "gamma": gamma, "fit_source": source,
                            "mixture": params.to_dict() if params else None},
                )
        return decisions


class _Run:
    def __init__(self, questions, small: Generator, large: Generator, config: EngineConfig,
                 policy: RoutingPolicy, log: EventLog, ledger: CostLedger, group: int):
        self.config = config
        self.policy = policy
        self.log = log
        self.ledger = ledger
        self.generators = {ModelChoice.SMALL: small, ModelChoice.LARGE: large}
        self.router = _Router(policy, config, log, group)
        self.traces = [Trace(question_id=str(qid), prompt=prompt) for qid, prompt in questions]
        for t in self.traces:
            ledger.record(t.question_id)

    def _call(self, job):
        trace, model, step_index = job
        gen = self.generators[model]
        try:
            return gen.generate_step(trace.continuation_prompt(step_index), trace.question_id,
                                     step_index), None
        except GeneratorError as exc:
            return None, exc

    def _generate(self, jobs: List[Tuple[Trace, ModelChoice, int]]):
        """Run one barrier's generation calls; results come back in job order."""
        if self.config.concurrency > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=self.config.concurrency) as pool:
                return list(pool.map(self._call, jobs))
        return [self._call(job) for job in jobs]

    def _fail(self, trace: Trace, step_index: int, exc: Exception):
        trace.status = TraceStatus.FAILED
        trace.error = str(exc)
        self.ledger.set_status(trace.question_id, TraceStatus.FAILED.value)
        logger.warning("trace %s failed at step %d: %s", trace.question_id, step_index, exc)
        self.log.emit(TRACE_COMPLETED, step_index=step_index, trace_id=trace.question_id,
                      params={"status": TraceStatus.FAILED.value, "error": str(exc)})

    def _record(self, trace: Trace, model: ModelChoice, step_index: int, out, refined: bool):
        """Turn one generator output into a step; returns it, or ``None`` for an
        empty end-of-sequence reply."""
        self.ledger.add_tokens(trace.question_id, model.value, len(out.tokens), out.prompt_tokens)
        text, _, hit_eos = segment_step(out.text, out.eos)
        if not out.tokens:
            if out.eos:
                return None
            raise GeneratorError("generator returned an empty step without end-of-sequence")
        conf = aggregate_step(out.tokens, self.config.metric, self.config.aggregation)
        step = StepRecord(
            index=step_index, text=text, model=model, confidence=conf,
            token_count=len(out.tokens), refined=refined, eos=hit_eos, tokens=tuple(out.tokens),
        )
        self.log.emit(STEP_GENERATED, step_index=step_index, trace_id=trace.question_id,
                      model=model, phi=conf.value,
                      params={"refined": refined, "eos": hit_eos, "token_count": len(out.tokens)})
        return step

    def _barrier(self, assignments: List[Tuple[Trace, ModelChoice]], step_index: int, refine: bool):
        jobs = [(t, m, step_index) for t, m in assignments]
        for (trace, model, _), (out, err) in zip(jobs, self._generate(jobs)):
            if err is None:
                try:
                    step = self._record(trace, model, step_index, out, refine)
                except (GeneratorError, ValueError) as exc:
                    err = exc
            if err is not None:
                self._fail(trace, step_index, err)
                continue
            trace.current_model = model
            if step is None:
                if refine:
                    # large model had nothing to add; the small step stands
                    trace.steps[-1] = replace(trace.steps[-1], eos=True)
                continue
            if refine:
                trace.steps[0] = step
            else:
                trace.steps.append(step)

    def _update_status(self, step_index: int):
        for t in self.traces:
            if not t.ongoing:
                continue
            if t.steps and t.steps[-1].eos:
                t.status = TraceStatus.COMPLETE_EOS
            elif len(t.steps) >= self.config.max_steps:
                t.status = TraceStatus.COMPLETE_MAX_STEPS
            else:
                continue
            self.ledger.set_status(t.question_id, t.status.value)
            self.log.emit(TRACE_COMPLETED, step_index=step_index, trace_id=t.question_id,
                          params={"status": t.status.value, "n_steps": len(t.steps)})

    def execute(self) -> List[Trace]:
        kind = self.policy.kind
        first = ModelChoice.LARGE if kind is PolicyKind.ALWAYS_LARGE else ModelChoice.SMALL
        self._barrier([(t, first) for t in self.traces], 0, refine=False)

        if kind in (PolicyKind.POSTERIOR_THRESHOLD, PolicyKind.PERCENTILE):
            pool = [t for t in self.traces if t.ongoing]
            if pool:
                decisions = self.router.route(pool, target_step=0)
                refine = [(t, ModelChoice.LARGE) for t in pool
                          if decisions[t.question_id] is ModelChoice.LARGE]
                self._barrier(refine, 0, refine=True)
        self._update_status(0)

        for i in range(1, self.config.max_steps):
            ongoing = [t for t in self.traces if t.ongoing]
            if not ongoing:
                break
            decisions = self.router.route(ongoing, target_step=i)
            self._barrier([(t, decisions[t.question_id]) for t in ongoing], i, refine=False)
            self._update_status(i)
        return self.traces


def _new_ledger(small: Generator, large: Generator) -> CostLedger:
    return CostLedger(
        param_counts={"small": small.spec.param_count, "large": large.spec.param_count},
        model_names={"small": small.spec.name, "large": large.spec.name},
    )


def run_routed(
    questions: Sequence[Tuple[str, str]],
    small: Generator,
    large: Generator,
    config: EngineConfig,
    policy: RoutingPolicy,
    log: Optional[EventLog] = None,
) -> Tuple[List[Trace], CostLedger]:
    """Run any routing policy over ``questions``, split into ``config.group_count``
    independently routed groups. Traces come back in input order."""
    questions = [(str(q), p) for q, p in questions]
    if not questions:
        raise ValueError("questions must be non-empty")
    ids = [q for q, _ in questions]
    if len(set(ids)) != len(ids):
        raise ValueError("question ids must be unique")
    log = log if log is not None else EventLog()

    ledger = _new_ledger(small, large)
    by_id: Dict[str, Trace] = {}
    for g, group in enumerate(group_split(questions, config.group_count, config.seed)):
        run = _Run(group, small, large, config, policy, log, ledger, g)
        for t in run.execute():
            by_id[t.question_id] = t
    traces = [by_id[q] for q in ids]
    with_steps = [t for t in traces if t.steps]
    if with_steps:
        ledger.large_usage_by_relative_step = usage_profile(with_steps)
    return traces, ledger


def run_steer(
    questions: Sequence[Tuple[str, str]],
    small: Generator,
    large: Generator,
    config: EngineConfig,
    log: Optional[EventLog] = None,
) -> Tuple[List[Trace], CostLedger]:
    """Posterior-threshold routing with threshold ``config.gamma``."""
    return run_routed(questions, small, large, config, RoutingPolicy.steer(config.gamma), log)
