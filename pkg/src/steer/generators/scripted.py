"""Deterministic offline generator that replays per-question scripts.

A scenario holds, for every question, one script per model role
(``small`` and ``large``). Step ``i`` of a role's script is what that model
emits when asked for step ``i`` of the question, whatever the prompt says.
Each step carries a ground-truth ``label``: ``"unconfident"`` steps are the
ones the small model cannot be trusted with, which is what
:meth:`ScriptedScenario.grade` checks against.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..confidence import TokenObservation, token_confidence
from .base import STEP_SEPARATOR, GeneratorError, GeneratorSpec, StepOutput, Generator

SCHEMA_VERSION = 1
CONFIDENT = "confident"
UNCONFIDENT = "unconfident"
ROLES = ("small", "large")


class ScriptExhaustedError(GeneratorError):
    pass


@dataclass(frozen=True)
class ScriptStep:
    text: str
    # each token is (text, max_logit scalar) or (text, full logit vector)
    tokens: Tuple[Tuple[str, Union[float, Tuple[float, ...]]], ...]
    eos: bool = False
    label: str = CONFIDENT
    fail: bool = False

    def __post_init__(self):
        if STEP_SEPARATOR in self.text:
            raise ValueError("scripted step text must not contain the step separator")
        if self.label not in (CONFIDENT, UNCONFIDENT):
            raise ValueError(f"unknown step label {self.label!r}")
        if not self.fail and len(self.tokens) == 0:
            raise ValueError("a scripted step needs at least one token")

    def to_dict(self) -> dict:
        toks = []
        for text, value in self.tokens:
            if isinstance(value, tuple):
                toks.append({"text": text, "logits": list(value)})
            else:
                toks.append({"text": text, "max_logit": value})
        d = {"text": self.text, "tokens": toks, "eos": self.eos, "label": self.label}
        if self.fail:
            d["fail"] = True
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScriptStep":
        toks = []
        for t in d["tokens"]:
            if "logits" in t:
                toks.append((t["text"], tuple(float(v) for v in t["logits"])))
            else:
                toks.append((t["text"], float(t["max_logit"])))
        return cls(
            text=d["text"], tokens=tuple(toks), eos=bool(d.get("eos", False)),
            label=d.get("label", CONFIDENT), fail=bool(d.get("fail", False)),
        )


@dataclass
class ScriptedQuestion:
    id: str
    prompt: str
    scripts: Dict[str, List[ScriptStep]]
    difficulty: float = 0.0
    difficulty_profile: List[float] = field(default_factory=list)
    gold_answer: str = ""

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "prompt": self.prompt,
            "difficulty": self.difficulty,
            "difficulty_profile": list(self.difficulty_profile),
            "gold_answer": self.gold_answer,
            "scripts": {role: [s.to_dict() for s in steps] for role, steps in self.scripts.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScriptedQuestion":
        return cls(
            id=str(d["id"]),
            prompt=d["prompt"],
            difficulty=float(d.get("difficulty", 0.0)),
            difficulty_profile=[float(v) for v in d.get("difficulty_profile", [])],
            gold_answer=str(d.get("gold_answer", "")),
            scripts={role: [ScriptStep.from_dict(s) for s in steps]
                     for role, steps in d["scripts"].items()},
        )


@dataclass
class ScriptedScenario:
    questions: List[ScriptedQuestion]
    seed: int = 0
    # scalar max-logit tokens are read against this many zero background logits
    background_vocab: int = 15
    mixture_spec: Optional[Tuple[float, float, float, float]] = None
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        ids = [q.id for q in self.questions]
        if len(set(ids)) != len(ids):
            raise ValueError("question ids must be unique")
        self._by_id = {q.id: q for q in self.questions}

    def question(self, question_id: str) -> ScriptedQuestion:
        try:
            return self._by_id[question_id]
        except KeyError:
            raise KeyError(f"unknown question id {question_id!r}") from None

    def question_pairs(self) -> List[Tuple[str, str]]:
        return [(q.id, q.prompt) for q in self.questions]

    def labels(self, question_id: str, role: str = "small") -> List[str]:
        return [s.label for s in self.question(question_id).scripts[role]]

    def grade(self, question_id: str, step_models: Sequence[str]) -> bool:
        """A trace is correct iff every step the small model is unconfident
        on was produced by the large model."""
        labels = self.labels(question_id, "small")
        for i, model in enumerate(step_models):
            if labels[i] == UNCONFIDENT and model != "large":
                return False
        return True

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "background_vocab": self.background_vocab,
            "mixture_spec": list(self.mixture_spec) if self.mixture_spec else None,
            "questions": [q.to_dict() for q in self.questions],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScriptedScenario":
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported scenario schema_version {version!r}")
        spec = d.get("mixture_spec")
        return cls(
            questions=[ScriptedQuestion.from_dict(q) for q in d["questions"]],
            seed=int(d.get("seed", 0)),
            background_vocab=int(d.get("background_vocab", 15)),
            mixture_spec=tuple(spec) if spec else None,
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ScriptedScenario":
        return cls.from_dict(json.loads(Path(path).read_text()))


class ScriptedGenerator(Generator):
    def __init__(self, scenario: ScriptedScenario, role: str, spec: GeneratorSpec):
        if role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {role!r}")
        self.scenario = scenario
        self.role = role
        self.spec = spec
        self._cache: Dict[Tuple[str, int], List[TokenObservation]] = {}
        self._lock = threading.Lock()

    def _observe(self, step: ScriptStep) -> List[TokenObservation]:
        out = []
        background = np.zeros(self.scenario.background_vocab)
        for text, value in step.tokens:
            if isinstance(value, tuple):
                out.append(token_confidence(value, text=text))
            else:
                out.append(token_confidence(np.concatenate(([value], background)), text=text))
        return out

    def generate_step(self, prompt: str, question_id: str, step_index: int) -> StepOutput:
        if not prompt:
            raise GeneratorError("prompt must be non-empty")
        question = self.scenario.question(question_id)
        script = question.scripts.get(self.role, [])
        if step_index >= len(script):
            raise ScriptExhaustedError(
                f"{self.role} script for {question_id!r} has no step {step_index}"
            )
        step = script[step_index]
        if step.fail:
            raise GeneratorError(f"scripted failure at {question_id!r} step {step_index}")

        key = (question_id, step_index)
        with self._lock:
            tokens = self._cache.get(key)
        if tokens is None:
            tokens = self._observe(step)
            with self._lock:
                self._cache[key] = tokens
        return StepOutput(
            text=step.text,
            tokens=list(tokens),
            eos=step.eos,
            prompt_tokens=len(prompt.split()),
            hit_separator=not step.eos,
        )


_WORDS = ("so", "then", "we", "have", "the", "value", "of", "thus", "let", "it", "follows",
          "that", "and", "hence", "check", "gives")
_MATH = ("x", "=", "2", "+", "3y", "(a+b)", "\\frac", "12", "^2", "<", "7", "-", "n!", "|z|")


def _step_tokens(rng: np.random.Generator, center: float, n_tokens: int, token_noise: float,
                 logit_vector_size: Optional[int]):
    texts = [
        str(rng.choice(_MATH)) if rng.random() < 0.4 else str(rng.choice(_WORDS))
        for _ in range(n_tokens)
    ]
    values = center + rng.normal(0.0, token_noise, size=n_tokens)
    tokens = []
    for text, v in zip(texts, values):
        v = float(v)
        if logit_vector_size:
            rest = v - 0.5 - np.abs(rng.normal(0.0, 2.0, size=logit_vector_size - 1))
            tokens.append((text, (v,) + tuple(float(r) for r in rest)))
        else:
            tokens.append((text, v))
    return texts, tuple(tokens)


def synth_scenario(
    difficulty_profiles: Sequence[Sequence[float]],
    mixture_spec: Tuple[float, float, float, float] = (2.0, 8.0, 1.0, 1.0),
    seed: int = 0,
    *,
    tokens_per_step: Tuple[int, int] = (6, 18),
    token_noise: float = 0.25,
    logit_vector_size: Optional[int] = None,
) -> ScriptedScenario:
    """Build a scenario with bimodal step confidences.

    ``difficulty_profiles[q][i]`` is the probability that step ``i`` of
    question ``q`` is an unconfident step. ``mixture_spec`` is
    ``(mean_u, mean_c, sd_u, sd_c)`` for the step-level confidence centres.
    Both roles share each step's label; the large script draws its own
    tokens and confidences from the same component.
    """
    mean_u, mean_c, sd_u, sd_c = (float(v) for v in mixture_spec)
    if not mean_u < mean_c:
        raise ValueError("the unconfident mean must be below the confident mean")
    if not (sd_u > 0 and sd_c > 0):
        raise ValueError("component standard deviations must be positive")
    lo, hi = tokens_per_step
    if not 1 <= lo <= hi:
        raise ValueError("tokens_per_step must satisfy 1 <= low <= high")

    rng = np.random.default_rng(seed)
    questions = []
    for q, profile in enumerate(difficulty_profiles):
        profile = [float(d) for d in profile]
        if not profile:
            raise ValueError(f"difficulty profile {q} is empty")
        if any(not 0.0 <= d <= 1.0 for d in profile):
            raise ValueError(f"difficulty profile {q} has values outside [0, 1]")
        qid = f"q{q:04d}"
        gold = str(int(rng.integers(0, 1000)))
        labels = [UNCONFIDENT if rng.random() < d else CONFIDENT for d in profile]
        scripts = {}
        for role in ROLES:
            steps = []
            for i, label in enumerate(labels):
                mean, sd = (mean_u, sd_u) if label == UNCONFIDENT else (mean_c, sd_c)
                center = float(rng.normal(mean, sd))
                n_tokens = int(rng.integers(lo, hi + 1))
                texts, tokens = _step_tokens(rng, center, n_tokens, token_noise, logit_vector_size)
                last = i == len(labels) - 1
                text = " ".join(texts)
                if last:
                    answer = gold if role == "large" or UNCONFIDENT not in labels else "?"
                    text += f" answer: {answer}"
                steps.append(ScriptStep(text=text, tokens=tokens, eos=last, label=label))
            scripts[role] = steps
        questions.append(ScriptedQuestion(
            id=qid,
            prompt=f"Question {qid}: solve the problem step by step.",
            scripts=scripts,
            difficulty=float(np.mean(profile)),
            difficulty_profile=profile,
            gold_answer=gold,
        ))
    return ScriptedScenario(
        questions=questions, seed=seed, mixture_spec=(mean_u, mean_c, sd_u, sd_c)
    )


def make_difficulty_profiles(
    n_questions: int,
    steps: Tuple[int, int] = (3, 8),
    hard_fraction: float = 0.3,
    medium_fraction: float = 0.0,
    seed: int = 0,
) -> List[List[float]]:
    """Per-question step difficulties: easy questions are all 0, hard ones all 1
    and medium ones a constant 0.5."""
    if not 0.0 <= hard_fraction + medium_fraction <= 1.0:
        raise ValueError("hard_fraction + medium_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_questions):
        n = int(rng.integers(steps[0], steps[1] + 1))
        u = rng.random()
        level = 1.0 if u < hard_fraction else 0.5 if u < hard_fraction + medium_fraction else 0.0
        out.append([level] * n)
    return out
