"""Run configuration: a YAML file of flat dotted keys.

Example::

    mode: steer
    scenario_path: scenario.json
    output_dir: out
    engine.gamma: 0.5
    generators.small.param_count: 4000000000
    generators.large.param_count: 12000000000

Nested mappings are accepted too and flattened to the same dotted keys.
Unknown keys are errors.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

import yaml

from .confidence import Aggregation, Metric
from .engine import DEFAULT_MAX_STEPS, EngineConfig, Pooling
from .generators.base import STEP_SEPARATOR, Backend, GeneratorSpec
from .mixture import EmConfig


class ConfigError(ValueError):
    def __init__(self, key: Optional[str], message: str):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class Mode(str, enum.Enum):
    STEER = "steer"
    ALWAYS_SMALL = "always_small"
    ALWAYS_LARGE = "always_large"
    PERCENTILE = "percentile"
    SWEEP = "sweep"


_REQUIRED = object()
DEFAULT_SWEEP_GRID = [round(0.1 * i, 1) for i in range(11)]


def _enum(cls):
    values = [m.value for m in cls]

    def check(key, v):
        if v not in values:
            raise ConfigError(key, f"must be one of {values}, got {v!r}")
        return v
    return check


def _number(lo=None, hi=None, integer=False, positive=False):
    def check(key, v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(key, f"must be a number, got {v!r}")
        if integer:
            if isinstance(v, float) and not v.is_integer():
                raise ConfigError(key, f"must be an integer, got {v!r}")
            v = int(v)
        else:
            v = float(v)
        if positive and not v > 0:
            raise ConfigError(key, f"must be positive, got {v}")
        if lo is not None and v < lo or hi is not None and v > hi:
            raise ConfigError(key, f"must lie in [{lo}, {hi}], got {v}")
        return v
    return check


def _string(key, v):
    if not isinstance(v, str):
        raise ConfigError(key, f"must be a string, got {v!r}")
    return v


def _optional_string(key, v):
    return None if v is None else _string(key, v)


def _bool(key, v):
    if not isinstance(v, bool):
        raise ConfigError(key, f"must be true or false, got {v!r}")
    return v


def _grid(key, v):
    if not isinstance(v, list) or not v:
        raise ConfigError(key, "must be a non-empty list of thresholds")
    return [_number(0.0, 1.0)(key, g) for g in v]


def _generator_keys(role: str) -> Dict[str, Tuple[Any, Callable]]:
    p = f"generators.{role}."
    return {
        p + "name": (role, _string),
        p + "param_count": (_REQUIRED, _number(integer=True, positive=True)),
        p + "backend": (Backend.SCRIPTED.value, _enum(Backend)),
        p + "endpoint": (None, _optional_string),
        # None means "inherit engine.temperature"
        p + "temperature": (None, lambda k, v: None if v is None else _number(lo=0.0)(k, v)),
        p + "stop_sequence": (STEP_SEPARATOR, _string),
        p + "max_tokens_per_step": (256, _number(integer=True, positive=True)),
    }


_em = EmConfig()
KEYS: Dict[str, Tuple[Any, Callable]] = {
    "mode": (Mode.STEER.value, _enum(Mode)),
    "scenario_path": (None, _optional_string),
    "questions_path": (None, _optional_string),
    "output_dir": ("steer-out", _string),
    "percentile_p": (50.0, _number(0.0, 100.0)),
    "sweep_grid": (DEFAULT_SWEEP_GRID, _grid),
    "engine.max_steps": (DEFAULT_MAX_STEPS, _number(integer=True, positive=True)),
    "engine.gamma": (0.5, _number(0.0, 1.0)),
    "engine.aggregation": (Aggregation.ALL_TOKENS_MEAN.value, _enum(Aggregation)),
    "engine.metric": (Metric.MAX_LOGIT.value, _enum(Metric)),
    "engine.group_count": (1, _number(integer=True, positive=True)),
    "engine.temperature": (0.7, _number(lo=0.0)),
    "engine.seed": (0, _number(integer=True)),
    "engine.pooling": (Pooling.POOLED.value, _enum(Pooling)),
    "engine.warm_start": (False, _bool),
    "engine.concurrency": (1, _number(integer=True, positive=True)),
    "engine.em.max_iterations": (_em.max_iterations, _number(integer=True, positive=True)),
    "engine.em.loglik_tolerance": (_em.loglik_tolerance, _number(positive=True)),
    "engine.em.variance_floor": (_em.variance_floor, _number(positive=True)),
    "engine.em.min_samples": (_em.min_samples, _number(integer=True, positive=True)),
    "engine.em.seed": (_em.seed, _number(integer=True)),
    **_generator_keys("small"),
    **_generator_keys("large"),
}


@dataclass
class RunConfig:
    mode: Mode
    engine: EngineConfig
    small: GeneratorSpec
    large: GeneratorSpec
    scenario_path: Optional[Path]
    questions_path: Optional[Path]
    output_dir: Path
    percentile_p: float = 50.0
    sweep_grid: List[float] = field(default_factory=lambda: list(DEFAULT_SWEEP_GRID))
    resolved: Dict[str, Any] = field(default_factory=dict)
    diagnostics: List[str] = field(default_factory=list)


def flatten(tree: Mapping, prefix: str = "") -> Dict[str, Any]:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def resolve(raw: Mapping[str, Any], overrides: Optional[Mapping[str, Any]] = None,
            base_dir: Optional[Path] = None) -> RunConfig:
    """Validate flat keys, apply defaults and overrides, and build a :class:`RunConfig`."""
    flat = flatten(raw)
    unknown = sorted(k for k in flat if k not in KEYS)
    if unknown:
        raise ConfigError(unknown[0], "unknown configuration key"
                          + (f" (also unknown: {', '.join(unknown[1:])})" if unknown[1:] else ""))

    diagnostics = []
    values: Dict[str, Any] = {}
    for key, (default, check) in KEYS.items():
        if key in flat:
            values[key] = check(key, flat[key])
        elif default is _REQUIRED:
            raise ConfigError(key, "is required")
        else:
            values[key] = default
            diagnostics.append(f"default applied: {key} = {default!r}")

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in KEYS:
            raise ConfigError(key, "unknown override key")
        new = KEYS[key][1](key, value)
        diagnostics.append(f"override: {key} = {new!r} (file/default value {values[key]!r})")
        values[key] = new

    for role in ("small", "large"):
        tk = f"generators.{role}.temperature"
        if values[tk] is None:
            values[tk] = values["engine.temperature"]
            diagnostics.append(f"default applied: {tk} = {values[tk]!r} (from engine.temperature)")

    if (values["scenario_path"] is None) == (values["questions_path"] is None):
        raise ConfigError("scenario_path", "exactly one of scenario_path / questions_path must be set")
    for role in ("small", "large"):
        backend = values[f"generators.{role}.backend"]
        if values["scenario_path"] is not None and backend != Backend.SCRIPTED.value:
            raise ConfigError(f"generators.{role}.backend", "scenario_path runs need scripted generators")
        if values["questions_path"] is not None and backend != Backend.HTTP.value:
            raise ConfigError(f"generators.{role}.backend", "questions_path runs need http generators")
        has_endpoint = values[f"generators.{role}.endpoint"] is not None
        if has_endpoint != (backend == Backend.HTTP.value):
            raise ConfigError(f"generators.{role}.endpoint", "must be set iff backend is http")

    try:
        em = EmConfig(
            max_iterations=values["engine.em.max_iterations"],
            loglik_tolerance=values["engine.em.loglik_tolerance"],
            variance_floor=values["engine.em.variance_floor"],
            min_samples=values["engine.em.min_samples"],
            seed=values["engine.em.seed"],
        )
        engine = EngineConfig(
            max_steps=values["engine.max_steps"],
            gamma=values["engine.gamma"],
            aggregation=values["engine.aggregation"],
            metric=values["engine.metric"],
            group_count=values["engine.group_count"],
            temperature=values["engine.temperature"],
            em=em,
            seed=values["engine.seed"],
            pooling=values["engine.pooling"],
            warm_start=values["engine.warm_start"],
            concurrency=values["engine.concurrency"],
        )
        specs = {
            role: GeneratorSpec(**{
                f: values[f"generators.{role}.{f}"]
                for f in ("name", "param_count", "backend", "endpoint", "temperature",
                          "stop_sequence", "max_tokens_per_step")
            })
            for role in ("small", "large")
        }
    except ValueError as exc:
        raise ConfigError(None, str(exc)) from exc

    def path(key):
        v = values[key]
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() or base_dir is None else base_dir / p

    return RunConfig(
        mode=Mode(values["mode"]),
        engine=engine,
        small=specs["small"],
        large=specs["large"],
        scenario_path=path("scenario_path"),
        questions_path=path("questions_path"),
        output_dir=Path(values["output_dir"]),
        percentile_p=values["percentile_p"],
        sweep_grid=values["sweep_grid"],
        resolved=dict(sorted(values.items())),
        diagnostics=diagnostics,
    )


def validate_config(path, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Load and resolve a config file; raises :class:`ConfigError` naming the bad key."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(None, f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(None, f"{path} is not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError(None, f"{path} must contain a mapping of keys")
    cfg = resolve(raw, overrides, base_dir=path.parent)
    for key in ("scenario_path", "questions_path"):
        p = getattr(cfg, key)
        if p is not None and not p.exists():
            raise ConfigError(key, f"file not found: {p}")
    return cfg
