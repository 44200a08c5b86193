"""Command-line driver: ``steer --config run.yaml`` and ``steer-synth``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from . import __version__
from .config import ConfigError, Mode, RunConfig, validate_config
from .cost import CostLedger, usage_profile
from .engine import Trace, run_routed
from .events import EventLog
from .generators import (
    GeneratorError,
    HttpGenerator,
    ScriptedGenerator,
    ScriptedScenario,
    make_difficulty_profiles,
    synth_scenario,
)
from .routing import PolicyKind, RoutingPolicy

logger = logging.getLogger("steer")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def load_questions(path) -> List[Tuple[str, str]]:
    """Read ``{"id": ..., "prompt": ...}`` records, one JSON object per line."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if "id" not in rec or "prompt" not in rec:
                raise ConfigError("questions_path", f"line {n} lacks 'id' or 'prompt'")
            out.append((str(rec["id"]), rec["prompt"]))
    if not out:
        raise ConfigError("questions_path", "no questions found")
    return out


def _policy_for(mode: Mode, config: RunConfig, gamma: Optional[float] = None) -> RoutingPolicy:
    if mode is Mode.ALWAYS_SMALL:
        return RoutingPolicy(PolicyKind.ALWAYS_SMALL)
    if mode is Mode.ALWAYS_LARGE:
        return RoutingPolicy(PolicyKind.ALWAYS_LARGE)
    if mode is Mode.PERCENTILE:
        return RoutingPolicy.percentile(config.percentile_p)
    return RoutingPolicy.steer(config.engine.gamma if gamma is None else gamma)


class Runner:
    """Builds generators once and executes routed runs against them."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.scenario: Optional[ScriptedScenario] = None
        if config.scenario_path is not None:
            self.scenario = ScriptedScenario.load(config.scenario_path)
            self.questions = self.scenario.question_pairs()
            self.small = ScriptedGenerator(self.scenario, "small", config.small)
            self.large = ScriptedGenerator(self.scenario, "large", config.large)
        else:
            self.questions = load_questions(config.questions_path)
            self.small = HttpGenerator(config.small)
            self.large = HttpGenerator(config.large)

    def check(self):
        self.small.check()
        self.large.check()

    def grade(self, traces: Sequence[Trace], ledger: CostLedger) -> None:
        if self.scenario is None:
            return
        labels = {}
        for t in traces:
            if t.status.value == "failed":
                continue
            ok = self.scenario.grade(t.question_id, [s.model.value for s in t.steps])
            ledger.mark_correct(t.question_id, ok)
            labels[t.question_id] = ok
        with_steps = [t for t in traces if t.steps]
        if with_steps:
            ledger.large_usage_by_relative_step = usage_profile(with_steps, labels)

    def execute(self, policy: RoutingPolicy, engine=None, log: Optional[EventLog] = None):
        engine = engine or self.config.engine
        traces, ledger = run_routed(self.questions, self.small, self.large, engine, policy, log)
        self.grade(traces, ledger)
        return traces, ledger


def _header(config: RunConfig, policy: Optional[RoutingPolicy]) -> dict:
    return {
        "code_version": __version__,
        "run_config": config.resolved,
        "policy": policy.to_dict() if policy else None,
    }


def summary_table(rows: Sequence[Tuple[str, dict]]) -> str:
    """Fixed-width comparison table: method, accuracy, FLOPs, A/F, large share."""
    def fmt(v, spec):
        return format(v, spec) if v is not None else "-"
    lines = [f"{'Method':<22}{'Acc':>8}{'FLOPs':>12}{'A/F':>10}{'Large%':>9}", "-" * 61]
    for name, s in rows:
        lines.append(
            f"{name:<22}{fmt(s['accuracy'], '.1f'):>8}{fmt(s['avg_flops'], '.4g'):>12}"
            f"{fmt(s['a_per_f'], '.3g'):>10}{fmt(100 * s['large_token_share'], '.1f'):>9}"
        )
    return "\n".join(lines) + "\n"


def write_artifacts(out_dir: Path, config: RunConfig, policy: RoutingPolicy, traces, ledger,
                    log: EventLog, label: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    header = _header(config, policy)
    log.write(out_dir / "events.jsonl")
    (out_dir / "traces.json").write_text(_dump({**header, "traces": [t.to_dict() for t in traces]}))
    report = {**header, "ledger": ledger.to_dict(), "generated_at": time.time()}
    (out_dir / "report.json").write_text(_dump(report))
    (out_dir / "summary.txt").write_text(
        f"code_version {__version__}  mode {config.mode.value}  "
        f"max_steps {config.engine.max_steps}\n" + summary_table([(label, ledger.summary())])
    )


def run(config: RunConfig, runner: Optional[Runner] = None) -> int:
    """Execute the configured mode and write artifacts to ``config.output_dir``."""
    runner = runner or Runner(config)
    if runner.scenario is None:
        try:
            runner.check()
        except GeneratorError as exc:
            logger.error("generator connectivity check failed: %s", exc)
            return EXIT_RUNTIME

    out = config.output_dir
    if config.mode is not Mode.SWEEP:
        policy = _policy_for(config.mode, config)
        log = EventLog()
        traces, ledger = runner.execute(policy, log=log)
        write_artifacts(out, config, policy, traces, ledger, log, config.mode.value)
        sys.stdout.write(summary_table([(config.mode.value, ledger.summary())]))
        return EXIT_OK

    rows = []
    table_rows = []
    for gamma in config.sweep_grid:
        policy = _policy_for(Mode.STEER, config, gamma)
        log = EventLog()
        engine = replace(config.engine, gamma=gamma)
        traces, ledger = runner.execute(policy, engine, log)
        write_artifacts(out / f"gamma_{gamma:.2f}", config, policy, traces, ledger, log,
                        f"steer gamma={gamma:.2f}")
        s = ledger.summary()
        rows.append({"gamma": gamma, "accuracy": s["accuracy"], "avg_flops": s["avg_flops"],
                     "a_per_f": s["a_per_f"], "large_token_share": s["large_token_share"]})
        table_rows.append((f"steer gamma={gamma:.2f}", s))

    baselines = {}
    for mode in (Mode.ALWAYS_SMALL, Mode.ALWAYS_LARGE):
        policy = _policy_for(mode, config)
        log = EventLog()
        traces, ledger = runner.execute(policy, log=log)
        write_artifacts(out / mode.value, config, policy, traces, ledger, log, mode.value)
        baselines[mode.value] = ledger.summary()
        table_rows.append((mode.value, baselines[mode.value]))

    out.mkdir(parents=True, exist_ok=True)
    frontier = {**_header(config, None), "rows": rows, "baselines": baselines}
    (out / "frontier.json").write_text(_dump(frontier))
    table = summary_table(table_rows)
    (out / "frontier.txt").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="steer", description=__doc__)
    p.add_argument("--config", required=True, type=Path, help="YAML run configuration")
    p.add_argument("--mode", choices=[m.value for m in Mode])
    p.add_argument("--gamma", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = {
        "mode": args.mode,
        "engine.gamma": args.gamma,
        "engine.seed": args.seed,
        "output_dir": args.output_dir,
    }
    try:
        config = validate_config(args.config, overrides)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    for line in config.diagnostics:
        logger.info(line)
    try:
        return run(config)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure maps to the runtime exit code
        logger.exception("run failed: %s", exc)
        return EXIT_RUNTIME


def synth_main(argv: Optional[Sequence[str]] = None) -> int:
    p = argparse.ArgumentParser(prog="steer-synth",
                                description="Write a synthetic scripted scenario file.")
    p.add_argument("output", type=Path)
    p.add_argument("--questions", type=int, default=200)
    p.add_argument("--min-steps", type=int, default=3)
    p.add_argument("--max-steps", type=int, default=8)
    p.add_argument("--hard-fraction", type=float, default=0.3)
    p.add_argument("--medium-fraction", type=float, default=0.0)
    p.add_argument("--mixture", type=float, nargs=4, default=(2.0, 8.0, 1.0, 1.0),
                   metavar=("MEAN_U", "MEAN_C", "SD_U", "SD_C"))
    p.add_argument("--logit-vector-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    profiles = make_difficulty_profiles(
        args.questions, (args.min_steps, args.max_steps),
        args.hard_fraction, args.medium_fraction, args.seed,
    )
    scenario = synth_scenario(profiles, tuple(args.mixture), args.seed + 1,
                              logit_vector_size=args.logit_vector_size)
    scenario.save(args.output)
    print(f"wrote {len(scenario.questions)} questions to {args.output}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
