"""Acceptance criteria, one test per criterion (criterion 5 has three parts).

Each test tags itself with ``record_property("criterion", ...)``; the
terminal summary prints a PASS/FAIL line for each of them.
"""

import json
import math
import time
from fractions import Fraction

import mpmath
import numpy as np
import pytest
import yaml

from steer.cli import EXIT_OK, main
from steer.confidence import TokenSource
from steer.cost import CostLedger, accuracy_per_flops, flops_for
from steer.engine import EngineConfig, TraceStatus, run_routed
from steer.events import EventLog
from steer.generators import GeneratorSpec, HttpGenerator
from steer.mixture import EmConfig, MixtureParams, posterior_confident, run_em
from steer.routing import PolicyKind, RoutingPolicy

from conftest import generators_for, hand_scenario
from replay_audit import audit, nearest_rank_cutoff

pytestmark = pytest.mark.acceptance

mpmath.mp.dps = 60


def _run(scenario, policy, log=None, **cfg):
    small, large = generators_for(scenario)
    return run_routed(scenario.question_pairs(), small, large, EngineConfig(**cfg), policy, log)


def test_c01_em_recovery(record_property):
    record_property("criterion", "1 EM recovery (2000 samples, means/weights/variances, monotone, <1s)")
    rng = np.random.default_rng(2024)
    comp = rng.random(2000) < 0.5
    x = np.where(comp, rng.normal(0.0, 1.0, 2000), rng.normal(10.0, 1.0, 2000))

    start = time.perf_counter()
    params, history, _, converged = run_em(x, EmConfig())
    elapsed = time.perf_counter() - start

    assert converged
    assert abs(params.mean_u - 0.0) <= 0.3 and abs(params.mean_c - 10.0) <= 0.3
    assert abs(params.weight_u - 0.5) <= 0.05 and abs(params.weight_c - 0.5) <= 0.05
    assert abs(params.var_u - 1.0) <= 0.3 and abs(params.var_c - 1.0) <= 0.3
    assert all(b >= a for a, b in zip(history, history[1:])), "log-likelihood decreased"
    assert elapsed < 1.0


def _mp_posterior(phi, p):
    phi = mpmath.mpf(phi)

    def dens(w, mu, var):
        var = mpmath.mpf(var)
        return mpmath.mpf(w) * mpmath.exp(-(phi - mpmath.mpf(mu)) ** 2 / (2 * var)) \
            / mpmath.sqrt(2 * mpmath.pi * var)

    c = dens(p.weight_c, p.mean_c, p.var_c)
    u = dens(p.weight_u, p.mean_u, p.var_u)
    return c / (c + u)


def test_c02_posterior_high_precision(record_property):
    record_property("criterion", "2 posterior vs 60-digit evaluation within 1e-10 (1000 draws, to 40 sigma)")
    rng = np.random.default_rng(7)
    worst = 0.0
    far = 0
    for _ in range(1000):
        w = float(rng.uniform(0.02, 0.98))
        mu = np.sort(rng.uniform(-20.0, 20.0, 2))
        var = rng.uniform(0.05, 25.0, 2)
        p = MixtureParams(weight_c=w, weight_u=1 - w, mean_c=float(mu[1]), mean_u=float(mu[0]),
                          var_c=float(var[1]), var_u=float(var[0]))
        k = int(rng.integers(0, 2))
        z = float(rng.uniform(-40.0, 40.0))
        phi = float(mu[k] + z * math.sqrt(var[k]))
        far += abs(z) > 30
        got = posterior_confident(phi, p)
        err = abs(got - float(_mp_posterior(phi, p)))
        worst = max(worst, err)
    print(f"max abs error {worst:.3e}; {far} draws beyond 30 sigma")
    assert far > 0
    assert worst <= 1e-10


def test_c03_routing_audit_replay(record_property, synthetic_60, tmp_path):
    record_property("criterion", "3 routing audit replay from the event log, zero discrepancies")
    runs = [
        (synthetic_60, RoutingPolicy.steer(0.5), {}),
        (synthetic_60, RoutingPolicy.steer(0.9), {"group_count": 3}),
        (synthetic_60, RoutingPolicy.steer(0.3), {"pooling": "per_model", "warm_start": True}),
        (synthetic_60, RoutingPolicy.percentile(40), {}),
        (hand_scenario([8.0, 7.5, 1.0, 8.5, 7.9, 0.5], n_steps=5,
                       fail_at={(1, "small", 2), (1, "large", 2)}), RoutingPolicy.steer(0.5), {}),
    ]
    total_routes = 0
    for i, (scenario, policy, cfg) in enumerate(runs):
        log = EventLog()
        traces, _ = _run(scenario, policy, log, **cfg)
        path = tmp_path / f"events_{i}.jsonl"
        log.write(path)
        events = [json.loads(line) for line in path.read_text().splitlines()]
        total_routes += sum(e["event"] == "route_decided" for e in events)
        problems = audit(events, traces)
        assert problems == [], problems[:10]
    assert total_routes > 500


def test_c04_algorithm_conformance(record_property, six_question_scenario):
    record_property("criterion", "4 six-question scenario: exactly the 2 low traces refined; gamma=0 == always_small")
    log = EventLog()
    traces, _ = _run(six_question_scenario, RoutingPolicy.steer(0.5), log)
    refined = {t.question_id for t in traces if t.steps[0].refined}
    assert refined == {"q2", "q5"}
    for t in traces:
        assert (t.steps[0].model.value == "large") == (t.question_id in refined)
    assert audit(log.records, traces) == []

    zero, _ = _run(six_question_scenario, RoutingPolicy.steer(0.0))
    small, _ = _run(six_question_scenario, RoutingPolicy(PolicyKind.ALWAYS_SMALL))
    after0 = lambda ts: json.dumps([[s.to_dict() for s in t.steps[1:]] for t in ts]).encode()
    assert after0(zero) == after0(small)
    assert json.dumps([t.to_dict() for t in zero]) == json.dumps([t.to_dict() for t in small])


def test_c05a_flops_exact(record_property):
    record_property("criterion", "5a FLOPs equal 2*N*tokens/1e12 exactly")
    rng = np.random.default_rng(5)
    for _ in range(2000):
        n = int(rng.integers(1, 10**12))
        tokens = int(rng.integers(0, 10**7))
        assert flops_for(n, tokens) == float(Fraction(2 * n * tokens, 10**12))
    led = CostLedger({"small": 4_000_000_000, "large": 12_000_000_000})
    led.add_tokens("a", "small", 1234)
    led.add_tokens("a", "large", 567)
    assert led.flops("small") == float(Fraction(2 * 4_000_000_000 * 1234, 10**12))
    assert led.flops("large") == float(Fraction(2 * 12_000_000_000 * 567, 10**12))


def test_c05b_af_reference_9_05(record_property):
    record_property("criterion", "5b A/F(73.4, 8.12) = 9.05 +/- 0.01")
    value = accuracy_per_flops(73.4, 8.12)
    print(f"A/F(73.4, 8.12) = {value:.6f}")
    assert abs(value - 9.05) <= 0.01


def test_c05c_af_reference_1_87(record_property):
    record_property("criterion", "5c A/F(44.9, 24.0) = 1.87 +/- 0.01")
    value = accuracy_per_flops(44.9, 24.0)
    print(f"A/F(44.9, 24.0) = {value:.6f}")
    assert abs(value - 1.87) <= 0.01


def test_c06_percentile_harness(record_property, synthetic_200):
    record_property("criterion", "6 percentile routing: per-step large-set = nearest-rank count, monotone in p")
    shares = []
    for p in range(10, 100, 10):
        log = EventLog()
        _, ledger = _run(synthetic_200, RoutingPolicy.percentile(p), log)
        by_step = {}
        for e in log.of_type("route_decided"):
            by_step.setdefault(e["step_index"], []).append(e)
        for step, batch in by_step.items():
            phis = [e["phi"] for e in batch]
            cutoff = nearest_rank_cutoff(phis, p)
            expected = sum(v < cutoff for v in phis)
            if len(set(phis)) == len(phis):
                assert expected == min(math.ceil(Fraction(p * len(phis), 100)), len(phis) - 1)
            got = sum(e["model"] == "large" for e in batch)
            assert got == expected, f"p={p} step={step}: {got} != {expected}"
        shares.append(ledger.large_step_share())
    print("large step share by p:", [round(s, 3) for s in shares])
    assert all(b >= a for a, b in zip(shares, shares[1:]))


def test_c07_group_size_robustness(record_property, synthetic_200):
    record_property("criterion", "7 K-split robustness: large usage K=1 vs K=10 < 5pp, FLOPs within 10%")
    stats = {}
    for k in (1, 2, 5, 10):
        _, ledger = _run(synthetic_200, RoutingPolicy.steer(0.5), group_count=k, seed=3)
        stats[k] = (ledger.large_step_share(), ledger.total_flops())
    print({k: (round(100 * u, 2), round(f, 3)) for k, (u, f) in stats.items()})
    (u1, f1), (u10, f10) = stats[1], stats[10]
    assert abs(u1 - u10) * 100 < 5.0
    assert abs(f10 - f1) / f1 <= 0.10


def test_c08_sweep_frontier(record_property, synthetic_200, tmp_path):
    record_property("criterion", "8 gamma sweep frontier: endpoints match baselines, >=95% acc at <=70% FLOPs, <30s")
    synthetic_200.save(tmp_path / "scenario.json")
    cfg = {
        "mode": "sweep",
        "scenario_path": "scenario.json",
        "output_dir": str(tmp_path / "out"),
        "sweep_grid": [round(0.1 * i, 1) for i in range(11)],
        "generators.small.param_count": 4_000_000_000,
        "generators.large.param_count": 12_000_000_000,
    }
    (tmp_path / "run.yaml").write_text(yaml.safe_dump(cfg))
    start = time.perf_counter()
    assert main(["--config", str(tmp_path / "run.yaml")]) == EXIT_OK
    elapsed = time.perf_counter() - start
    frontier = json.loads((tmp_path / "out" / "frontier.json").read_text())
    rows = {r["gamma"]: r for r in frontier["rows"]}
    small, large = frontier["baselines"]["always_small"], frontier["baselines"]["always_large"]
    print(f"sweep took {elapsed:.2f}s; always_small {small['accuracy']:.1f}%, "
          f"always_large {large['accuracy']:.1f}% at {large['avg_flops']:.3f}")
    assert rows[0.0]["accuracy"] == small["accuracy"]
    assert rows[1.0]["accuracy"] == large["accuracy"]
    good = [g for g, r in rows.items() if 0 < g < 1
            and r["accuracy"] >= 0.95 * large["accuracy"]
            and r["avg_flops"] <= 0.70 * large["avg_flops"]]
    print("gammas on the target frontier:", good)
    assert good
    assert elapsed < 30.0


def test_c09_determinism(record_property, synthetic_60, tmp_path):
    record_property("criterion", "9 identical config/seed/scenario give identical logs and ledgers")
    outputs = []
    for _ in range(2):
        log = EventLog()
        traces, ledger = _run(synthetic_60, RoutingPolicy.steer(0.5), log,
                              group_count=3, seed=9, concurrency=4)
        outputs.append((log.to_jsonl(include_timestamp=False).encode(),
                        json.dumps(ledger.to_dict(), sort_keys=True).encode(),
                        json.dumps([t.to_dict() for t in traces], sort_keys=True).encode()))
    assert outputs[0] == outputs[1]

    synthetic_60.save(tmp_path / "scenario.json")
    cfg = {"scenario_path": "scenario.json", "engine.group_count": 2, "engine.seed": 4,
           "generators.small.param_count": 4_000_000_000,
           "generators.large.param_count": 12_000_000_000}
    dumps = []
    out = tmp_path / "out"
    (tmp_path / "run.yaml").write_text(yaml.safe_dump({**cfg, "output_dir": str(out)}))
    for _ in range(2):
        assert main(["--config", str(tmp_path / "run.yaml")]) == EXIT_OK
        events = [{**json.loads(line), "timestamp": None}
                  for line in (out / "events.jsonl").read_text().splitlines()]
        report = json.loads((out / "report.json").read_text())
        report.pop("generated_at")
        dumps.append((json.dumps(events), json.dumps(report, sort_keys=True),
                      (out / "traces.json").read_bytes()))
    assert dumps[0] == dumps[1]


def _http_pair(url):
    return (HttpGenerator(GeneratorSpec("stub-small", 1_000_000_000, backend="http", endpoint=url)),
            HttpGenerator(GeneratorSpec("stub-large", 8_000_000_000, backend="http", endpoint=url)))


def test_c10_http_backend_contract(record_property, stub_server):
    record_property("criterion", "10 HTTP stub: tokens tagged logprobs_proxy; missing logprobs fails per trace")
    questions = [(f"q{i}", f"Question {i}: compute.") for i in range(8)]

    url, _ = stub_server("ok")
    small, large = _http_pair(url)
    traces, ledger = run_routed(questions, small, large, EngineConfig(), RoutingPolicy.steer(0.5))
    assert all(t.status is TraceStatus.COMPLETE_EOS for t in traces)
    tokens = [tok for t in traces for s in t.steps for tok in s.tokens]
    assert tokens and all(tok.source is TokenSource.LOGPROBS_PROXY for tok in tokens)
    assert ledger.tokens("small") > 0

    url, _ = stub_server("no_logprobs")
    small, large = _http_pair(url)
    traces, ledger = run_routed(questions, small, large, EngineConfig(), RoutingPolicy.steer(0.5))
    for t in traces:
        assert t.status is TraceStatus.FAILED
        assert "logprobs" in t.error
        assert t.steps == []
    assert ledger.accuracy() == 0.0 or ledger.accuracy() is None
