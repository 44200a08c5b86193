import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from steer.generators import (
    GeneratorSpec,
    ScriptedGenerator,
    ScriptedQuestion,
    ScriptedScenario,
    ScriptStep,
    make_difficulty_profiles,
    synth_scenario,
)

SMALL_PARAMS = 4_000_000_000
LARGE_PARAMS = 12_000_000_000


def small_spec(**kw):
    return GeneratorSpec(name="small-4b", param_count=SMALL_PARAMS, **kw)


def large_spec(**kw):
    return GeneratorSpec(name="large-12b", param_count=LARGE_PARAMS, **kw)


def generators_for(scenario):
    return (ScriptedGenerator(scenario, "small", small_spec()),
            ScriptedGenerator(scenario, "large", large_spec()))


def flat_step(text, phis, eos=False, label="confident", fail=False):
    toks = tuple((f"t{j}", float(v)) for j, v in enumerate(phis))
    return ScriptStep(text=text, tokens=toks, eos=eos, label=label, fail=fail)


def hand_scenario(step0_phis, n_steps=3, later_phi=8.0, large_phi=8.0, fail_at=()):
    """Questions whose step-0 small confidence is ``step0_phis[q]`` and whose
    later steps all sit at ``later_phi`` (``large_phi`` for the large model).
    Every token of a step has the same max-logit, so step confidence equals
    that value exactly. ``fail_at`` holds ``(q, role, step)`` triples."""
    fail_at = set(fail_at)
    questions = []
    for q, phi0 in enumerate(step0_phis):
        scripts = {}
        for role in ("small", "large"):
            steps = []
            for i in range(n_steps):
                if role == "small":
                    phi = phi0 if i == 0 else later_phi
                else:
                    phi = large_phi
                label = "unconfident" if (i == 0 and phi0 < 5) else "confident"
                steps.append(flat_step(
                    f"{role} q{q} step {i}", [phi] * 3, eos=i == n_steps - 1, label=label,
                    fail=(q, role, i) in fail_at,
                ))
            scripts[role] = steps
        questions.append(ScriptedQuestion(id=f"q{q}", prompt=f"Question {q}?", scripts=scripts))
    return ScriptedScenario(questions=questions)


@pytest.fixture
def six_question_scenario():
    # traces q2 and q5 sit in the low mode at step 0
    return hand_scenario([8.1, 7.9, 1.2, 8.3, 7.7, 0.8])


@pytest.fixture(scope="session")
def synthetic_200():
    profiles = make_difficulty_profiles(200, steps=(3, 8), hard_fraction=0.3, seed=11)
    return synth_scenario(profiles, (2.0, 8.0, 1.0, 1.0), seed=12)


@pytest.fixture(scope="session")
def synthetic_60():
    profiles = make_difficulty_profiles(60, steps=(3, 6), hard_fraction=0.35, seed=5)
    return synth_scenario(profiles, (2.0, 8.0, 1.0, 1.0), seed=6)


# --- OpenAI-compatible stub server -------------------------------------------------


class StubBehaviour:
    """Scripted server: each question gets three steps, the third ends with EOS.

    ``mode`` is one of ``ok``, ``no_logprobs``, ``http_500_then_ok``,
    ``always_500`` and ``bad_request``.
    """

    def __init__(self, mode="ok", steps_per_question=3):
        self.mode = mode
        self.steps_per_question = steps_per_question
        self.requests = []
        self.failures_left = 2

    def completion(self, body):
        prompt = body["prompt"]
        parts = prompt.split("\n\n")
        done = len([p for p in parts[1:] if p])
        qnum = int(re.search(r"(\d+)", parts[0]).group(1))
        last = done >= self.steps_per_question - 1
        text = f"step {done}: x = {qnum + done}"
        tokens = re.findall(r"\S+|\s+", text)
        # odd questions are unconfident
        base = -2.5 if qnum % 2 else -0.05
        lps = [base - 0.01 * j for j in range(len(tokens))]
        choice = {
            "index": 0,
            "text": text,
            "finish_reason": "stop",
            "stop_reason": None if last else "\n\n",
            "logprobs": {
                "tokens": tokens,
                "token_logprobs": lps,
                "top_logprobs": [{t: lp} for t, lp in zip(tokens, lps)],
                "text_offset": [],
            },
        }
        if self.mode == "no_logprobs":
            choice["logprobs"] = None
        return {
            "id": "cmpl-stub",
            "object": "text_completion",
            "model": body.get("model"),
            "choices": [choice],
            "usage": {"prompt_tokens": len(prompt.split()), "completion_tokens": len(tokens)},
        }


def _make_handler(behaviour):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def _send(self, code, payload):
            data = json.dumps(payload).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            if self.path.rstrip("/").endswith("/models"):
                self._send(200, {"object": "list", "data": [{"id": "stub"}]})
            else:
                self._send(404, {"error": "not found"})

        def do_POST(self):
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            behaviour.requests.append({"body": body, "auth": self.headers.get("Authorization")})
            mode = behaviour.mode
            if mode == "bad_request":
                return self._send(400, {"error": "bad request"})
            if mode == "always_500":
                return self._send(503, {"error": "unavailable"})
            if mode == "http_500_then_ok" and behaviour.failures_left > 0:
                behaviour.failures_left -= 1
                return self._send(500, {"error": "transient"})
            self._send(200, behaviour.completion(body))

    return Handler


@pytest.fixture
def stub_server():
    servers = []

    def start(mode="ok", **kw):
        behaviour = StubBehaviour(mode, **kw)
        server = ThreadingHTTPServer(("127.0.0.1", 0), _make_handler(behaviour))
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        servers.append(server)
        host, port = server.server_address
        return f"http://{host}:{port}/v1", behaviour

    yield start
    for s in servers:
        s.shutdown()
        s.server_close()


# --- acceptance report ------------------------------------------------------------


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call":
                continue
            props = dict(rep.user_properties)
            if "criterion" in props:
                lines.append((props["criterion"], "PASS" if outcome == "passed" else "FAIL"))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict in sorted(lines, key=lambda x: (int(x[0].split()[0].rstrip("abc")), x[0])):
        terminalreporter.write_line(f"{verdict}  criterion {name}")
