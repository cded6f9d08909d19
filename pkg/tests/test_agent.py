import json
import re
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lossagent.agent import (
    AgentDecision,
    HillClimbResponder,
    RetryPolicy,
    decide,
    find_weight_pattern,
    parse_weights,
)
from lossagent.backends import (
    ChatMessage,
    HTTPChatBackend,
    ScriptedBackend,
    SequenceBackend,
    chat,
    prompt_hash,
)
from lossagent.errors import BackendError, ParseError
from lossagent.losses import WeightBounds
from lossagent.prompts import PromptBundle, format_weights_line, render

NAMED_IDS = ("L1", "Perceptual", "GAN")
IDS = ("l1", "edge", "tv")
BUNDLE = PromptBundle("system text", "history text", "needs text")


def test_parse_case_study_reply():
    reply = "After analysing the trend, I will lower the GAN weight.\nL1:Perceptual:GAN=0.7:0.3:0.05"
    assert parse_weights(reply, NAMED_IDS).tolist() == [0.7, 0.3, 0.05]


def test_last_occurrence_wins():
    first = "l1:edge:tv=1:0.1:0.01"
    second = "l1:edge:tv=2.5:0.2:0.03"
    reply = f"Earlier I said {first}. On reflection:\n{second}"
    # oracle: last substring that matches a plain scan of the grammar
    last = [m.group(0) for m in re.finditer(r"l1:edge:tv=[0-9.:]+", reply)][-1].rstrip(".")
    expected = [float(v) for v in last.split("=")[1].split(":")]
    assert parse_weights(reply, IDS).tolist() == expected == [2.5, 0.2, 0.03]


def test_tolerates_case_and_whitespace():
    assert parse_weights("L1 : EDGE : Tv = 0.5 : 1e-1 : .25", IDS).tolist() == [0.5, 0.1, 0.25]


@pytest.mark.parametrize(
    "reply, fragment",
    [
        ("I would keep everything as is.", "no weight pattern"),
        ("edge:l1:tv=0.1:0.2:0.3", "wrong order"),
        ("l1:edge:tv=0.1:0.2", "expected 3 values"),
        ("l1:edge:tv=0.1:0.2:0.3:0.4", "expected 3 values"),
        ("l1:edge:tv=0.1:high:0.3", "non-numeric"),
    ],
)
def test_parse_errors(reply, fragment):
    with pytest.raises(ParseError, match=fragment):
        parse_weights(reply, IDS)


def test_sentence_final_period_is_not_part_of_value():
    assert parse_weights("I suggest l1:edge:tv=1:2:0.5.", IDS).tolist() == [1.0, 2.0, 0.5]
    with pytest.raises(ParseError):
        parse_weights("l1:edge:tv=1:2:3.5.1", IDS)


def test_parse_rejects_longer_id_list_and_embedded_ids():
    with pytest.raises(ParseError):
        parse_weights("xl1:edge:tv=1:2:3", IDS)
    with pytest.raises(ParseError):
        parse_weights("l1:edge:tv:mse=1:2:3:4", IDS)


def test_clipping_is_flagged():
    raw = find_weight_pattern("l1:edge:tv=12:0.5:-1", IDS)
    assert raw == [12.0, 0.5, -1.0]
    values = parse_weights("l1:edge:tv=12:0.5:-1", IDS, WeightBounds(0, 10))
    assert values.tolist() == [10.0, 0.5, 0.0]
    decision = decide(BUNDLE, ScriptedBackend.constant("l1:edge:tv=12:0.5:-1"), RetryPolicy(), [1, 1, 1], IDS)
    assert decision.clipped and decision.weights == (10.0, 0.5, 0.0)


weights_st = st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=8)


@settings(max_examples=300)
@given(weights_st)
def test_round_trip_within_bounds(values):
    ids = [f"term{i}" for i in range(len(values))]
    line = format_weights_line(ids, values)
    np.testing.assert_allclose(parse_weights(line, ids), values, rtol=0, atol=1e-9)


@settings(max_examples=200)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=3, max_size=3), st.floats(0, 5), st.floats(0, 5))
def test_never_out_of_bounds(values, lo, span):
    bounds = WeightBounds(lo, lo + span)
    out = parse_weights(format_weights_line(IDS, values), IDS, bounds)
    assert np.all(out >= bounds.lower) and np.all(out <= bounds.upper)


def test_decide_happy_path():
    d = decide(BUNDLE, ScriptedBackend.constant("ok: l1:edge:tv=1:2:3"), RetryPolicy(), [0, 0, 0], IDS)
    assert (d.parse_status, d.attempts, d.weights) == ("ok", 1, (1.0, 2.0, 3.0))


def test_decide_exhaustion_falls_back():
    d = decide(BUNDLE, ScriptedBackend.constant("no idea"), RetryPolicy(max_attempts=3), [1.0, 0.1, 0.01], IDS)
    assert d.parse_status == "fallback" and d.attempts == 3
    assert d.weights == (1.0, 0.1, 0.01)
    assert d.replies == ("no idea",) * 3 and len(d.errors) == 3


def test_decide_retry_then_ok():
    backend = SequenceBackend(["hmm", "l1:edge:tv=0.5:0.5:0.5"])
    d = decide(BUNDLE, backend, RetryPolicy(), [1, 1, 1], IDS)
    assert (d.parse_status, d.attempts) == ("ok", 2)
    assert d.replies == ("hmm", "l1:edge:tv=0.5:0.5:0.5")


def test_decide_transport_failure_then_ok():
    backend = SequenceBackend([BackendError("down", "transport"), "l1:edge:tv=1:1:1"])
    d = decide(BUNDLE, backend, RetryPolicy(), [0, 0, 0], IDS)
    assert d.attempts == 2 and d.parse_status == "ok"


def test_decide_all_transport_failures_raise():
    backend = SequenceBackend([BackendError("timeout", "timeout")] * 3)
    with pytest.raises(BackendError) as info:
        decide(BUNDLE, backend, RetryPolicy(), [0, 0, 0], IDS)
    assert info.value.category == "timeout"


def test_decide_uses_temperature_schedule():
    seen = []

    def responder(messages, temperature):
        seen.append(temperature)
        return "nothing"

    decide(BUNDLE, ScriptedBackend(responder), RetryPolicy(max_attempts=5), [0, 0, 0], IDS)
    assert seen == [0.2, 0.5, 0.8, 0.8, 0.8]


def test_decide_is_deterministic():
    backend = ScriptedBackend(HillClimbResponder())
    system = "Objective 'q' (psnr): higher scores indicate better image quality."
    hist = "[Stage 0] weights: l1=1.0000, edge=0.1000, tv=0.0100\n  q: 20.0000"
    bundle = PromptBundle(system, hist, "needs")
    a = decide(bundle, backend, RetryPolicy(), [1, 0.1, 0.01], IDS)
    b = decide(bundle, backend, RetryPolicy(), [1, 0.1, 0.01], IDS)
    assert a == b and a.reply_digest() == b.reply_digest()
    assert a.weights == (1.5, 0.1, 0.01)


def test_scripted_lookup_by_prompt_hash():
    messages = render(BUNDLE)
    backend = ScriptedBackend.from_mapping({prompt_hash(messages): "registered reply"})
    assert chat(backend, messages) == "registered reply"
    with pytest.raises(BackendError) as info:
        chat(backend, render(PromptBundle("other", "h", "n")))
    assert info.value.category == "scripted"


def test_chat_preconditions():
    with pytest.raises(ValueError):
        chat(ScriptedBackend.constant("x"), [])
    with pytest.raises(ValueError):
        chat(ScriptedBackend.constant("x"), [ChatMessage("user", "")])


def test_agent_decision_digest_depends_on_replies():
    a = AgentDecision((1.0,), "x", 1, "ok", replies=("x",))
    b = AgentDecision((1.0,), "y", 1, "ok", replies=("y",))
    assert a.reply_digest() != b.reply_digest()


# --------------------------------------------------------------- hill climber


def history(*rows):
    lines = []
    for i, (w, s) in enumerate(rows):
        lines.append(f"[Stage {i}] weights: " + ", ".join(f"{t}={v:.4f}" for t, v in zip(IDS, w)))
        lines.append(f"  q: {s:.4f}")
    return "\n".join(lines)


SYSTEM_HIGH = "Objective 'q' (sharpness): higher scores indicate better image quality."
SYSTEM_LOW = "Objective 'q' (sharpness): lower scores indicate better image quality."


def test_hill_climber_accepts_improvement_and_rejects_regression():
    climber = HillClimbResponder()
    w0, w1 = [1.0, 0.1, 0.01], [1.5, 0.1, 0.01]
    # improvement kept: same move again from the better point
    assert climber.propose(SYSTEM_HIGH, history((w0, 1.0), (w1, 2.0)))[1] == [2.25, 0.1, 0.01]
    # regression: back to w0 and try the next move (divide term 0)
    assert climber.propose(SYSTEM_HIGH, history((w0, 1.0), (w1, 0.5)))[1] == [0.6667, 0.1, 0.01]
    # direction flip turns the same scores into the opposite decision
    assert climber.propose(SYSTEM_LOW, history((w0, 1.0), (w1, 0.5)))[1] == [2.25, 0.1, 0.01]


def test_hill_climber_lifts_zero_weight_from_floor():
    climber = HillClimbResponder()
    assert climber.propose(SYSTEM_HIGH, history(([0.0, 0.0, 0.0], 1.0)))[1] == [0.015, 0.0, 0.0]


# ------------------------------------------------------------ HTTP backend


class _StubHandler(BaseHTTPRequestHandler):
    mode = "ok"
    last_body = None

    def log_message(self, *args):
        pass

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        type(self).last_body = json.loads(self.rfile.read(length))
        type(self).last_auth = self.headers.get("Authorization")
        if self.mode == "slow":
            time.sleep(1.0)
        if self.mode == "500":
            self.send_response(500)
            self.end_headers()
            self.wfile.write(b"boom")
            return
        body = {"choices": [{"message": {"role": "assistant", "content": "canned l1:edge:tv=1:2:3"}}]}
        data = b"not json" if self.mode == "garbage" else json.dumps(body).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


@pytest.fixture
def stub_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}/v1/chat/completions"
    server.shutdown()
    server.server_close()
    _StubHandler.mode = "ok"


def test_http_backend_round_trip(stub_server):
    backend = HTTPChatBackend(stub_server, api_key="secret", model="tiny")
    reply = chat(backend, render(BUNDLE), 0.2)
    assert reply == "canned l1:edge:tv=1:2:3"
    sent = _StubHandler.last_body
    assert sent["model"] == "tiny" and sent["temperature"] == 0.2
    assert [m["role"] for m in sent["messages"]] == ["system", "user"]
    assert _StubHandler.last_auth == "Bearer secret"


@pytest.mark.parametrize("mode, category", [("500", "http_status"), ("garbage", "malformed")])
def test_http_backend_errors(stub_server, mode, category):
    _StubHandler.mode = mode
    with pytest.raises(BackendError) as info:
        chat(HTTPChatBackend(stub_server), render(BUNDLE))
    assert info.value.category == category


def test_http_backend_timeout(stub_server):
    _StubHandler.mode = "slow"
    with pytest.raises(BackendError) as info:
        chat(HTTPChatBackend(stub_server, timeout=0.2), render(BUNDLE))
    assert info.value.category == "timeout"


def test_http_backend_env_configuration(monkeypatch):
    monkeypatch.delenv("LOSSAGENT_API_URL", raising=False)
    with pytest.raises(BackendError):
        HTTPChatBackend()
    monkeypatch.setenv("LOSSAGENT_API_URL", "http://example.invalid/chat")
    monkeypatch.setenv("LOSSAGENT_API_KEY", "k")
    b = HTTPChatBackend()
    assert b.url == "http://example.invalid/chat" and b.api_key == "k" and b.timeout == 60.0
