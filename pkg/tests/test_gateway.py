import json
from concurrent.futures import ThreadPoolExecutor

import httpx
import pytest

from mdagents.gateway import (AuthError, Gateway, HttpBackend, MalformedReply,
                              ParseError, RateLimiter, RequestRejected, ScriptedBackend, ScriptMiss,
                              TransportError, load_script, make_request)


def req(text="hello", stage="moderator", **kw):
    return make_request([("system", "sys"), ("user", text)], stage_tag=stage, **kw)


def no_sleep_gateway(backend, **kw):
    return Gateway(backend, sleep=lambda s: None, **kw)


def test_scripted_echo():
    backend = ScriptedBackend.from_dict({"rules": [
        {"stage": "moderator", "contains": "GERD", "response": "complexity: low"}]})
    resp = no_sleep_gateway(backend).complete(req("GERD management?"))
    assert (resp.content, resp.prompt_tokens, resp.completion_tokens) == ("complexity: low", 0, 0)


def test_empty_rules_always_miss():
    gw = no_sleep_gateway(ScriptedBackend.from_dict({"rules": []}))
    with pytest.raises(ScriptMiss):
        gw.complete(req())
    assert gw.snapshot_usage().total_calls == 0


def test_catch_all_rule():
    gw = no_sleep_gateway(ScriptedBackend.from_dict({"rules": [{"response": "ok"}]}))
    assert {gw.complete(req(str(i), stage=f"s{i}")).content for i in range(5)} == {"ok"}


def test_sequence_cursor_walk(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps({"rules": [{"stage": None, "contains": None,
                                           "sequence": ["A", "B"]}]}))
    gw = no_sleep_gateway(load_script(path))
    assert gw.complete(req()).content == "A"
    assert gw.complete(req()).content == "B"
    with pytest.raises(ScriptMiss):
        gw.complete(req())


def test_first_matching_rule_wins_and_matches_last_user_message():
    backend = ScriptedBackend.from_dict({"rules": [
        {"stage": "synthesis", "response": "wrong stage"},
        {"contains": "needle", "response": "first"},
        {"contains": "needle", "response": "second"},
        {"response": "fallback"},
    ]})
    gw = no_sleep_gateway(backend)
    assert gw.complete(req("a needle here")).content == "first"
    # "needle" only in the system message: does not count
    r = make_request([("system", "needle"), ("user", "hay")], stage_tag="x")
    assert gw.complete(r).content == "fallback"


def test_contains_list_requires_all():
    backend = ScriptedBackend.from_dict({"rules": [
        {"contains": ["alpha", "beta"], "response": "both"}, {"response": "other"}]})
    gw = no_sleep_gateway(backend)
    assert gw.complete(req("alpha beta")).content == "both"
    assert gw.complete(req("alpha")).content == "other"


def test_rule_tokens_are_accounted():
    backend = ScriptedBackend.from_dict({"rules": [
        {"response": "x", "prompt_tokens": 7, "completion_tokens": 3}]})
    gw = no_sleep_gateway(backend)
    gw.complete(req())
    gw.complete(req())
    snap = gw.snapshot_usage()
    assert (snap.prompt_tokens, snap.completion_tokens) == (14, 6)


@pytest.mark.parametrize("doc,fragment", [
    ({"rules": [{"stage": "x"}]}, "rules[0]"),
    ({"rules": [{"response": "a", "sequence": ["b"]}]}, "exactly one"),
    ({"rules": [{"response": 1}]}, "rules[0].response"),
    ({"rules": [{"response": "a"}, {"response": "a", "prompt_tokens": -1}]},
     "rules[1].prompt_tokens"),
    ({"rules": [{"response": "a", "colour": "red"}]}, "unknown field"),
    ({"rules": [{"contains": 5, "response": "a"}]}, "contains"),
    ({"rule": []}, "'rules' list"),
])
def test_load_script_field_diagnostics(tmp_path, doc, fragment):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ParseError, match=__import__("re").escape(fragment)):
        load_script(path)


def test_load_script_line_diagnostics(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"rules": [\n  {"response": "a"},\n  {"response": }\n]}')
    with pytest.raises(ParseError, match="line 3"):
        load_script(path)


def test_counting_loop_fifty_calls():
    gw = no_sleep_gateway(ScriptedBackend.from_dict({"rules": [{"response": "ok"}]}))
    for _ in range(50):
        gw.complete(req())
    assert gw.snapshot_usage().total_calls == 50


def test_snapshot_per_stage():
    gw = no_sleep_gateway(ScriptedBackend.from_dict({"rules": [{"response": "ok"}]}))
    assert gw.snapshot_usage().total_calls == 0
    for _ in range(2):
        gw.complete(req(stage="moderator"))
    for _ in range(3):
        gw.complete(req(stage="mdt_round"))
    snap = gw.snapshot_usage()
    assert snap.per_stage == {"moderator": 2, "mdt_round": 3}
    assert snap.total_calls == 5 == sum(snap.per_stage.values())


def test_snapshot_is_a_copy():
    gw = no_sleep_gateway(ScriptedBackend.from_dict({"rules": [{"response": "ok"}]}))
    snap = gw.snapshot_usage()
    gw.complete(req())
    assert snap.total_calls == 0


def test_concurrent_accounting_ten_by_ten():
    gw = no_sleep_gateway(ScriptedBackend.from_dict({"rules": [{"response": "ok"}]}))

    def worker(i):
        for _ in range(10):
            gw.complete(req(stage=f"t{i % 3}"))

    with ThreadPoolExecutor(max_workers=10) as pool:
        list(pool.map(worker, range(10)))
    snap = gw.snapshot_usage()
    assert snap.total_calls == 100 == sum(snap.per_stage.values())


def test_sequences_consumed_in_dispatch_order_under_concurrency():
    backend = ScriptedBackend.from_dict({"rules": [{"sequence": [str(i) for i in range(200)]}]})
    gw = no_sleep_gateway(backend)
    with ThreadPoolExecutor(max_workers=8) as pool:
        got = list(pool.map(lambda _: gw.complete(req()).content, range(200)))
    assert sorted(got, key=int) == [str(i) for i in range(200)]


class Flaky:
    def __init__(self, failures, exc=TransportError):
        self.failures = failures
        self.exc = exc
        self.attempts = 0

    def send(self, request):
        self.attempts += 1
        if self.attempts <= self.failures:
            raise self.exc("boom")
        from mdagents.gateway import ChatResponse
        return ChatResponse("ok")


def test_retry_then_success_counts_once():
    backend = Flaky(2)
    sleeps = []
    gw = Gateway(backend, sleep=sleeps.append)
    assert gw.complete(req()).content == "ok"
    assert backend.attempts == 3
    assert gw.snapshot_usage().total_calls == 1
    assert gw.retries == 2
    # exponential backoff with bounded jitter
    assert 0.5 <= sleeps[0] <= 1.0 and 1.0 <= sleeps[1] <= 1.5


def test_retries_exhausted_raise_transport_error():
    backend = Flaky(10)
    gw = no_sleep_gateway(backend)
    with pytest.raises(TransportError):
        gw.complete(req())
    assert backend.attempts == 3
    assert gw.snapshot_usage().total_calls == 0


def test_auth_error_not_retried():
    backend = Flaky(10, exc=AuthError)
    gw = no_sleep_gateway(backend)
    with pytest.raises(AuthError):
        gw.complete(req())
    assert backend.attempts == 1


def test_request_validation():
    with pytest.raises(ValueError):
        make_request([])
    with pytest.raises(ValueError):
        make_request([("assistant", "hi")])
    with pytest.raises(ValueError):
        req(temperature=2.5)
    assert req().temperature == 0.7


# ---------------------------------------------------------------------------
# live wire protocol against an in-process transport


def http_backend(handler, api_key="sk-test"):
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return HttpBackend(base_url="http://model.test/v1", api_key=api_key, client=client)


def test_http_wire_format_and_usage():
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={
            "choices": [{"message": {"role": "assistant", "content": "ANSWER: B"}}],
            "usage": {"prompt_tokens": 12, "completion_tokens": 4}})

    gw = no_sleep_gateway(http_backend(handler))
    resp = gw.complete(req("question", temperature=1.2, max_tokens=64, model_id="m1"))
    assert resp.content == "ANSWER: B"
    assert (resp.prompt_tokens, resp.completion_tokens) == (12, 4)
    assert seen["url"] == "http://model.test/v1/chat/completions"
    assert seen["auth"] == "Bearer sk-test"
    assert seen["body"] == {"model": "m1", "temperature": 1.2, "max_tokens": 64, "messages": [
        {"role": "system", "content": "sys"}, {"role": "user", "content": "question"}]}


def test_http_env_configuration(monkeypatch):
    monkeypatch.setenv("MDAGENTS_BASE_URL", "http://env.test/")
    monkeypatch.setenv("MDAGENTS_API_KEY", "from-env")
    backend = HttpBackend()
    assert backend.base_url == "http://env.test"
    assert backend.api_key == "from-env"


def test_http_image_attachments_pass_through():
    from mdagents.core import Attachment
    seen = {}

    def handler(request):
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={"choices": [{"message": {"content": "x"}}]})

    r = req("look", attachments=(Attachment("image/png", "https://img.test/1.png"),
                                 Attachment("video/mp4", "file:///v.mp4")))
    no_sleep_gateway(http_backend(handler)).complete(r)
    content = seen["body"]["messages"][1]["content"]
    assert content[0] == {"type": "text", "text": "look"}
    assert content[1] == {"type": "image_url", "image_url": {"url": "https://img.test/1.png"}}
    assert len(content) == 2


def test_unreachable_endpoint_transport_error_after_retries():
    attempts = []

    def handler(request):
        attempts.append(1)
        raise httpx.ConnectError("connection refused")

    gw = no_sleep_gateway(http_backend(handler))
    with pytest.raises(TransportError):
        gw.complete(req())
    assert len(attempts) == 3


@pytest.mark.parametrize("status,exc,attempts", [
    (500, TransportError, 3), (503, TransportError, 3), (429, TransportError, 3),
    (401, AuthError, 1), (403, AuthError, 1), (400, RequestRejected, 1)])
def test_http_status_mapping(status, exc, attempts):
    count = []

    def handler(request):
        count.append(1)
        return httpx.Response(status, json={"error": "x"})

    with pytest.raises(exc):
        no_sleep_gateway(http_backend(handler)).complete(req())
    assert len(count) == attempts


@pytest.mark.parametrize("body", ["not json", json.dumps({"choices": []}),
                                  json.dumps({"nothing": 1})])
def test_http_malformed_reply(body):
    handler = lambda request: httpx.Response(200, text=body)
    with pytest.raises(MalformedReply):
        no_sleep_gateway(http_backend(handler)).complete(req())


# ---------------------------------------------------------------------------
# rate limiting on a virtual clock


class VirtualClock:
    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now

    def sleep(self, seconds):
        self.now += max(seconds, 0.0)


@pytest.mark.parametrize("limit", [1, 3, 10])
def test_rate_limiter_window(limit):
    clock = VirtualClock()
    limiter = RateLimiter(limit, clock=clock, sleep=clock.sleep)
    stamps = []
    for i in range(limit * 5):
        clock.now += 0.013 * (i % 4)
        stamps.append(limiter.acquire())
    for t in stamps:
        assert sum(1 for s in stamps if t <= s < t + 1.0) <= limit


def test_gateway_rate_limit_is_applied():
    clock = VirtualClock()
    gw = Gateway(ScriptedBackend.from_dict({"rules": [{"response": "ok"}]}), rate_limit=2,
                 clock=clock, sleep=clock.sleep)
    for _ in range(6):
        gw.complete(req())
    # six dispatches at two per second need at least two full windows of waiting
    assert clock.now >= 2.0
    assert gw.snapshot_usage().total_calls == 6


def test_scripted_determinism():
    script = {"rules": [{"contains": "x", "sequence": ["1", "2", "3"]}, {"response": "d"}]}
    runs = []
    for _ in range(2):
        gw = no_sleep_gateway(ScriptedBackend.from_dict(script))
        runs.append([gw.complete(req(t)).content for t in ["x", "y", "x", "x", "y"]])
    assert runs[0] == runs[1] == ["1", "d", "2", "3", "d"]
