import csv
import json
import hashlib
import threading
from concurrent.futures import ThreadPoolExecutor

import pytest
import requests

from tools.mock_tools import MockTransport
from tools.teacher_tools import (
    CompletionRequest, CostProfile, GatewayError, HttpTransport, OfflineCacheMiss, Pricing, ResponseCache,
    TeacherGateway, TransportError, TransportResponse, UsageRecord,
    approx_token_count, cache_key, estimate_cost, profile_cost, round_cost,
)

PRICING = Pricing(input_per_1k=0.03, output_per_1k=0.06)


def _ok(text, usage=None):
    body = {"choices": [{"message": {"role": "assistant", "content": text}}]}
    if usage is not None:
        body["usage"] = usage
    return TransportResponse(status=200, body=body)


class ScriptedTransport:
    """Replays a list of outcomes; an exception instance is raised instead of returned."""

    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.calls = 0
        self.payloads = []

    def send(self, payload):
        self.calls += 1
        self.payloads.append(payload)
        outcome = self.outcomes.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        return outcome


@pytest.fixture
def request_():
    return CompletionRequest(model="teacher-1", prompt="rank these passages")


def _gateway(tmp_path, transport, **kwargs):
    delays = []
    gateway = TeacherGateway(transport, ResponseCache(str(tmp_path / "cache")), PRICING,
                             sleep=delays.append, **kwargs)
    return gateway, delays


class TestCacheKey:
    def test_canonical_sha256(self, request_):
        material = '{"model":"teacher-1","prompt":"rank these passages","temperature":1.0,"top_p":0.9}'
        assert cache_key(request_) == hashlib.sha256(material.encode("utf-8")).hexdigest()

    def test_sampling_parameters_change_key(self, request_):
        colder = CompletionRequest(model="teacher-1", prompt="rank these passages", temperature=0.0)
        assert cache_key(colder) != cache_key(request_)

    def test_max_tokens_does_not_change_key(self, request_):
        longer = CompletionRequest(model="teacher-1", prompt="rank these passages", max_tokens=4096)
        assert cache_key(longer) == cache_key(request_)

    def test_cache_layout(self, tmp_path, request_):
        cache = ResponseCache(str(tmp_path))
        key = cache_key(request_)
        cache.put(key, request_, "answer", UsageRecord(input_tokens=1, output_tokens=2, requests=1))
        path = tmp_path / key[:2] / f"{key}.json"
        record = json.loads(path.read_text(encoding="utf-8"))
        assert record["response"] == "answer"
        assert cache.get(key)["usage"]["output_tokens"] == 2
        assert cache.get("0" * 64) is None


class TestRetries:
    def test_two_rate_limits_then_success(self, tmp_path, request_):
        transport = MockTransport({"status_sequence": [429, 429], "responses": ["ok"]})
        gateway, delays = _gateway(tmp_path, transport)
        result = gateway.complete(request_)
        assert result.text == "ok"
        assert transport.calls == 3
        assert result.usage.requests == 3
        assert delays == [1.0, 2.0]

    def test_gives_up_after_four_attempts(self, tmp_path, request_):
        transport = ScriptedTransport([TransportResponse(status=503)] * 4)
        gateway, delays = _gateway(tmp_path, transport)
        with pytest.raises(GatewayError) as excinfo:
            gateway.complete(request_)
        assert excinfo.value.attempts == 4
        assert transport.calls == 4
        assert delays == [1.0, 2.0, 4.0]
        assert gateway.cache.get(cache_key(request_)) is None

    def test_client_error_is_not_retried(self, tmp_path, request_):
        transport = ScriptedTransport([TransportResponse(status=400)])
        gateway, delays = _gateway(tmp_path, transport)
        with pytest.raises(GatewayError, match="HTTP 400"):
            gateway.complete(request_)
        assert transport.calls == 1
        assert delays == []

    def test_transport_errors_are_retried(self, tmp_path, request_):
        transport = ScriptedTransport([TransportError("reset"), TransportError("timeout"), _ok("fine")])
        gateway, delays = _gateway(tmp_path, transport, backoff_seconds=0.5)
        assert gateway.complete(request_).text == "fine"
        assert delays == [0.5, 1.0]

    def test_body_without_content(self, tmp_path, request_):
        transport = ScriptedTransport([TransportResponse(status=200, body={"choices": []})])
        gateway, _ = _gateway(tmp_path, transport)
        with pytest.raises(GatewayError, match="no choices"):
            gateway.complete(request_)


class TestCaching:
    def test_second_call_hits_cache(self, tmp_path, request_):
        transport = ScriptedTransport([_ok("first")])
        gateway, _ = _gateway(tmp_path, transport)
        first = gateway.complete(request_)
        second = gateway.complete(request_)
        assert transport.calls == 1
        assert (first.cached, second.cached) == (False, True)
        assert second.text == "first"
        assert second.usage == UsageRecord()

    def test_warm_cache_survives_new_gateway(self, tmp_path, request_):
        gateway, _ = _gateway(tmp_path, ScriptedTransport([_ok("stored")]))
        gateway.complete(request_)
        replay, _ = _gateway(tmp_path, ScriptedTransport([]), cache_only=True)
        assert replay.complete(request_).text == "stored"
        assert replay.transport.calls == 0

    def test_offline_miss(self, tmp_path, request_):
        gateway, _ = _gateway(tmp_path, ScriptedTransport([_ok("never")]), cache_only=True)
        with pytest.raises(OfflineCacheMiss):
            gateway.complete(request_)
        assert gateway.transport.calls == 0

    def test_no_transport_is_offline(self, tmp_path, request_):
        gateway, _ = _gateway(tmp_path, None)
        with pytest.raises(OfflineCacheMiss) as excinfo:
            gateway.complete(request_)
        assert excinfo.value.key == cache_key(request_)


class TestUsage:
    def test_reported_usage_wins(self, tmp_path, request_):
        transport = ScriptedTransport([_ok("text", usage={"prompt_tokens": 11, "completion_tokens": 7})])
        gateway, _ = _gateway(tmp_path, transport)
        usage = gateway.complete(request_).usage
        assert (usage.input_tokens, usage.output_tokens) == (11, 7)
        assert usage.cost == pytest.approx(11 * 0.03 / 1000 + 7 * 0.06 / 1000)

    def test_estimate_when_unreported(self, tmp_path, request_):
        gateway, _ = _gateway(tmp_path, ScriptedTransport([_ok("hello, world")]))
        usage = gateway.complete(request_).usage
        assert usage.input_tokens == approx_token_count(request_.prompt)
        assert usage.output_tokens == 4

    @pytest.mark.parametrize("text, tokens", [("", 0), ("hello", 2), ("hello, world", 4), ("a b c d e f g h i j", 13)])
    def test_approx_token_count(self, text, tokens):
        assert approx_token_count(text) == tokens

    def test_ledger_totals_and_csv(self, tmp_path):
        transport = ScriptedTransport([_ok("a", usage={"prompt_tokens": 10, "completion_tokens": 5}),
                                       _ok("b", usage={"prompt_tokens": 20, "completion_tokens": 5})])
        gateway, _ = _gateway(tmp_path, transport)
        gateway.complete(CompletionRequest(model="m", prompt="one"))
        gateway.complete(CompletionRequest(model="m", prompt="two"))
        gateway.complete(CompletionRequest(model="m", prompt="one"))
        totals = gateway.ledger.totals()
        assert (totals.input_tokens, totals.output_tokens, totals.requests) == (30, 10, 2)
        path = tmp_path / "usage.csv"
        gateway.ledger.write_csv(str(path))
        rows = list(csv.DictReader(path.open(encoding="utf-8")))
        assert len(rows) == 3
        assert sorted(row["cached"] for row in rows) == ["0", "0", "1"]

    def test_complete_many_keeps_request_order(self, tmp_path):
        gateway, _ = _gateway(tmp_path, MockTransport({"strategy": "identity"}), concurrency=3)
        prompts = [f"[1] alpha {i}\n[2] beta {i}\nSearch Query: alpha." for i in range(6)]
        results = gateway.complete_many([CompletionRequest(model="m", prompt=p) for p in prompts])
        assert [r.key for r in results] == [cache_key(CompletionRequest(model="m", prompt=p)) for p in prompts]
        assert gateway.complete_many([]) == []


class TestCost:
    @pytest.mark.parametrize("mode, input_tokens, output_tokens, cost", [
        ("explicit", 2833, 817, 0.134),
        ("comparison", 2833, 1217, 0.158),
        ("combined", 2833, 1817, 0.194),
    ])
    def test_profiles(self, mode, input_tokens, output_tokens, cost):
        profile = CostProfile(mode=mode, input_tokens=input_tokens, output_tokens=output_tokens)
        assert profile_cost(profile, PRICING) == cost
        assert profile.total_tokens == input_tokens + output_tokens

    def test_half_up_rounding(self):
        assert round_cost(0.0125) == 0.013
        assert round_cost(0.0124999) == 0.012

    def test_zero_tokens(self):
        assert estimate_cost(0, 0, PRICING) == 0.0

    def test_negative_tokens(self):
        with pytest.raises(ValueError):
            estimate_cost(-1, 10, PRICING)


class _FakeHttpResponse:
    status_code = 200
    text = ""

    def json(self):
        return {"choices": [{"message": {"content": "[1]"}}]}


class TestHttpTransport:
    def test_concurrent_sends_count_every_call_and_use_one_session_per_thread(self, monkeypatch):
        sessions_by_thread = {}
        lock = threading.Lock()

        def fake_post(session, url, json=None, headers=None, timeout=None):
            with lock:
                sessions_by_thread.setdefault(threading.get_ident(), set()).add(id(session))
            return _FakeHttpResponse()

        monkeypatch.setattr(requests.Session, "post", fake_post)
        transport = HttpTransport("http://teacher.invalid/v1/chat/completions", api_key="k")
        with ThreadPoolExecutor(max_workers=4) as pool:
            responses = list(pool.map(lambda i: transport.send({"n": i}), range(200)))

        assert transport.calls == 200
        assert all(r.status == 200 for r in responses)
        assert all(len(ids) == 1 for ids in sessions_by_thread.values())
        all_sessions = [next(iter(ids)) for ids in sessions_by_thread.values()]
        assert len(set(all_sessions)) == len(all_sessions)

    def test_request_errors_become_transport_errors(self, monkeypatch):
        def refuse(session, url, **kwargs):
            raise requests.ConnectionError("refused")

        monkeypatch.setattr(requests.Session, "post", refuse)
        with pytest.raises(TransportError, match="refused"):
            HttpTransport("http://teacher.invalid", api_key="").send({})
