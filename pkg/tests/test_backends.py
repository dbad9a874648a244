from __future__ import annotations

import json
import math
from dataclasses import replace

import httpx
import numpy as np
import pytest

from lsabench.backends import (
    BackendError,
    BackendProtocolError,
    BackendTimeout,
    GenerationRequest,
    GenerationResponse,
    MockBackend,
    RemoteBackend,
    RemoteSettings,
    ToyBackend,
    build_backend,
    generate,
)
from lsabench.allocation import check_pairs
from lsabench.grpo import ToyPolicy, greedy_rollout, rollout
from lsabench.netenv import EnvConfig, initial_state
from lsabench.reward import RewardWeights, reward_total
from lsabench.serializer import parse_action, render_action, try_parse_action

URL = "http://model.test/v1/completions"


@pytest.fixture
def state():
    return initial_state(EnvConfig.fixed(6, 8, 4, occupied_fraction=0.25), seed=3)


def request_for(state, n: int = 4, seed: int = 0, **kw) -> GenerationRequest:
    return GenerationRequest(prompt="prompt", num_candidates=n, seed=seed, state=state, **kw)


def remote(handler, retries: int = 1) -> RemoteBackend:
    settings = RemoteSettings(url=URL, token="secret", model="toy-7b", timeout_sec=2.0, retries=retries)
    return RemoteBackend(settings, transport=httpx.MockTransport(handler))


@pytest.mark.unit
def test_mock_valid_mode_scores_full_structure(state) -> None:
    response = generate(MockBackend({"valid": 1.0}), request_for(state, n=8))
    assert response.backend_name == "mock"
    assert len(response.latencies) == 8
    for i, text in enumerate(response.texts):
        mapping = parse_action(text)
        assert sorted(mapping) == list(state.active_ids)
        assert reward_total(text, state, RewardWeights(), seed=i).r_struct == pytest.approx(1.2)


@pytest.mark.unit
def test_mock_failure_modes(state, make_state) -> None:
    backend = MockBackend()
    weights = RewardWeights()

    assert try_parse_action(backend.render("prose", state, 0, 0)).error == "NoActionFound"

    duplicate = reward_total(backend.render("duplicate", state, 0, 0), state, weights, seed=0)
    assert duplicate.psi == 0.0
    assert duplicate.r_perf == 0.0

    occupied = backend.render("occupied", state, 0, 0)
    assert reward_total(occupied, state, weights, seed=0).r_struct == pytest.approx(0.8)

    free = make_state([(50.0, 0.0), (0.0, 200.0)], [5e6, 10e6, 20e6])
    out_of_range = parse_action(backend.render("occupied", free, 0, 0))
    assert out_of_range[0] == 3

    short = reward_total(backend.render("short", state, 0, 0), state, weights, seed=0)
    assert short.r_struct == pytest.approx(1.2)
    assert short.r_depth < 0.0


@pytest.mark.unit
@pytest.mark.parametrize(("positions", "spare"), [([(50.0, 0.0), (0.0, 200.0)], 1), ([(50.0, 0.0)], 1)])
def test_duplicate_mode_with_one_active_user_is_still_infeasible(make_state, positions, spare) -> None:
    state = make_state(positions, [5e6, 10e6], active=[0])
    text = MockBackend().render("duplicate", state, 0, 0)
    mapping = parse_action(text)
    assert sorted(mapping) == [0, spare]
    assert mapping[0] == mapping[spare]
    assert not check_pairs(mapping.items(), state).feasible
    breakdown = reward_total(text, state, RewardWeights(), seed=0)
    assert breakdown.psi == 0.0
    assert breakdown.r_struct < 1.2


@pytest.mark.unit
def test_mock_is_seeded(state) -> None:
    backend = MockBackend({"valid": 0.5, "duplicate": 0.25, "prose": 0.25})
    a = backend.generate(request_for(state, n=6, seed=9)).texts
    assert a == backend.generate(request_for(state, n=6, seed=9)).texts
    assert a != backend.generate(request_for(state, n=6, seed=10)).texts


@pytest.mark.unit
def test_mock_mode_proportions() -> None:
    backend = MockBackend({"valid": 0.5, "prose": 0.5})
    n = 2000
    valid = sum(backend.pick_mode(s, i) == "valid" for s in range(n // 4) for i in range(4))
    assert abs(valid / n - 0.5) <= 4 * math.sqrt(0.25 / n)


@pytest.mark.unit
def test_mock_validation(state) -> None:
    with pytest.raises(BackendError):
        MockBackend({"hallucinate": 1.0})
    with pytest.raises(BackendError):
        MockBackend({"valid": 0.0})
    with pytest.raises(BackendError):
        MockBackend().generate(GenerationRequest(prompt="p"))
    with pytest.raises(BackendError):
        GenerationRequest(prompt="p", num_candidates=0)


@pytest.mark.unit
def test_toy_backend_round_trip(state) -> None:
    policy = ToyPolicy(theta=np.random.default_rng(0).standard_normal((8, 32)))
    response = ToyBackend(policy, target_tokens=128).generate(request_for(state, n=5, seed=7, temperature=0.9))
    tempered = replace(policy, temperature=0.9)
    for i, text in enumerate(response.texts):
        expected, _ = rollout(tempered, state, np.random.default_rng([7, i]))
        assert parse_action(text) == expected


@pytest.mark.unit
def test_toy_backend_cold_texts_are_greedy(state) -> None:
    policy = ToyPolicy(theta=np.random.default_rng(1).standard_normal((8, 32)))
    texts = ToyBackend(policy).generate(request_for(state, n=4, temperature=1e-6)).texts
    assert len(set(texts)) == 1
    assert parse_action(texts[0]) == greedy_rollout(policy, state)


@pytest.mark.unit
def test_remote_success_sends_expected_body() -> None:
    seen: list[httpx.Request] = []

    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(request)
        return httpx.Response(200, json={"choices": [{"text": render_action({0: 1})}]})

    backend = remote(handler)
    response = generate(backend, GenerationRequest(prompt="hello", num_candidates=2, seed=3, max_tokens=64))
    backend.close()

    assert response.texts == [render_action({0: 1})] * 2
    assert seen[0].headers["Authorization"] == "Bearer secret"
    bodies = [json.loads(r.content) for r in seen]
    assert bodies[0] == {"prompt": "hello", "max_tokens": 64, "temperature": 1.0, "n": 1, "seed": 3000, "model": "toy-7b"}
    assert bodies[1]["seed"] == 3001


@pytest.mark.unit
def test_remote_timeout_retries_then_raises() -> None:
    calls = []

    def handler(request: httpx.Request) -> httpx.Response:
        calls.append(request)
        raise httpx.ReadTimeout("slow", request=request)

    with pytest.raises(BackendTimeout):
        remote(handler, retries=1).generate(GenerationRequest(prompt="p"))
    assert len(calls) == 2


@pytest.mark.unit
def test_remote_server_error_then_success() -> None:
    statuses = iter([500, 200])

    def handler(request: httpx.Request) -> httpx.Response:
        status = next(statuses)
        if status != 200:
            return httpx.Response(status, text="boom")
        return httpx.Response(200, json={"choices": [{"text": "ok"}]})

    assert remote(handler).generate(GenerationRequest(prompt="p")).texts == ["ok"]


@pytest.mark.unit
def test_remote_persistent_server_error() -> None:
    with pytest.raises(BackendProtocolError, match="status=500"):
        remote(lambda request: httpx.Response(500, text="boom"), retries=0).generate(GenerationRequest(prompt="p"))


@pytest.mark.unit
@pytest.mark.parametrize(
    "response",
    [
        httpx.Response(200, json={"foo": 1}),
        httpx.Response(200, json={"choices": []}),
        httpx.Response(200, json={"choices": [{"text": 5}]}),
        httpx.Response(200, text="not json"),
    ],
)
def test_remote_bad_payload(response: httpx.Response) -> None:
    with pytest.raises(BackendProtocolError):
        remote(lambda request: response).generate(GenerationRequest(prompt="p"))


@pytest.mark.unit
def test_remote_settings_from_env(monkeypatch: pytest.MonkeyPatch) -> None:
    with pytest.raises(BackendError):
        RemoteSettings.from_env()

    monkeypatch.setenv("LSABENCH_REMOTE_URL", URL)
    monkeypatch.setenv("LSABENCH_REMOTE_TOKEN", "env-token")
    settings = RemoteSettings.from_env()
    assert (settings.url, settings.token, settings.timeout_sec, settings.retries) == (URL, "env-token", 2.0, 1)

    overridden = RemoteSettings.from_env({"url": "http://other.test", "retries": 3})
    assert (overridden.url, overridden.retries) == ("http://other.test", 3)

    monkeypatch.setenv("LSABENCH_REMOTE_TIMEOUT_SEC", "soon")
    with pytest.raises(BackendError):
        RemoteSettings.from_env()


@pytest.mark.unit
def test_generate_checks_text_count(state) -> None:
    class Short:
        name = "short"

        def generate(self, request: GenerationRequest) -> GenerationResponse:
            return GenerationResponse(texts=["x"], latency=0.0, backend_name=self.name)

    with pytest.raises(BackendProtocolError):
        generate(Short(), request_for(state, n=2))


@pytest.mark.unit
def test_build_backend() -> None:
    assert isinstance(build_backend({"kind": "mock", "proportions": {"valid": 0.78, "prose": 0.22}}), MockBackend)
    toy = build_backend({"kind": "toy", "theta": [[0.0, 1.0], [2.0, 3.0]], "temperature": 0.5})
    assert isinstance(toy, ToyBackend)
    assert toy.policy.theta.shape == (2, 2)
    assert toy.policy.temperature == 0.5
    assert isinstance(build_backend({"kind": "remote", "url": URL}), RemoteBackend)
    with pytest.raises(BackendError):
        build_backend({"kind": "grpc"})
