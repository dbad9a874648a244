from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Protocol

import httpx
import numpy as np

from .grpo import ToyPolicy, rollout
from .netenv import NetworkState
from .serializer import render_action, render_candidate_text

log = logging.getLogger(__name__)

MOCK_MODES = ("valid", "duplicate", "occupied", "prose", "short")
DEFAULT_TARGET_TOKENS = 512
DEFAULT_TIMEOUT_SEC = 30.0
DEFAULT_RETRIES = 1
PROSE_TEXT = (
    "Assign the nearest users to the widest idle channels and keep every channel "
    "exclusive; the remaining users can wait for the next slot."
)


class BackendError(RuntimeError):
    pass


class BackendTimeout(BackendError):
    pass


class BackendProtocolError(BackendError):
    pass


@dataclass(slots=True, frozen=True)
class GenerationRequest:
    prompt: str
    max_tokens: int = DEFAULT_TARGET_TOKENS
    num_candidates: int = 1
    temperature: float = 1.0
    seed: int = 0
    state: NetworkState | None = None

    def __post_init__(self) -> None:
        if self.num_candidates < 1:
            raise BackendError("num_candidates must be >= 1")
        if self.max_tokens <= 0:
            raise BackendError("max_tokens must be > 0")


@dataclass(slots=True)
class GenerationResponse:
    texts: list[str]
    latency: float
    backend_name: str
    latencies: list[float] = field(default_factory=list)


class Backend(Protocol):
    name: str

    def generate(self, request: GenerationRequest) -> GenerationResponse: ...


def _require_state(request: GenerationRequest, backend: str) -> NetworkState:
    if request.state is None:
        raise BackendError(f"{backend} backend needs request.state")
    return request.state


class MockBackend:
    """Scripted texts covering the structural failure modes, drawn with fixed proportions."""

    name = "mock"

    def __init__(self, proportions: Mapping[str, float] | None = None, target_tokens: int = DEFAULT_TARGET_TOKENS):
        props = dict(proportions or {"valid": 1.0})
        unknown = sorted(set(props) - set(MOCK_MODES))
        if unknown:
            raise BackendError(f"unknown mock modes: {unknown}")
        weights = np.array([float(props.get(m, 0.0)) for m in MOCK_MODES])
        if np.any(weights < 0) or weights.sum() <= 0:
            raise BackendError("mock proportions must be non-negative with a positive sum")
        self.probs = weights / weights.sum()
        self.target_tokens = target_tokens

    def pick_mode(self, seed: int, index: int) -> str:
        rng = np.random.default_rng([seed, index])
        return MOCK_MODES[int(rng.choice(len(MOCK_MODES), p=self.probs))]

    def _valid_map(self, state: NetworkState, rng: np.random.Generator) -> dict[int, int]:
        users = list(state.active_ids)
        channels = rng.permutation(np.array(state.idle_ids, dtype=np.int64))
        return {u: int(c) for u, c in zip(users, channels)}

    def render(self, mode: str, state: NetworkState, seed: int, index: int) -> str:
        rng = np.random.default_rng([seed, index, 1])
        if mode == "prose":
            return PROSE_TEXT
        if mode == "short":
            return render_action(self._valid_map(state, rng))
        mapping = self._valid_map(state, rng)
        if mode == "duplicate" and state.active_ids and state.idle_ids:
            shared = mapping.get(state.active_ids[0], state.idle_ids[0])
            mapping = {u: shared for u in state.active_ids}
            if len(mapping) == 1:
                # one active user: an inactive or unknown id claims the same channel
                spare = [u.id for u in state.users if u.id not in state.active_set]
                mapping[spare[0] if spare else max(state.user_by_id) + 1] = shared
        elif mode == "occupied" and state.active_ids:
            busy = [c.id for c in state.channels if c.occupied]
            # with nothing occupied, an out-of-range id breaks the same constraint
            target = busy[0] if busy else max(state.channel_by_id, default=-1) + 1
            mapping = {**mapping, state.active_ids[0]: target}
        return render_candidate_text(mapping, self.target_tokens)

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        state = _require_state(request, self.name)
        started = time.perf_counter()
        texts, latencies = [], []
        for i in range(request.num_candidates):
            t0 = time.perf_counter()
            texts.append(self.render(self.pick_mode(request.seed, i), state, request.seed, i))
            latencies.append(time.perf_counter() - t0)
        return GenerationResponse(texts, time.perf_counter() - started, self.name, latencies)


class ToyBackend:
    name = "toy"

    def __init__(self, policy: ToyPolicy, target_tokens: int = DEFAULT_TARGET_TOKENS):
        self.policy = policy
        self.target_tokens = target_tokens

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        state = _require_state(request, self.name)
        policy = replace(self.policy, temperature=request.temperature) if request.temperature > 0 else self.policy
        started = time.perf_counter()
        texts, latencies = [], []
        for i in range(request.num_candidates):
            t0 = time.perf_counter()
            raw, _ = rollout(policy, state, np.random.default_rng([request.seed, i]))
            texts.append(render_candidate_text(raw, min(self.target_tokens, request.max_tokens)))
            latencies.append(time.perf_counter() - t0)
        return GenerationResponse(texts, time.perf_counter() - started, self.name, latencies)


@dataclass(slots=True, frozen=True)
class RemoteSettings:
    url: str
    token: str | None = None
    model: str | None = None
    timeout_sec: float = DEFAULT_TIMEOUT_SEC
    retries: int = DEFAULT_RETRIES

    @classmethod
    def from_env(cls, overrides: Mapping[str, Any] | None = None) -> RemoteSettings:
        o = dict(overrides or {})
        url = o.get("url") or os.environ.get("LSABENCH_REMOTE_URL", "")
        if not url:
            raise BackendError("remote backend needs a url (config `url` or LSABENCH_REMOTE_URL)")
        try:
            timeout = float(o.get("timeout_sec", os.environ.get("LSABENCH_REMOTE_TIMEOUT_SEC", DEFAULT_TIMEOUT_SEC)))
            retries = int(o.get("retries", os.environ.get("LSABENCH_REMOTE_RETRIES", DEFAULT_RETRIES)))
        except ValueError as e:
            raise BackendError(f"invalid remote timeout/retries: {e}") from e
        if timeout <= 0 or retries < 0:
            raise BackendError("remote timeout must be > 0 and retries >= 0")
        return cls(
            url=str(url),
            token=o.get("token") or os.environ.get("LSABENCH_REMOTE_TOKEN") or None,
            model=o.get("model") or os.environ.get("LSABENCH_REMOTE_MODEL") or None,
            timeout_sec=timeout,
            retries=retries,
        )


class RemoteBackend:
    """JSON-over-HTTP completion endpoint.

    Request body: {"prompt", "max_tokens", "temperature", "n": 1[, "model", "seed"]}.
    Response body: {"choices": [{"text": ...}, ...]}; the first choice is used.
    """

    name = "remote"

    def __init__(self, settings: RemoteSettings, transport: httpx.BaseTransport | None = None):
        self.settings = settings
        headers = {"Authorization": f"Bearer {settings.token}"} if settings.token else {}
        self._client = httpx.Client(
            timeout=httpx.Timeout(settings.timeout_sec),
            headers=headers,
            transport=transport,
        )

    def close(self) -> None:
        self._client.close()

    def _body(self, request: GenerationRequest, index: int) -> dict[str, Any]:
        body: dict[str, Any] = {
            "prompt": request.prompt,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "n": 1,
            "seed": request.seed * 1000 + index,
        }
        if self.settings.model:
            body["model"] = self.settings.model
        return body

    @staticmethod
    def _extract_text(payload: Any) -> str:
        choices = payload.get("choices") if isinstance(payload, dict) else None
        if not isinstance(choices, list) or not choices:
            raise BackendProtocolError("response has no `choices` list")
        first = choices[0]
        text = first.get("text") if isinstance(first, dict) else None
        if not isinstance(text, str):
            raise BackendProtocolError("choices[0].text is not a string")
        return text

    def _one(self, request: GenerationRequest, index: int) -> str:
        last_error = "unknown"
        for attempt in range(1, self.settings.retries + 2):
            try:
                resp = self._client.post(self.settings.url, json=self._body(request, index))
            except httpx.TimeoutException as e:
                last_error = f"timeout after {self.settings.timeout_sec}s"
                if attempt > self.settings.retries:
                    raise BackendTimeout(f"remote call failed: {last_error}") from e
                continue
            except httpx.HTTPError as e:
                last_error = f"transport error: {e}"
                if attempt > self.settings.retries:
                    raise BackendProtocolError(f"remote call failed: {last_error}") from e
                continue

            if resp.status_code != 200:
                last_error = f"status={resp.status_code}; {resp.text[-500:]}"
                if attempt > self.settings.retries:
                    raise BackendProtocolError(f"remote call failed: {last_error}")
                continue
            try:
                payload = resp.json()
            except ValueError as e:
                raise BackendProtocolError(f"response is not JSON: {e}") from e
            return self._extract_text(payload)
        raise BackendProtocolError(f"remote call failed: {last_error}")

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        started = time.perf_counter()
        texts, latencies = [], []
        for i in range(request.num_candidates):
            t0 = time.perf_counter()
            texts.append(self._one(request, i))
            latencies.append(time.perf_counter() - t0)
        return GenerationResponse(texts, time.perf_counter() - started, self.name, latencies)


def generate(backend: Backend, request: GenerationRequest) -> GenerationResponse:
    response = backend.generate(request)
    if len(response.texts) != request.num_candidates:
        raise BackendProtocolError(
            f"{backend.name} returned {len(response.texts)} texts, expected {request.num_candidates}"
        )
    return response


def build_backend(spec: Mapping[str, Any], transport: httpx.BaseTransport | None = None) -> Backend:
    """Backend from a config mapping: {"kind": "mock" | "toy" | "remote", ...}."""
    kind = spec.get("kind")
    target = int(spec.get("target_tokens", DEFAULT_TARGET_TOKENS))
    if kind == "mock":
        return MockBackend(spec.get("proportions"), target_tokens=target)
    if kind == "toy":
        if "theta" in spec:
            policy = ToyPolicy(theta=np.asarray(spec["theta"], dtype=float), temperature=float(spec.get("temperature", 1.0)))
        else:
            policy = ToyPolicy.uniform(
                int(spec.get("num_buckets", 8)),
                int(spec.get("num_ranks", 32)),
                float(spec.get("temperature", 1.0)),
            )
        return ToyBackend(policy, target_tokens=target)
    if kind == "remote":
        return RemoteBackend(RemoteSettings.from_env(spec), transport=transport)
    raise BackendError(f"unknown backend kind {kind!r}")
