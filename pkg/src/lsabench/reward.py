"""Execution-aware reward on raw candidates.

The reward is computed on what the generator emitted; repair is never applied here.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Mapping

from .allocation import lenient_throughput
from .netenv import NetworkState, power_vector
from .serializer import ParseOutcome, estimate_tokens, try_parse_action
from .solvers import solve_random

PSI_DUPLICATE = 0.0
PSI_INTERFERENCE = 0.3
PSI_CLEAN = 1.0
# co-channel power above this multiple of the channel noise power counts as interference
DEFAULT_INTERFERENCE_NOISE_MULTIPLE = 10.0


class RewardError(RuntimeError):
    pass


@dataclass(slots=True, frozen=True)
class RewardWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    omega: float = 5.0
    kappa: float = 5.0
    l_thr: int = 512
    clamp_lo: float = -10.0
    clamp_hi: float = 10.0
    interference_threshold: float | None = None
    struct_parse: float = 0.4
    struct_domain: float = 0.4
    struct_context: float = 0.4
    struct_cap: float = 1.2

    def __post_init__(self) -> None:
        if self.l_thr <= 0:
            raise RewardError("l_thr must be > 0")
        if not self.clamp_lo < self.clamp_hi:
            raise RewardError("clamp_lo must be < clamp_hi")
        if not (self.omega > 0 and self.kappa > 0):
            raise RewardError("omega and kappa must be > 0")


WEIGHT_PRESETS: dict[str, RewardWeights] = {
    "baseline": RewardWeights(),
    "struct_prioritized": RewardWeights(lambda1=2.0),
    "perf_overweighted": RewardWeights(lambda2=2.0),
    "depth_regularized": RewardWeights(lambda3=2.0),
    "no_struct": RewardWeights(lambda1=0.0),
    "no_depth": RewardWeights(lambda3=0.0),
}


@dataclass(slots=True, frozen=True)
class PerfScore:
    value: float
    psi: float
    degenerate_baseline: bool = False


@dataclass(slots=True, frozen=True)
class RewardBreakdown:
    r_struct: float
    r_perf: float
    r_depth: float
    total: float
    psi: float
    parse_error: str | None = None
    degenerate_baseline: bool = False


def _clamp(value: float, lo: float, hi: float) -> float:
    return min(hi, max(lo, value))


def reward_struct(
    text: str,
    parse_outcome: ParseOutcome,
    state: NetworkState,
    weights: RewardWeights = RewardWeights(),
) -> float:
    if not parse_outcome.ok:
        return 0.0
    mapping = parse_outcome.mapping
    score = weights.struct_parse
    if all(u in state.active_set for u in mapping) and all(c in state.channel_by_id for c in mapping.values()):
        score += weights.struct_domain
    if all(c in state.idle_set for c in mapping.values()):
        score += weights.struct_context
    return min(score, weights.struct_cap)


def psi_penalty(raw: Mapping[int, int], state: NetworkState, threshold: float | None = None) -> float:
    """0 for duplicate channels, 0.3 when co-channel power on a primary channel exceeds
    the threshold, 1 otherwise. A None threshold means 10 x the channel noise power."""
    counts = Counter(raw.values())
    if any(n > 1 for n in counts.values()):
        return PSI_DUPLICATE

    on_primary = [
        (u, c)
        for u, c in raw.items()
        if u in state.user_by_id and c in state.channel_by_id and state.channel_by_id[c].occupied
    ]
    if on_primary:
        powers = power_vector(state, [u for u, _ in on_primary])
        for (_, c), p in zip(on_primary, powers):
            limit = threshold
            if limit is None:
                noise = state.link.noise_density_w_hz * state.channel_by_id[c].bandwidth_hz
                limit = DEFAULT_INTERFERENCE_NOISE_MULTIPLE * noise
            if p > limit:
                return PSI_INTERFERENCE
    return PSI_CLEAN


def reward_perf(
    raw: Mapping[int, int] | None,
    state: NetworkState,
    seed: int,
    weights: RewardWeights = RewardWeights(),
) -> PerfScore:
    if not raw:
        return PerfScore(value=0.0, psi=PSI_CLEAN if raw is not None else PSI_DUPLICATE)
    psi = psi_penalty(raw, state, weights.interference_threshold)
    baseline = solve_random(seed, state).objective
    if baseline <= 0:
        return PerfScore(value=0.0, psi=psi, degenerate_baseline=True)
    ratio = lenient_throughput(raw, state) / baseline
    value = weights.omega * (ratio - 1.0) * psi
    return PerfScore(value=_clamp(value, weights.clamp_lo, weights.clamp_hi), psi=psi)


def reward_depth(output_tokens: int, weights: RewardWeights = RewardWeights()) -> float:
    if output_tokens < 0:
        raise RewardError("output_tokens must be >= 0")
    shortfall = (weights.l_thr - output_tokens) / weights.l_thr
    return -max(0.0, shortfall * weights.kappa)


def reward_total(
    text: str,
    state: NetworkState,
    weights: RewardWeights,
    seed: int,
    output_tokens: int | None = None,
) -> RewardBreakdown:
    parsed = try_parse_action(text)
    r_struct = reward_struct(text, parsed, state, weights)
    perf = reward_perf(parsed.mapping, state, seed, weights)
    tokens = estimate_tokens(text) if output_tokens is None else output_tokens
    r_depth = reward_depth(tokens, weights)
    total = weights.lambda1 * r_struct + weights.lambda2 * perf.value + weights.lambda3 * r_depth
    return RewardBreakdown(
        r_struct=r_struct,
        r_perf=perf.value,
        r_depth=r_depth,
        total=_clamp(total, weights.clamp_lo, weights.clamp_hi),
        psi=perf.psi,
        parse_error=parsed.error,
        degenerate_baseline=perf.degenerate_baseline,
    )
