"""Group-relative policy optimization and SFT warm start on a toy categorical policy.

The policy assigns channels one active user at a time (ascending user id). Each
decision is a softmax over the channels still idle and unclaimed, with logits read
from `theta[bucket, rank]`: the bucket is the user's normalized distance cut into
equal-width bins, the rank orders idle channels by descending bandwidth (ties by id).
Sampling is without replacement, so every candidate is exclusivity-feasible.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Literal, Mapping, Sequence

import numpy as np

from .allocation import Allocation, slot_utility
from .netenv import EnvConfig, NetworkState, derive_seed, initial_state, normalized_distance
from .reward import RewardBreakdown, RewardWeights, reward_total
from .serializer import estimate_tokens, render_candidate_text
from .solvers import solve_hungarian

log = logging.getLogger(__name__)

DEFAULT_BUCKETS = 8
DEFAULT_RANKS = 32
DEFAULT_EPSILON = 1e-8
DEFAULT_LR = 0.05
DEFAULT_CLIP = 0.2
DEFAULT_BETA = 0.25
DEFAULT_GROUP = 8

RatioAnchor = Literal["old", "ref"]
Paradigm = Literal["grpo", "sft+grpo"]


class PolicyError(RuntimeError):
    pass


class UnreachableCandidate(PolicyError):
    pass


@dataclass(slots=True)
class ToyPolicy:
    theta: np.ndarray
    temperature: float = 1.0

    def __post_init__(self) -> None:
        self.theta = np.array(self.theta, dtype=float)
        if self.theta.ndim != 2 or 0 in self.theta.shape:
            raise PolicyError(f"theta must be a non-empty 2-D table, got shape {self.theta.shape}")
        if not np.all(np.isfinite(self.theta)):
            raise PolicyError("theta must be finite")
        if not self.temperature > 0:
            raise PolicyError("temperature must be > 0")

    @classmethod
    def uniform(
        cls,
        num_buckets: int = DEFAULT_BUCKETS,
        num_ranks: int = DEFAULT_RANKS,
        temperature: float = 1.0,
    ) -> ToyPolicy:
        return cls(theta=np.zeros((num_buckets, num_ranks)), temperature=temperature)

    @property
    def num_buckets(self) -> int:
        return int(self.theta.shape[0])

    @property
    def num_ranks(self) -> int:
        return int(self.theta.shape[1])

    def copy(self) -> ToyPolicy:
        return ToyPolicy(theta=self.theta.copy(), temperature=self.temperature)


@dataclass(slots=True)
class Candidate:
    raw_map: dict[int, int]
    rendered_text: str
    logprob_current: float
    logprob_ref: float
    reward: float = 0.0
    advantage: float = 0.0
    breakdown: RewardBreakdown | None = None


@dataclass(slots=True)
class CandidateGroup:
    candidates: list[Candidate]
    state_ref: int
    mu_r: float = 0.0
    sigma_r: float = 0.0

    @property
    def size(self) -> int:
        return len(self.candidates)


@dataclass(slots=True, frozen=True)
class GRPOConfig:
    group_size: int = DEFAULT_GROUP
    clip_eps: float = DEFAULT_CLIP
    beta: float = DEFAULT_BETA
    learning_rate: float = DEFAULT_LR
    epsilon: float = DEFAULT_EPSILON
    anchor: RatioAnchor = "ref"
    steps: int = 300
    target_tokens: int = 512

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise PolicyError("group_size must be >= 2")
        if not 0 < self.clip_eps < 1:
            raise PolicyError("clip_eps must be in (0, 1)")
        if self.beta < 0:
            raise PolicyError("beta must be >= 0")
        if self.steps < 1:
            raise PolicyError("steps must be >= 1")
        if self.anchor not in ("old", "ref"):
            raise PolicyError(f"unknown ratio anchor {self.anchor!r}")


@dataclass(slots=True, frozen=True)
class TraceRow:
    step: int
    total: float
    r_struct_mean: float
    r_perf_mean: float
    r_depth_mean: float


@dataclass(slots=True)
class TrainResult:
    policy: ToyPolicy
    ref_policy: ToyPolicy
    trace: list[TraceRow] = field(default_factory=list)
    elapsed: float = 0.0


@dataclass(slots=True, frozen=True)
class _Decision:
    bucket: int
    cols: np.ndarray
    chosen: int  # index into cols


def _bucket(policy: ToyPolicy, state: NetworkState, user: int) -> int:
    d = min(normalized_distance(state.user_by_id[user], state.link), 1.0)
    return min(int(d * policy.num_buckets), policy.num_buckets - 1)


def _ranked_idle(state: NetworkState) -> list[int]:
    return sorted(state.idle_ids, key=lambda c: (-state.channel_by_id[c].bandwidth_hz, c))


def _softmax(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    shifted = z - z.max()
    logp = shifted - math.log(float(np.exp(shifted).sum()))
    return np.exp(logp), logp


def _decision_logits(policy: ToyPolicy, d: _Decision) -> np.ndarray:
    return policy.theta[d.bucket, d.cols] / policy.temperature


def _trajectory(policy: ToyPolicy, state: NetworkState, raw_map: Mapping[int, int]) -> list[_Decision]:
    unknown = [u for u in raw_map if u not in state.active_set]
    if unknown:
        raise UnreachableCandidate(f"users {sorted(unknown)} are not active")
    ranked = _ranked_idle(state)
    rank_of = {c: r for r, c in enumerate(ranked)}
    remaining = list(ranked)
    out: list[_Decision] = []
    for u in sorted(state.active_ids):
        c = raw_map.get(u)
        if not remaining:
            if c is not None:
                raise UnreachableCandidate(f"user {u} -> {c}: no idle channel left")
            continue
        if c is None or c not in remaining:
            raise UnreachableCandidate(f"user {u} -> {c}: not an available idle channel")
        cols = np.minimum([rank_of[x] for x in remaining], policy.num_ranks - 1)
        out.append(_Decision(bucket=_bucket(policy, state, u), cols=cols, chosen=remaining.index(c)))
        remaining.remove(c)
    return out


def log_prob(policy: ToyPolicy, state: NetworkState, raw_map: Mapping[int, int]) -> float:
    total = 0.0
    for d in _trajectory(policy, state, raw_map):
        _, logp = _softmax(_decision_logits(policy, d))
        total += float(logp[d.chosen])
    return total


def rollout(
    policy: ToyPolicy,
    state: NetworkState,
    rng: np.random.Generator | None = None,
) -> tuple[dict[int, int], float]:
    """One candidate and its log-probability; `rng=None` takes the argmax at every decision."""
    ranked = _ranked_idle(state)
    rank_of = {c: r for r, c in enumerate(ranked)}
    remaining = list(ranked)
    raw: dict[int, int] = {}
    total = 0.0
    for u in sorted(state.active_ids):
        if not remaining:
            break
        cols = np.minimum([rank_of[x] for x in remaining], policy.num_ranks - 1)
        p, logp = _softmax(policy.theta[_bucket(policy, state, u), cols] / policy.temperature)
        if rng is None:
            k = int(np.argmax(p))
        else:
            cdf = np.cumsum(p)
            k = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), len(p) - 1)
        raw[u] = remaining.pop(k)
        total += float(logp[k])
    return raw, total


def greedy_rollout(policy: ToyPolicy, state: NetworkState) -> dict[int, int]:
    return rollout(policy, state, None)[0]


def sample_group(
    policy: ToyPolicy,
    state: NetworkState,
    g: int,
    seed: int,
    ref_policy: ToyPolicy | None = None,
    target_tokens: int = 0,
) -> CandidateGroup:
    if g < 2:
        raise PolicyError("g must be >= 2")
    ref = ref_policy if ref_policy is not None else policy
    candidates = []
    for i in range(g):
        raw, lp = rollout(policy, state, np.random.default_rng([seed, i]))
        candidates.append(
            Candidate(
                raw_map=raw,
                rendered_text=render_candidate_text(raw, target_tokens),
                logprob_current=lp,
                logprob_ref=lp if ref is policy else log_prob(ref, state, raw),
            )
        )
    return CandidateGroup(candidates=candidates, state_ref=state.slot)


def group_advantages(rewards: Sequence[float], epsilon: float = DEFAULT_EPSILON) -> list[float]:
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise PolicyError("need at least two rewards")
    if epsilon < 0:
        raise PolicyError("epsilon must be >= 0")
    sigma = float(r.std())
    if sigma + epsilon == 0:
        return [0.0] * r.size
    return list((r - r.mean()) / (sigma + epsilon))


def score_group(
    group: CandidateGroup,
    state: NetworkState,
    weights: RewardWeights,
    seed: int,
    epsilon: float = DEFAULT_EPSILON,
) -> CandidateGroup:
    """Reward every candidate on its raw text (no repair) and fill in advantages."""
    for i, cand in enumerate(group.candidates):
        cand.breakdown = reward_total(
            cand.rendered_text, state, weights, derive_seed(seed, i), estimate_tokens(cand.rendered_text)
        )
        cand.reward = cand.breakdown.total
    rewards = [c.reward for c in group.candidates]
    for cand, adv in zip(group.candidates, group_advantages(rewards, epsilon)):
        cand.advantage = adv
    group.mu_r = float(np.mean(rewards))
    group.sigma_r = float(np.std(rewards))
    return group


def clipped_term(ratio: float, advantage: float, clip_eps: float) -> float:
    clipped = min(max(ratio, 1.0 - clip_eps), 1.0 + clip_eps)
    return min(ratio * advantage, clipped * advantage)


def categorical_kl(p: np.ndarray, logp: np.ndarray, logq: np.ndarray) -> float:
    return max(0.0, float(np.sum(p * (logp - logq))))


def _objective_and_grad(
    group: CandidateGroup,
    policy: ToyPolicy,
    ref_policy: ToyPolicy,
    clip_eps: float,
    beta: float,
    state: NetworkState,
    anchor: RatioAnchor,
) -> tuple[float, np.ndarray]:
    if not 0 < clip_eps < 1:
        raise PolicyError("clip_eps must be in (0, 1)")
    if beta < 0:
        raise PolicyError("beta must be >= 0")
    grad = np.zeros_like(policy.theta)
    kl_grad = np.zeros_like(policy.theta)
    surrogate = 0.0
    kl_total = 0.0
    n_decisions = 0
    t, t_ref = policy.temperature, ref_policy.temperature

    for cand in group.candidates:
        decisions = _trajectory(policy, state, cand.raw_map)
        logp_now = 0.0
        score = np.zeros_like(policy.theta)
        for d in decisions:
            p, logp = _softmax(_decision_logits(policy, d))
            _, logq = _softmax(ref_policy.theta[d.bucket, d.cols] / t_ref)
            logp_now += float(logp[d.chosen])
            onehot = np.zeros_like(p)
            onehot[d.chosen] = 1.0
            np.add.at(score[d.bucket], d.cols, (onehot - p) / t)

            kl = categorical_kl(p, logp, logq)
            kl_total += kl
            n_decisions += 1
            np.add.at(kl_grad[d.bucket], d.cols, p * (logp - logq - kl) / t)

        # ref: pi_theta / pi_ref; old: pi_theta / the policy the group was sampled from
        base = cand.logprob_current if anchor == "old" else cand.logprob_ref
        ratio = math.exp(logp_now - base)
        term = clipped_term(ratio, cand.advantage, clip_eps)
        surrogate += term
        # the unclipped branch is active whenever it attains the minimum
        if ratio * cand.advantage <= term:
            grad += cand.advantage * ratio * score

    g = len(group.candidates)
    kl_mean = kl_total / n_decisions if n_decisions else 0.0
    value = surrogate / g - beta * kl_mean
    if n_decisions:
        grad = grad / g - beta * kl_grad / n_decisions
    else:
        grad = grad / g
    return value, grad


def grpo_objective(
    group: CandidateGroup,
    policy: ToyPolicy,
    ref_policy: ToyPolicy,
    clip_eps: float,
    beta: float,
    state: NetworkState,
    anchor: RatioAnchor = "ref",
) -> float:
    return _objective_and_grad(group, policy, ref_policy, clip_eps, beta, state, anchor)[0]


def grpo_gradient(
    group: CandidateGroup,
    policy: ToyPolicy,
    ref_policy: ToyPolicy,
    clip_eps: float,
    beta: float,
    state: NetworkState,
    anchor: RatioAnchor = "ref",
) -> np.ndarray:
    return _objective_and_grad(group, policy, ref_policy, clip_eps, beta, state, anchor)[1]


def grpo_step(
    policy: ToyPolicy,
    group: CandidateGroup,
    ref_policy: ToyPolicy,
    clip_eps: float,
    beta: float,
    learning_rate: float,
    state: NetworkState,
    anchor: RatioAnchor = "ref",
) -> ToyPolicy:
    grad = grpo_gradient(group, policy, ref_policy, clip_eps, beta, state, anchor)
    return replace(policy, theta=policy.theta + learning_rate * grad)


def sft_objective(policy: ToyPolicy, expert_pairs: Sequence[tuple[NetworkState, Mapping[int, int]]]) -> float:
    return math.fsum(log_prob(policy, state, raw) for state, raw in expert_pairs)


def sft_gradient(policy: ToyPolicy, expert_pairs: Sequence[tuple[NetworkState, Mapping[int, int]]]) -> np.ndarray:
    grad = np.zeros_like(policy.theta)
    for state, raw in expert_pairs:
        for d in _trajectory(policy, state, raw):
            p, _ = _softmax(_decision_logits(policy, d))
            onehot = np.zeros_like(p)
            onehot[d.chosen] = 1.0
            np.add.at(grad[d.bucket], d.cols, (onehot - p) / policy.temperature)
    return grad


def sft_update(
    policy: ToyPolicy,
    expert_pairs: Sequence[tuple[NetworkState, Mapping[int, int]]],
    learning_rate: float,
) -> ToyPolicy:
    return replace(policy, theta=policy.theta + learning_rate * sft_gradient(policy, expert_pairs))


def expert_dataset(config: EnvConfig, n: int, seed: int) -> list[tuple[NetworkState, dict[int, int]]]:
    """Hungarian-optimal maps on fresh states, completed to be reachable by the sampler.

    When channels are scarce the Hungarian solution leaves users unserved; the sampler
    always serves users in id order while channels remain, so such states are skipped.
    """
    pairs = []
    for i in range(n):
        state = initial_state(config, derive_seed(seed, i))
        expert = dict(solve_hungarian(state).allocation.assignment)
        if len(expert) == min(len(state.active_ids), len(state.idle_ids)) and _is_reachable(state, expert):
            pairs.append((state, expert))
    return pairs


def _is_reachable(state: NetworkState, raw: Mapping[int, int]) -> bool:
    try:
        _trajectory(ToyPolicy.uniform(1, 1), state, raw)
    except UnreachableCandidate:
        return False
    return True


def evaluate_policy(policy: ToyPolicy, config: EnvConfig, seeds: Sequence[int]) -> float:
    """Mean greedy-rollout throughput over unseen topologies, no parameter updates."""
    if not seeds:
        raise PolicyError("need at least one seed")
    values = []
    for s in seeds:
        state = initial_state(config, s)
        alloc = Allocation(assignment=greedy_rollout(policy, state), slot=state.slot)
        values.append(slot_utility(alloc, state))
    return float(np.mean(values))


def train(
    policy: ToyPolicy,
    config: EnvConfig,
    weights: RewardWeights,
    steps: int,
    g: int,
    clip_eps: float,
    beta: float,
    lr: float,
    seed: int,
    *,
    ref_policy: ToyPolicy | None = None,
    anchor: RatioAnchor = "ref",
    epsilon: float = DEFAULT_EPSILON,
    target_tokens: int = 512,
) -> TrainResult:
    if steps < 1:
        raise PolicyError("steps must be >= 1")
    ref = (ref_policy if ref_policy is not None else policy).copy()
    current = policy.copy()
    started = time.perf_counter()
    trace: list[TraceRow] = []
    for step in range(steps):
        state = initial_state(config, derive_seed(seed, step))
        group = sample_group(current, state, g, derive_seed(seed, step, 1), ref, target_tokens)
        score_group(group, state, weights, derive_seed(seed, step, 2), epsilon)
        parts = [c.breakdown for c in group.candidates]
        trace.append(
            TraceRow(
                step=step,
                total=float(np.mean([b.total for b in parts])),
                r_struct_mean=float(np.mean([b.r_struct for b in parts])),
                r_perf_mean=float(np.mean([b.r_perf for b in parts])),
                r_depth_mean=float(np.mean([b.r_depth for b in parts])),
            )
        )
        current = grpo_step(current, group, ref, clip_eps, beta, lr, state, anchor)
        if step % 50 == 0:
            log.debug("step %d total=%.4f", step, trace[-1].total)
    return TrainResult(policy=current, ref_policy=ref, trace=trace, elapsed=time.perf_counter() - started)


def align(
    paradigm: Paradigm,
    config: EnvConfig,
    weights: RewardWeights,
    grpo: GRPOConfig,
    seed: int,
    *,
    policy: ToyPolicy | None = None,
    sft_steps: int = 50,
    sft_samples: int = 32,
    sft_lr: float = DEFAULT_LR,
) -> TrainResult:
    """`grpo` anchors the KL on the initial policy; `sft+grpo` warm-starts on expert maps
    and anchors on the post-SFT policy."""
    start = policy.copy() if policy is not None else ToyPolicy.uniform()
    if paradigm == "sft+grpo":
        pairs = expert_dataset(config, sft_samples, derive_seed(seed, 7))
        if not pairs:
            raise PolicyError("expert dataset is empty")
        for _ in range(sft_steps):
            start = sft_update(start, pairs, sft_lr / len(pairs))
        log.info("sft warm start: %d steps on %d expert maps", sft_steps, len(pairs))
    elif paradigm != "grpo":
        raise PolicyError(f"unknown paradigm {paradigm!r}")
    return train(
        start,
        config,
        weights,
        grpo.steps,
        grpo.group_size,
        grpo.clip_eps,
        grpo.beta,
        grpo.learning_rate,
        seed,
        ref_policy=start,
        anchor=grpo.anchor,
        epsilon=grpo.epsilon,
        target_tokens=grpo.target_tokens,
    )
