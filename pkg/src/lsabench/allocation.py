from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np

from .netenv import NetworkState, rate_matrix

ViolationKind = Literal[
    "DuplicateChannel",
    "OccupiedChannel",
    "UnknownUser",
    "UnknownChannel",
    "MultiAssignment",
]


class AllocationError(RuntimeError):
    pass


class InfeasibleAllocation(AllocationError):
    pass


@dataclass(slots=True)
class Allocation:
    """User -> channel mapping for one slot (x_uc = 1 iff assignment[u] == c)."""

    assignment: dict[int, int] = field(default_factory=dict)
    slot: int = 0

    def pairs(self) -> list[tuple[int, int]]:
        return sorted(self.assignment.items())


@dataclass(slots=True, frozen=True)
class Violation:
    kind: ViolationKind
    subject: int


@dataclass(slots=True)
class FeasibilityReport:
    feasible: bool
    violations: list[Violation]

    def kinds(self) -> Counter[str]:
        return Counter(v.kind for v in self.violations)


def check_pairs(pairs: Iterable[tuple[int, int]], state: NetworkState) -> FeasibilityReport:
    """Check raw (user, channel) pairs against the assignment constraints.

    User-side violations carry the user id, channel-side ones the channel id.
    """
    pairs = list(pairs)
    violations: list[Violation] = []

    user_counts = Counter(u for u, _ in pairs)
    for u in sorted(user_counts):
        if u not in state.active_set:
            violations.append(Violation("UnknownUser", u))
        if user_counts[u] > 1:
            violations.append(Violation("MultiAssignment", u))

    channel_counts = Counter(c for _, c in pairs)
    for c in sorted(channel_counts):
        spec = state.channel_by_id.get(c)
        if spec is None:
            violations.append(Violation("UnknownChannel", c))
            continue
        if spec.occupied:
            violations.append(Violation("OccupiedChannel", c))
        if channel_counts[c] > 1:
            violations.append(Violation("DuplicateChannel", c))

    return FeasibilityReport(feasible=not violations, violations=violations)


def is_feasible(alloc: Allocation, state: NetworkState) -> FeasibilityReport:
    return check_pairs(alloc.assignment.items(), state)


def _pair_rates(pairs: Iterable[tuple[int, int]], state: NetworkState, rates: np.ndarray | None) -> list[float]:
    rates = rate_matrix(state) if rates is None else rates
    out: list[float] = []
    for u, c in sorted(pairs):
        i = state.active_index.get(u)
        j = state.channel_index.get(c)
        if i is None or j is None:
            continue
        out.append(float(rates[i, j]))
    return out


def linear_utility(alloc: Allocation, state: NetworkState, rates: np.ndarray | None = None) -> float:
    """Sum of x_uc * R_uc over known pairs, without feasibility checks."""
    return math.fsum(_pair_rates(alloc.assignment.items(), state, rates))


def slot_utility(alloc: Allocation, state: NetworkState, rates: np.ndarray | None = None) -> float:
    report = is_feasible(alloc, state)
    if not report.feasible:
        raise InfeasibleAllocation(
            f"slot {state.slot}: " + ", ".join(f"{v.kind}({v.subject})" for v in report.violations)
        )
    return linear_utility(alloc, state, rates)


def lenient_throughput(raw: Mapping[int, int], state: NetworkState, rates: np.ndarray | None = None) -> float:
    """Throughput of a raw candidate: pairs that are not active-user -> idle-channel count 0."""
    valid = [(u, c) for u, c in raw.items() if u in state.active_set and c in state.idle_set]
    return math.fsum(_pair_rates(valid, state, rates))


def episode_utility(slot_utilities: Sequence[float], gamma: float) -> float:
    if not 0 <= gamma <= 1:
        raise AllocationError("gamma must be in [0, 1]")
    # gamma ** 0 == 1 also for gamma == 0
    return math.fsum(gamma**t * u for t, u in enumerate(slot_utilities))


def quadratic_utility(
    alloc: Allocation,
    state: NetworkState,
    eta: float,
    interference: np.ndarray,
) -> float:
    """Interference-aware utility: linear sum-rate minus eta * sum_{u != u'} sum_c x x I.

    `interference` is indexed by active-user order, shape (K, K) or (K, K, C). Ordered
    pairs are counted, so each co-channel pair contributes twice.
    """
    k = len(state.active_ids)
    interference = np.asarray(interference, dtype=float)
    if interference.shape[:2] != (k, k) or interference.ndim not in (2, 3):
        raise AllocationError(f"interference must have shape ({k}, {k}) or ({k}, {k}, C)")
    if interference.ndim == 3 and interference.shape[2] != len(state.channels):
        raise AllocationError("interference channel axis must match state.channels")

    penalty = 0.0
    if eta:
        by_channel: dict[int, list[int]] = {}
        for u, c in alloc.assignment.items():
            if u in state.active_index and c in state.channel_index:
                by_channel.setdefault(c, []).append(state.active_index[u])
        terms: list[float] = []
        for c, rows in by_channel.items():
            j = state.channel_index[c]
            for a in rows:
                for b in rows:
                    if a == b:
                        continue
                    terms.append(interference[a, b, j] if interference.ndim == 3 else interference[a, b])
        penalty = math.fsum(terms)
    return linear_utility(alloc, state) - eta * penalty
