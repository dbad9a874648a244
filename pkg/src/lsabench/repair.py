"""Deterministic repair of raw user -> channel mappings.

Three stages: drop pairs that are not active-user -> idle-channel, resolve contended
channels winner-take-all by rate, then fill unserved users into residual idle channels
best-rate-first. Ties always go to the lowest user id, then the lowest channel id.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .allocation import Allocation
from .netenv import NetworkState, rate_submatrix


@dataclass(slots=True)
class RepairOutcome:
    allocation: Allocation
    kept_suggestions: int = 0
    contention_events: int = 0
    greedy_fills: int = 0
    unserved: list[int] = field(default_factory=list)
    invalid_entries: int = 0
    contention_losers: int = 0


def idle_channels(state: NetworkState) -> list[int]:
    return list(state.idle_ids)


def _is_id(value: object) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _greedy_fill(state: NetworkState, users: list[int], channels: list[int]) -> list[tuple[int, int]]:
    if not users or not channels:
        return []
    rates = rate_submatrix(state, users, channels)
    rows, cols = np.indices(rates.shape)
    # lexsort: last key is primary -> rate desc, then user id asc, then channel id asc
    order = np.lexsort(
        (
            np.asarray(channels)[cols].ravel(),
            np.asarray(users)[rows].ravel(),
            -rates.ravel(),
        )
    )
    taken_u: set[int] = set()
    taken_c: set[int] = set()
    out: list[tuple[int, int]] = []
    limit = min(len(users), len(channels))
    for flat in order:
        i, j = divmod(int(flat), len(channels))
        u, c = users[i], channels[j]
        if u in taken_u or c in taken_c:
            continue
        taken_u.add(u)
        taken_c.add(c)
        out.append((u, c))
        if len(out) == limit:
            break
    return out


def repair(raw: Mapping[int, int], state: NetworkState) -> RepairOutcome:
    # stage 1: filter
    claims: dict[int, list[int]] = {}
    invalid = 0
    for u, c in raw.items():
        if not (_is_id(u) and _is_id(c)) or u not in state.active_set or c not in state.idle_set:
            invalid += 1
            continue
        claims.setdefault(c, []).append(u)

    # stage 2: winner-take-all per contended channel
    assignment: dict[int, int] = {}
    kept = 0
    contention_events = 0
    losers = 0
    for c in sorted(claims):
        claimants = sorted(claims[c])
        if len(claimants) == 1:
            assignment[claimants[0]] = c
            kept += 1
            continue
        contention_events += 1
        rates = rate_submatrix(state, claimants, [c])[:, 0]
        # argmax returns the first maximum, i.e. the lowest user id on ties
        winner = claimants[int(np.argmax(rates))]
        assignment[winner] = c
        kept += 1
        losers += len(claimants) - 1

    # stage 3: best-rate-first fill of the residual
    used = set(assignment.values())
    unserved = [u for u in state.active_ids if u not in assignment]
    residual = [c for c in state.idle_ids if c not in used]
    fills = _greedy_fill(state, sorted(unserved), residual)
    for u, c in fills:
        assignment[u] = c

    ordered = {u: assignment[u] for u in sorted(assignment)}
    left = sorted(u for u in state.active_ids if u not in ordered)
    return RepairOutcome(
        allocation=Allocation(assignment=ordered, slot=state.slot),
        kept_suggestions=kept,
        contention_events=contention_events,
        greedy_fills=len(fills),
        unserved=left,
        invalid_entries=invalid,
        contention_losers=losers,
    )
