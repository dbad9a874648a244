"""Classical baseline allocators sharing one result type.

All solvers work on the K_t x |E_t| block of the rate matrix (active users x idle
channels) and return feasible allocations whose objective is `slot_utility`.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment

from .allocation import Allocation, is_feasible, slot_utility
from .netenv import NetworkState, rate_submatrix

DEFAULT_MAX_ENUMERATION = 500_000
DE_POP_SIZE = 50
DE_CROSSOVER = 0.9
DE_WEIGHT = 0.5
_ENUM_CHUNK = 4096


class SolverError(RuntimeError):
    pass


class SizeExceeded(SolverError):
    pass


@dataclass(slots=True)
class SolveResult:
    allocation: Allocation
    objective: float
    elapsed: float
    solver_name: str
    iterations: int = 1
    partial: bool = False


def _block(state: NetworkState) -> tuple[list[int], list[int], np.ndarray]:
    users = list(state.active_ids)
    channels = list(state.idle_ids)
    return users, channels, rate_submatrix(state, users, channels)


def _finish(
    name: str,
    state: NetworkState,
    pairs: dict[int, int],
    started: float,
    iterations: int = 1,
) -> SolveResult:
    alloc = Allocation(assignment={u: pairs[u] for u in sorted(pairs)}, slot=state.slot)
    report = is_feasible(alloc, state)
    if not report.feasible:
        raise SolverError(f"{name} produced an infeasible allocation: {report.violations}")
    return SolveResult(
        allocation=alloc,
        objective=slot_utility(alloc, state),
        elapsed=time.perf_counter() - started,
        solver_name=name,
        iterations=iterations,
        partial=len(alloc.assignment) < len(state.active_ids),
    )


def _block_objective(rates: np.ndarray, pairs: dict[int, int], users: list[int], channels: list[int]) -> float:
    ui = {u: i for i, u in enumerate(users)}
    cj = {c: j for j, c in enumerate(channels)}
    return math.fsum(float(rates[ui[u], cj[c]]) for u, c in sorted(pairs.items()))


def solve_random(seed: int, state: NetworkState) -> SolveResult:
    started = time.perf_counter()
    rng = np.random.default_rng(seed)
    users = list(state.active_ids)
    channels = np.array(state.idle_ids, dtype=np.int64)
    if len(channels) >= len(users):
        picked = rng.permutation(channels)[: len(users)]
        pairs = {u: int(c) for u, c in zip(users, picked)}
    else:
        served = rng.permutation(np.array(users, dtype=np.int64))[: len(channels)]
        pairs = {int(u): int(c) for u, c in zip(served, rng.permutation(channels))}
    return _finish("random", state, pairs, started)


def enumeration_size(n_users: int, n_channels: int) -> int:
    k, n = min(n_users, n_channels), max(n_users, n_channels)
    return math.perm(n, k)


def solve_exhaustive(state: NetworkState, max_size: int = DEFAULT_MAX_ENUMERATION) -> SolveResult:
    started = time.perf_counter()
    users, channels, rates = _block(state)
    size = enumeration_size(len(users), len(channels))
    if size > max_size:
        raise SizeExceeded(
            f"{len(users)} users x {len(channels)} idle channels needs {size} injective maps (> {max_size})"
        )
    if not users or not channels:
        return _finish("exhaustive", state, {}, started, iterations=0)

    # Enumerate the smaller side into ordered selections of the larger side.
    transpose = len(users) > len(channels)
    table = rates.T if transpose else rates
    rows = np.arange(table.shape[0])
    best_value = -math.inf
    best_perm: tuple[int, ...] = ()
    perms = itertools.permutations(range(table.shape[1]), table.shape[0])
    while True:
        chunk = list(itertools.islice(perms, _ENUM_CHUNK))
        if not chunk:
            break
        idx = np.array(chunk, dtype=np.int64)
        values = table[rows, idx].sum(axis=1)
        k = int(np.argmax(values))  # first maximum keeps the lexicographic tie-break
        if values[k] > best_value:
            best_value = float(values[k])
            best_perm = chunk[k]

    if transpose:
        pairs = {users[j]: channels[i] for i, j in enumerate(best_perm)}
    else:
        pairs = {users[i]: channels[j] for i, j in enumerate(best_perm)}
    return _finish("exhaustive", state, pairs, started, iterations=size)


def _hungarian_block(rates: np.ndarray) -> list[tuple[int, int]]:
    n_rows, n_cols = rates.shape
    if n_rows == 0 or n_cols == 0:
        return []
    padded = rates
    if n_rows > n_cols:
        # zero-weight dummy columns mean "unserved"
        padded = np.hstack([rates, np.zeros((n_rows, n_rows - n_cols))])
    row_ind, col_ind = linear_sum_assignment(padded, maximize=True)
    return [(int(r), int(c)) for r, c in zip(row_ind, col_ind) if c < n_cols]


def solve_hungarian(state: NetworkState) -> SolveResult:
    started = time.perf_counter()
    users, channels, rates = _block(state)
    if users and not channels:
        raise SolverError("hungarian needs at least one idle channel")
    pairs = {users[i]: channels[j] for i, j in _hungarian_block(rates)}
    return _finish("hungarian", state, pairs, started)


def _grouped_pass(
    rates: np.ndarray,
    users: list[int],
    channels: list[int],
    group_size: int,
    rng: np.random.Generator | None,
) -> dict[int, int]:
    u_order = np.arange(len(users)) if rng is None else rng.permutation(len(users))
    c_order = np.arange(len(channels)) if rng is None else rng.permutation(len(channels))
    n_blocks = max(1, math.ceil(len(users) / group_size))
    pairs: dict[int, int] = {}
    for u_blk, c_blk in zip(np.array_split(u_order, n_blocks), np.array_split(c_order, n_blocks)):
        sub = rates[np.ix_(u_blk, c_blk)]
        for i, j in _hungarian_block(sub):
            pairs[users[int(u_blk[i])]] = channels[int(c_blk[j])]
    return pairs


def solve_grouped_hungarian(
    state: NetworkState,
    budget: float,
    group_size: int,
    seed: int = 0,
    max_iterations: int | None = None,
) -> SolveResult:
    """Partitioned KM: disjoint user/channel blocks solved independently and stitched.

    Keeps re-partitioning at random while wall-clock time remains under `budget`
    (and below `max_iterations` when given), returning the best stitched allocation.
    At least one pass always runs.
    """
    if not budget > 0:
        raise SolverError("budget must be > 0")
    if group_size < 1:
        raise SolverError("group_size must be >= 1")
    started = time.perf_counter()
    users, channels, rates = _block(state)
    if len(users) <= group_size:
        pairs = {users[i]: channels[j] for i, j in _hungarian_block(rates)}
        return _finish("grouped_hungarian", state, pairs, started)

    best = _grouped_pass(rates, users, channels, group_size, np.random.default_rng([seed, 0]))
    best_value = _block_objective(rates, best, users, channels)
    iterations = 1
    while time.perf_counter() - started < budget:
        if max_iterations is not None and iterations >= max_iterations:
            break
        candidate = _grouped_pass(rates, users, channels, group_size, np.random.default_rng([seed, iterations]))
        value = _block_objective(rates, candidate, users, channels)
        iterations += 1
        if value > best_value:
            best, best_value = candidate, value
    return _finish("grouped_hungarian", state, best, started, iterations=iterations)


def _decode(genomes: np.ndarray, n_slots: int) -> np.ndarray:
    """Random-key decoding: user ranked r by gene value takes the r-th preferred channel.

    Returns, per genome, the preferred-channel position of each user (-1 = unserved).
    """
    ranks = np.argsort(np.argsort(genomes, axis=1, kind="stable"), axis=1, kind="stable")
    return np.where(ranks < n_slots, ranks, -1)


def solve_de(
    seed: int,
    state: NetworkState,
    pop_size: int = DE_POP_SIZE,
    crossover_rate: float = DE_CROSSOVER,
    generations: int = 200,
    budget: float | None = None,
    differential_weight: float = DE_WEIGHT,
) -> SolveResult:
    """DE/rand/1/bin over continuous genomes of length K_t.

    Idle channels are ordered by the best rate any active user gets on them (ties by
    id); genomes are decoded by rank order into that list.
    """
    if pop_size < 4:
        raise SolverError("pop_size must be >= 4")
    if not 0 <= crossover_rate <= 1:
        raise SolverError("crossover_rate must be in [0, 1]")
    started = time.perf_counter()
    users, channels, rates = _block(state)
    if not users or not channels:
        return _finish("de", state, {}, started, iterations=0)

    k = len(users)
    best_rate = rates.max(axis=0)
    pref = np.lexsort((np.asarray(channels), -best_rate))
    pref_rates = rates[:, pref]
    n_slots = min(k, len(channels))
    rows = np.arange(k)

    def fitness(pop: np.ndarray) -> np.ndarray:
        pos = _decode(pop, n_slots)
        gathered = np.where(pos >= 0, pref_rates[rows, np.maximum(pos, 0)], 0.0)
        return gathered.sum(axis=1)

    rng = np.random.default_rng(seed)
    pop = rng.random((pop_size, k))
    fit = fitness(pop)
    done = 0
    for _ in range(generations):
        if budget is not None and time.perf_counter() - started >= budget:
            break
        idx = np.arange(pop_size)
        r = np.empty((pop_size, 3), dtype=np.int64)
        for i in idx:
            r[i] = rng.choice(np.delete(idx, i), size=3, replace=False)
        mutant = np.clip(pop[r[:, 0]] + differential_weight * (pop[r[:, 1]] - pop[r[:, 2]]), 0.0, 1.0)
        cross = rng.random((pop_size, k)) < crossover_rate
        cross[idx, rng.integers(0, k, size=pop_size)] = True
        trial = np.where(cross, mutant, pop)
        trial_fit = fitness(trial)
        better = trial_fit >= fit
        pop[better] = trial[better]
        fit[better] = trial_fit[better]
        done += 1

    best = pop[int(np.argmax(fit))]
    pos = _decode(best[None, :], n_slots)[0]
    pairs = {users[i]: channels[int(pref[p])] for i, p in enumerate(pos) if p >= 0}
    return _finish("de", state, pairs, started, iterations=done)


SolverFn = Callable[..., SolveResult]

SOLVERS: dict[str, SolverFn] = {
    "random": solve_random,
    "exhaustive": solve_exhaustive,
    "hungarian": solve_hungarian,
    "grouped_hungarian": solve_grouped_hungarian,
    "de": solve_de,
}
