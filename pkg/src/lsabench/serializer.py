from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from string import Template
from typing import Literal, Mapping

import numpy as np

from .netenv import NetworkState, normalized_distance, power_vector, rate_submatrix, watts_to_dbm

TEMPLATE_VERSION = "v1"
MIN_BUDGET_TOKENS = 256
IDLE_LIST_CAP = 32
MIN_TOP_K = 4

DetailLevel = Literal["stats_only", "top_k", "full"]
DETAIL_RANK: dict[str, int] = {"stats_only": 0, "top_k": 1, "full": 2}

_FENCE_RE = re.compile(r"```[^\n`]*\n(.*?)```", re.S)
_ACTION_RE = re.compile(r"\baction\s*=\s*\{([^{}]*)\}")
_ENTRY_RE = re.compile(r"^(\d+)\s*:\s*(\d+)$")


class SerializerError(RuntimeError):
    pass


class BudgetTooSmall(SerializerError):
    pass


class NoActionFound(SerializerError):
    pass


class MalformedEntry(SerializerError):
    pass


@dataclass(slots=True, frozen=True)
class Stats:
    min: float
    max: float
    mean: float
    std: float

    @classmethod
    def of(cls, values: np.ndarray) -> Stats:
        if values.size == 0:
            return cls(0.0, 0.0, 0.0, 0.0)
        return cls(float(values.min()), float(values.max()), float(values.mean()), float(values.std()))


@dataclass(slots=True, frozen=True)
class StatSummary:
    k_t: int
    noise_density_dbm_hz: float
    idle_channel_ids: tuple[int, ...]
    idle_count: int
    power_stats: Stats
    bandwidth_stats: Stats


@dataclass(slots=True, frozen=True)
class PromptBundle:
    stats_block: str
    constraints_block: str
    schema_block: str
    token_estimate: int
    budget: int
    detail_level: DetailLevel
    top_k: int | None = None

    @property
    def prompt(self) -> str:
        return join_blocks(self.stats_block, self.constraints_block, self.schema_block)


@dataclass(slots=True, frozen=True)
class ParseOutcome:
    mapping: dict[int, int] | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.mapping is not None


def estimate_tokens(text: str) -> int:
    return math.ceil(len(text.encode("utf-8")) / 4)


def join_blocks(*blocks: str) -> str:
    return "\n\n".join(blocks)


@lru_cache(maxsize=None)
def load_template(name: str) -> Template:
    path = resources.files("lsabench") / "templates" / f"{name}_{TEMPLATE_VERSION}.txt"
    return Template(path.read_text(encoding="utf-8"))


def summarize_state(state: NetworkState) -> StatSummary:
    idle = state.idle_ids
    power = power_vector(state)
    # every active user appears once per idle channel in the K_t x |E_t| power block
    block = np.repeat(power, len(idle)) if len(idle) else np.empty(0)
    bandwidth = np.array([state.channel_by_id[c].bandwidth_hz for c in idle], dtype=float)
    return StatSummary(
        k_t=len(state.active_ids),
        noise_density_dbm_hz=state.link.noise_density_dbm_hz,
        idle_channel_ids=tuple(idle[:IDLE_LIST_CAP]),
        idle_count=len(idle),
        power_stats=Stats.of(block),
        bandwidth_stats=Stats.of(bandwidth),
    )


def _idle_list(summary: StatSummary) -> str:
    if not summary.idle_count:
        return "none"
    text = ", ".join(str(c) for c in summary.idle_channel_ids)
    hidden = summary.idle_count - len(summary.idle_channel_ids)
    return f"{text} (+{hidden} more)" if hidden > 0 else text


def _detail_rows(state: NetworkState, users: list[int], channels: list[int]) -> str:
    lines = ["### idle channels (id, bandwidth_hz)"]
    lines += [f"{c}, {state.channel_by_id[c].bandwidth_hz:.6e}" for c in channels]
    lines.append("### active users (id, d_norm, power_dbm)")
    power = power_vector(state, users)
    for u, p in zip(users, power):
        d = normalized_distance(state.user_by_id[u], state.link)
        lines.append(f"{u}, {d:.4f}, {watts_to_dbm(float(p)):.3f}")
    return "\n".join(lines)


def _top_users(state: NetworkState, k: int) -> list[int]:
    users, idle = list(state.active_ids), list(state.idle_ids)
    if not idle:
        return users[:k]
    best = rate_submatrix(state, users, idle).max(axis=1)
    order = np.lexsort((np.asarray(users), -best))
    return sorted(users[i] for i in order[:k])


def _stats_block(state: NetworkState, summary: StatSummary, level: str, detail: str) -> str:
    p, b = summary.power_stats, summary.bandwidth_stats
    return load_template("stats").substitute(
        slot=state.slot,
        k_t=summary.k_t,
        noise_density=f"{summary.noise_density_dbm_hz:.3f}",
        idle_count=summary.idle_count,
        idle_list=_idle_list(summary),
        p_min=f"{p.min:.6e}",
        p_max=f"{p.max:.6e}",
        p_mean=f"{p.mean:.6e}",
        p_std=f"{p.std:.6e}",
        b_min=f"{b.min:.6e}",
        b_max=f"{b.max:.6e}",
        b_mean=f"{b.mean:.6e}",
        b_std=f"{b.std:.6e}",
        detail_level=level,
        detail=detail,
    ).rstrip("\n")


def _detail_plan(state: NetworkState) -> list[tuple[DetailLevel, int | None]]:
    """Fixed most-to-least detailed sequence; the first one within budget wins.

    Only the per-user table shrinks; the idle-channel table stays complete until the
    statistics-only level.
    """
    plan: list[tuple[DetailLevel, int | None]] = [("full", None)]
    k = len(state.active_ids) // 2
    while k >= MIN_TOP_K:
        plan.append(("top_k", k))
        k //= 2
    plan.append(("stats_only", None))
    return plan


def serialize(state: NetworkState, budget_tokens: int) -> PromptBundle:
    if budget_tokens < MIN_BUDGET_TOKENS:
        raise BudgetTooSmall(f"budget {budget_tokens} is below the minimum of {MIN_BUDGET_TOKENS} tokens")
    summary = summarize_state(state)
    constraints = load_template("constraints").template.rstrip("\n")
    schema = load_template("schema").template.rstrip("\n")

    for level, k in _detail_plan(state):
        if level == "full":
            detail = _detail_rows(state, list(state.active_ids), list(state.idle_ids))
        elif level == "top_k":
            detail = _detail_rows(state, _top_users(state, k), list(state.idle_ids))
        else:
            detail = ""
        stats = _stats_block(state, summary, level, detail)
        estimate = estimate_tokens(join_blocks(stats, constraints, schema))
        if estimate <= budget_tokens:
            return PromptBundle(
                stats_block=stats,
                constraints_block=constraints,
                schema_block=schema,
                token_estimate=estimate,
                budget=budget_tokens,
                detail_level=level,
                top_k=k,
            )
    raise BudgetTooSmall(f"statistics-only prompt needs {estimate} tokens, budget is {budget_tokens}")


def render_action(mapping: Mapping[int, int]) -> str:
    body = ", ".join(f"{u}: {c}" for u, c in mapping.items())
    return f"```python\naction = {{{body}}}\n```"


def render_candidate_text(mapping: Mapping[int, int], target_tokens: int = 0) -> str:
    """Schema text preceded by reasoning lines until `target_tokens` is reached.

    The action block itself is never truncated.
    """
    action = render_action(mapping)
    lines: list[str] = []
    step = 0
    while estimate_tokens("\n".join([*lines, action])) < target_tokens:
        lines.append(f"# step {step}: rank idle channels by bandwidth and keep user/channel pairs exclusive")
        step += 1
    return "\n".join([*lines, action])


def parse_action(text: str) -> dict[int, int]:
    blocks = _FENCE_RE.findall(text)
    scope = blocks[-1] if blocks else text
    found = _ACTION_RE.findall(scope)
    if not found:
        raise NoActionFound("no `action = {...}` dictionary literal found")

    body = found[-1].strip()
    entries = [e.strip() for e in body.split(",")] if body else []
    if entries and entries[-1] == "":
        entries.pop()  # trailing comma
    mapping: dict[int, int] = {}
    for entry in entries:
        m = _ENTRY_RE.match(entry)
        if not m:
            raise MalformedEntry(f"entry {entry!r} is not `int: int`")
        mapping[int(m.group(1))] = int(m.group(2))
    return mapping


def try_parse_action(text: str) -> ParseOutcome:
    try:
        return ParseOutcome(mapping=parse_action(text))
    except SerializerError as e:
        return ParseOutcome(mapping=None, error=type(e).__name__)
