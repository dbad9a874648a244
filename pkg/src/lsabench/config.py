"""JSON experiment configs: scenarios, methods, training variants.

Errors carry the dotted path of the offending field, or `path:line:col` for JSON syntax.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .grpo import GRPOConfig, PolicyError
from .netenv import LINK_PROFILES, EnvConfig, LinkParams, NetEnvError
from .reward import WEIGHT_PRESETS, RewardError, RewardWeights
from .serializer import MIN_BUDGET_TOKENS
from .solvers import SOLVERS

log = logging.getLogger(__name__)

DEFAULT_SLOTS = 100
DEFAULT_BUDGET_TOKENS = 2048
GENERATIVE_METHODS = {"lsa"}
SHAPE_NOTE = "shape-matched, magnitudes not reproducible"

# (U, C, K) readings of the small-to-medium comparison columns and the ultra-dense scales.
PRESETS: dict[str, tuple[int, int, int]] = {
    "small-5-5-1": (5, 5, 1),
    "small-7-10-2": (7, 10, 2),
    "small-10-15-3": (10, 15, 3),
    "small-15-20-4": (15, 20, 4),
    "small-5-5-2": (5, 5, 2),
    "small-8-10-4": (8, 10, 4),
    "small-12-15-6": (12, 15, 6),
    "small-15-20-8": (15, 20, 8),
    "scale-1": (1000, 1000, 200),
    "scale-2": (1500, 1500, 300),
    "scale-3": (2000, 2000, 400),
}


class ConfigError(RuntimeError):
    pass


@dataclass(slots=True, frozen=True)
class ScenarioConfig:
    id: str
    num_users: int
    num_channels: int
    k_active: int
    slots: int = DEFAULT_SLOTS
    gamma: float = 1.0
    occupied_fraction: float = 0.0
    link: LinkParams = field(default_factory=LinkParams)
    note: str = ""

    def __post_init__(self) -> None:
        if self.k_active > self.num_users:
            raise ConfigError(f"{self.id}: k_active {self.k_active} exceeds num_users {self.num_users}")
        if self.slots < 1:
            raise ConfigError(f"{self.id}: slots must be >= 1")
        if not 0 <= self.gamma <= 1:
            raise ConfigError(f"{self.id}: gamma must be in [0, 1]")
        expected_idle = self.num_channels - int(self.occupied_fraction * self.num_channels)
        if self.k_active > expected_idle:
            log.warning("%s: k_active %d exceeds the %d expected idle channels", self.id, self.k_active, expected_idle)

    def env(self) -> EnvConfig:
        try:
            return EnvConfig.fixed(
                self.num_users,
                self.num_channels,
                self.k_active,
                occupied_fraction=self.occupied_fraction,
                link=self.link,
            )
        except NetEnvError as e:
            raise ConfigError(f"{self.id}: {e}") from e


@dataclass(slots=True, frozen=True)
class MethodSpec:
    name: str
    label: str
    params: dict[str, Any] = field(default_factory=dict)
    backend: dict[str, Any] | None = None
    num_candidates: int = 8
    temperature: float = 1.0

    @property
    def generative(self) -> bool:
        return self.name in GENERATIVE_METHODS


@dataclass(slots=True, frozen=True)
class BenchConfig:
    name: str
    scenarios: list[ScenarioConfig]
    methods: list[MethodSpec]
    seeds: list[int]
    serializer_budget: int = DEFAULT_BUDGET_TOKENS


@dataclass(slots=True, frozen=True)
class ContextConfig:
    name: str
    scenario: ScenarioConfig
    budgets: list[int]
    method: MethodSpec
    seeds: list[int]


@dataclass(slots=True, frozen=True)
class TrainVariant:
    name: str
    paradigm: str = "grpo"
    weights: RewardWeights = field(default_factory=RewardWeights)
    grpo: GRPOConfig = field(default_factory=GRPOConfig)
    sft_steps: int = 50


@dataclass(slots=True, frozen=True)
class TrainConfig:
    name: str
    scenario: ScenarioConfig
    variants: list[TrainVariant]
    seeds: list[int]
    eval_seeds: list[int] = field(default_factory=list)


def _expect_type(name: str, value: Any, expected: type | tuple[type, ...]) -> None:
    if isinstance(value, bool) and bool not in (expected if isinstance(expected, tuple) else (expected,)):
        raise ConfigError(f"{name}: wrong type (bool)")
    if not isinstance(value, expected):
        raise ConfigError(f"{name}: wrong type, expected {_type_names(expected)}")


def _type_names(expected: type | tuple[type, ...]) -> str:
    types = expected if isinstance(expected, tuple) else (expected,)
    return " or ".join(t.__name__ for t in types)


def _count(name: str, value: Any, minimum: int = 0) -> int:
    _expect_type(name, value, int)
    if value < minimum:
        raise ConfigError(f"{name}: must be an integer >= {minimum}")
    return value


def _number(name: str, value: Any) -> float:
    _expect_type(name, value, (int, float))
    return float(value)


def _reject_unknown(name: str, data: dict[str, Any], allowed: set[str]) -> None:
    extra = sorted(set(data) - allowed)
    if extra:
        raise ConfigError(f"{name}: unknown keys {','.join(extra)}")


def load_json(path: str | Path) -> dict[str, Any]:
    p = Path(path)
    if not p.exists() or p.is_dir():
        raise ConfigError(f"{p}: config file does not exist or is a directory")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}:{e.lineno}:{e.colno}: {e.msg}") from e
    _expect_type(str(p), data, dict)
    return data


def parse_link(name: str, raw: Any) -> LinkParams:
    if raw is None:
        return LinkParams()
    if isinstance(raw, str):
        raw = {"profile": raw}
    _expect_type(name, raw, dict)
    profile = raw.get("profile", "reference")
    if profile not in LINK_PROFILES:
        raise ConfigError(f"{name}.profile: unknown link profile {profile!r}")
    known = {f.name for f in fields(LinkParams)}
    _reject_unknown(name, raw, known | {"profile"})
    overrides = {k: v for k, v in raw.items() if k != "profile"}
    for k, v in overrides.items():
        if not (k == "distance_floor" and v is None):
            _number(f"{name}.{k}", v)
    try:
        return replace(LINK_PROFILES[profile], **overrides)
    except NetEnvError as e:
        raise ConfigError(f"{name}: {e}") from e


def parse_scenario(name: str, raw: Any) -> ScenarioConfig:
    if isinstance(raw, str):
        raw = {"preset": raw}
    _expect_type(name, raw, dict)
    _reject_unknown(
        name,
        raw,
        {"preset", "id", "num_users", "num_channels", "k_active", "slots", "gamma", "occupied_fraction", "link"},
    )
    preset = raw.get("preset")
    note = ""
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"{name}.preset: unknown preset {preset!r}")
        u, c, k = PRESETS[preset]
        note = SHAPE_NOTE
    else:
        u, c, k = (raw.get(key) for key in ("num_users", "num_channels", "k_active"))
    u = _count(f"{name}.num_users", raw.get("num_users", u))
    c = _count(f"{name}.num_channels", raw.get("num_channels", c))
    k = _count(f"{name}.k_active", raw.get("k_active", k))
    default_slots = 1 if preset is not None and preset.startswith("scale-") else DEFAULT_SLOTS
    occupied = _number(f"{name}.occupied_fraction", raw.get("occupied_fraction", 0.0))
    if not 0 <= occupied < 1:
        raise ConfigError(f"{name}.occupied_fraction: must be in [0, 1)")
    sid = raw.get("id", preset or f"u{u}-c{c}-k{k}")
    _expect_type(f"{name}.id", sid, str)
    return ScenarioConfig(
        id=sid,
        num_users=u,
        num_channels=c,
        k_active=k,
        slots=_count(f"{name}.slots", raw.get("slots", default_slots), 1),
        gamma=_number(f"{name}.gamma", raw.get("gamma", 1.0)),
        occupied_fraction=occupied,
        link=parse_link(f"{name}.link", raw.get("link")),
        note=note,
    )


def parse_seeds(name: str, raw: Any) -> list[int]:
    if isinstance(raw, dict):
        _reject_unknown(name, raw, {"start", "count"})
        start = _count(f"{name}.start", raw.get("start", 0))
        return list(range(start, start + _count(f"{name}.count", raw.get("count"), 1)))
    _expect_type(name, raw, list)
    if not raw:
        raise ConfigError(f"{name}: must not be empty")
    return [_count(f"{name}[{i}]", s) for i, s in enumerate(raw)]


def parse_method(name: str, raw: Any) -> MethodSpec:
    if isinstance(raw, str):
        raw = {"name": raw}
    _expect_type(name, raw, dict)
    method = raw.get("name")
    _expect_type(f"{name}.name", method, str)
    if method not in SOLVERS and method not in GENERATIVE_METHODS:
        raise ConfigError(f"{name}.name: unknown method {method!r}")
    label = raw.get("label", method)
    _expect_type(f"{name}.label", label, str)
    params = {k: v for k, v in raw.items() if k not in {"name", "label", "backend", "num_candidates", "temperature"}}
    backend = raw.get("backend")
    if method in GENERATIVE_METHODS:
        _expect_type(f"{name}.backend", backend, dict)
        if backend.get("kind") not in {"mock", "toy", "remote"}:
            raise ConfigError(f"{name}.backend.kind: must be mock, toy or remote")
    elif backend is not None:
        raise ConfigError(f"{name}.backend: only generative methods take a backend")
    if method == "grouped_hungarian":
        budget = params.get("budget", 1.0)
        if budget != "time_equated":
            if _number(f"{name}.budget", budget) <= 0:
                raise ConfigError(f"{name}.budget: must be > 0 or \"time_equated\"")
        _count(f"{name}.group_size", params.setdefault("group_size", 50), 1)
    temperature = _number(f"{name}.temperature", raw.get("temperature", 1.0))
    return MethodSpec(
        name=method,
        label=label,
        params=params,
        backend=backend,
        num_candidates=_count(f"{name}.num_candidates", raw.get("num_candidates", 8), 1),
        temperature=temperature,
    )


def _budget(name: str, raw: Any) -> int:
    value = _count(name, raw)
    if value < MIN_BUDGET_TOKENS:
        raise ConfigError(f"{name}: must be >= {MIN_BUDGET_TOKENS}")
    return value


def parse_bench(data: dict[str, Any], default_name: str = "bench") -> BenchConfig:
    _reject_unknown("config", data, {"name", "scenarios", "methods", "seeds", "serializer_budget"})
    scenarios = data.get("scenarios")
    _expect_type("scenarios", scenarios, list)
    methods = data.get("methods")
    _expect_type("methods", methods, list)
    if not scenarios or not methods:
        raise ConfigError("scenarios and methods must not be empty")
    parsed = [parse_method(f"methods[{i}]", m) for i, m in enumerate(methods)]
    labels = [m.label for m in parsed]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"methods: duplicate labels {labels}")
    return BenchConfig(
        name=str(data.get("name", default_name)),
        scenarios=[parse_scenario(f"scenarios[{i}]", s) for i, s in enumerate(scenarios)],
        methods=parsed,
        seeds=parse_seeds("seeds", data.get("seeds", [0])),
        serializer_budget=_budget("serializer_budget", data.get("serializer_budget", DEFAULT_BUDGET_TOKENS)),
    )


def parse_context(data: dict[str, Any], default_name: str = "context") -> ContextConfig:
    _reject_unknown("config", data, {"name", "scenario", "budgets", "method", "seeds"})
    budgets = data.get("budgets", [1024, 2048, 4096])
    _expect_type("budgets", budgets, list)
    method = parse_method("method", data.get("method", {"name": "lsa", "backend": {"kind": "toy"}}))
    if not method.generative:
        raise ConfigError("method: context comparison needs a generative method")
    return ContextConfig(
        name=str(data.get("name", default_name)),
        scenario=parse_scenario("scenario", data.get("scenario")),
        # budgets below the minimum are kept and reported as flagged rows
        budgets=[_count(f"budgets[{i}]", b, 1) for i, b in enumerate(budgets)],
        method=method,
        seeds=parse_seeds("seeds", data.get("seeds", [0])),
    )


def parse_weights(name: str, raw: Any) -> RewardWeights:
    if raw is None:
        return RewardWeights()
    if isinstance(raw, str):
        raw = {"preset": raw}
    _expect_type(name, raw, dict)
    preset = raw.get("preset", "baseline")
    if preset not in WEIGHT_PRESETS:
        raise ConfigError(f"{name}.preset: unknown weight preset {preset!r}")
    known = {f.name for f in fields(RewardWeights)}
    _reject_unknown(name, raw, known | {"preset"})
    overrides = {k: v for k, v in raw.items() if k != "preset"}
    for k, v in overrides.items():
        if not (k == "interference_threshold" and v is None):
            _number(f"{name}.{k}", v)
    try:
        return replace(WEIGHT_PRESETS[preset], **overrides)
    except (RewardError, TypeError) as e:
        raise ConfigError(f"{name}: {e}") from e


def parse_variant(name: str, raw: Any) -> TrainVariant:
    _expect_type(name, raw, dict)
    grpo_keys = {f.name for f in fields(GRPOConfig)}
    _reject_unknown(name, raw, {"name", "paradigm", "weights", "sft_steps"} | grpo_keys)
    vname = raw.get("name")
    _expect_type(f"{name}.name", vname, str)
    paradigm = raw.get("paradigm", "grpo")
    if paradigm not in ("grpo", "sft+grpo"):
        raise ConfigError(f"{name}.paradigm: must be grpo or sft+grpo")
    try:
        grpo = GRPOConfig(**{k: v for k, v in raw.items() if k in grpo_keys})
    except (PolicyError, TypeError) as e:
        raise ConfigError(f"{name}: {e}") from e
    return TrainVariant(
        name=vname,
        paradigm=paradigm,
        weights=parse_weights(f"{name}.weights", raw.get("weights")),
        grpo=grpo,
        sft_steps=_count(f"{name}.sft_steps", raw.get("sft_steps", 50)),
    )


def parse_train(data: dict[str, Any], default_name: str = "train") -> TrainConfig:
    _reject_unknown("config", data, {"name", "scenario", "variants", "seeds", "eval_seeds"})
    variants = data.get("variants")
    _expect_type("variants", variants, list)
    if not variants:
        raise ConfigError("variants: must not be empty")
    parsed = [parse_variant(f"variants[{i}]", v) for i, v in enumerate(variants)]
    names = [v.name for v in parsed]
    if len(set(names)) != len(names):
        raise ConfigError(f"variants: duplicate names {names}")
    return TrainConfig(
        name=str(data.get("name", default_name)),
        scenario=parse_scenario("scenario", data.get("scenario")),
        variants=parsed,
        seeds=parse_seeds("seeds", data.get("seeds", [0])),
        eval_seeds=parse_seeds("eval_seeds", data["eval_seeds"]) if "eval_seeds" in data else [],
    )
