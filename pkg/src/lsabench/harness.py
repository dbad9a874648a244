from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
import uuid
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Literal, Sequence

import numpy as np

from .allocation import check_pairs, episode_utility, is_feasible, slot_utility
from .backends import Backend, BackendError, GenerationRequest, build_backend, generate
from .config import BenchConfig, ConfigError, ContextConfig, MethodSpec, ScenarioConfig, TrainConfig
from .grpo import align, evaluate_policy
from .netenv import (
    EnvConfig,
    NetworkState,
    achievable_rate,
    derive_seed,
    episode_states,
    initial_state,
    normalized_distance,
    received_power,
)
from .repair import repair
from .serializer import DETAIL_RANK, BudgetTooSmall, serialize, try_parse_action
from .solvers import SizeExceeded, SolverError, SolveResult, solve_de, solve_exhaustive, solve_grouped_hungarian
from .solvers import solve_hungarian, solve_random

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TRAIN_WINDOW = 30

Status = Literal["ok", "budget_exceeded", "degraded"]


class HarnessError(RuntimeError):
    pass


@dataclass(slots=True)
class BenchRecord:
    scenario_id: str
    solver_name: str
    seed: int
    episode_throughput: float | None
    mean_latency: float
    valid_rate: float | None
    status: Status = "ok"
    slots_run: int = 0
    degraded_slots: int = 0
    infeasible_deployments: int = 0
    detail_level: str | None = None
    slot_latencies: list[float] = field(default_factory=list)


@dataclass(slots=True)
class SummaryRow:
    scenario_id: str
    solver_name: str
    n: int
    n_ok: int
    mean_throughput: float | None
    stderr_throughput: float | None
    mean_valid_rate: float | None
    mean_latency: float
    p95_latency: float
    note: str = ""


@dataclass(slots=True)
class Audit:
    deployed: int = 0
    infeasible: int = 0

    @property
    def passed(self) -> bool:
        return self.infeasible == 0

    def to_dict(self) -> dict[str, Any]:
        return {"deployed": self.deployed, "infeasible": self.infeasible, "passed": self.passed}


@dataclass(slots=True)
class BenchRun:
    run_id: str
    records: list[BenchRecord]
    summary: list[SummaryRow]
    audit: Audit
    out_dir: Path | None = None


def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


def fmt(value: Any) -> str:
    if value is None:
        return "NA"
    if isinstance(value, float):
        return "NA" if math.isnan(value) else format(value, ".10g")
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["schema_version", *header])
    for row in rows:
        writer.writerow([SCHEMA_VERSION, *(fmt(v) for v in row)])
    path.write_text(buf.getvalue(), encoding="utf-8")


def write_json(path: Path, payload: dict[str, Any]) -> None:
    path.write_text(json.dumps(payload, ensure_ascii=False, indent=2), encoding="utf-8")


def append_event(out_dir: Path, event: str, run_id: str, **extra: Any) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    line = {"ts": now_iso(), "event": event, "run_id": run_id, **extra}
    with (out_dir / "events.jsonl").open("a", encoding="utf-8") as f:
        f.write(json.dumps(line, ensure_ascii=False) + "\n")


def _call_solver(method: MethodSpec, state: NetworkState, seed: int, slot_budget: float | None) -> SolveResult:
    p = method.params
    if method.name == "random":
        return solve_random(seed, state)
    if method.name == "hungarian":
        return solve_hungarian(state)
    if method.name == "exhaustive":
        return solve_exhaustive(state, max_size=int(p.get("max_size", 500_000)))
    if method.name == "grouped_hungarian":
        budget = slot_budget if p.get("budget") == "time_equated" else float(p.get("budget", 1.0))
        if budget is None:
            raise ConfigError(f"{method.label}: time_equated budget needs a generative method in the same run")
        return solve_grouped_hungarian(
            state,
            budget=budget,
            group_size=int(p.get("group_size", 50)),
            seed=seed,
            max_iterations=p.get("max_iterations"),
        )
    if method.name == "de":
        return solve_de(
            seed,
            state,
            pop_size=int(p.get("pop_size", 50)),
            crossover_rate=float(p.get("crossover_rate", 0.9)),
            generations=int(p.get("generations", 200)),
            budget=p.get("budget"),
            differential_weight=float(p.get("differential_weight", 0.5)),
        )
    raise ConfigError(f"unknown solver {method.name!r}")


@dataclass(slots=True)
class SlotDecision:
    utility: float
    feasible: bool
    latency: float
    valid: int = 0
    candidates: int = 0
    degraded: bool = False
    detail_level: str | None = None


def decide_generative(
    backend: Backend,
    method: MethodSpec,
    state: NetworkState,
    seed: int,
    budget_tokens: int,
) -> SlotDecision:
    """Serialize, generate, parse, repair every candidate and deploy the best one."""
    started = time.perf_counter()
    bundle = serialize(state, budget_tokens)
    request = GenerationRequest(
        prompt=bundle.prompt,
        max_tokens=budget_tokens,
        num_candidates=method.num_candidates,
        temperature=method.temperature,
        seed=seed,
        state=state,
    )
    degraded = False
    try:
        texts = generate(backend, request).texts
    except BackendError as e:
        log.warning("slot %d: backend %s degraded: %s", state.slot, method.label, e)
        texts, degraded = [], True

    valid = 0
    raws: list[dict[int, int]] = []
    for text in texts:
        parsed = try_parse_action(text)
        if parsed.ok:
            if check_pairs(parsed.mapping.items(), state).feasible:
                valid += 1
            raws.append(parsed.mapping)
        else:
            raws.append({})
    if not raws:
        raws = [{}]

    best_alloc, best_value = None, -math.inf
    for raw in raws:
        alloc = repair(raw, state).allocation
        value = slot_utility(alloc, state)
        if value > best_value:
            best_alloc, best_value = alloc, value
    return SlotDecision(
        utility=best_value,
        feasible=is_feasible(best_alloc, state).feasible,
        latency=time.perf_counter() - started,
        valid=valid,
        candidates=len(texts),
        degraded=degraded,
        detail_level=bundle.detail_level,
    )


def run_episode(
    scenario: ScenarioConfig,
    method: MethodSpec,
    seed: int,
    *,
    backend: Backend | None = None,
    budget_tokens: int = 2048,
    slot_budgets: Sequence[float] | None = None,
) -> BenchRecord:
    env: EnvConfig = scenario.env()
    utilities: list[float] = []
    latencies: list[float] = []
    valid = total = degraded = infeasible = 0
    status: Status = "ok"
    detail: str | None = None

    for state in episode_states(env, seed, scenario.slots):
        slot_seed = derive_seed(seed, state.slot)
        if method.generative:
            if backend is None:
                raise HarnessError(f"{method.label}: generative method without a backend")
            try:
                d = decide_generative(backend, method, state, slot_seed, budget_tokens)
            except BudgetTooSmall as e:
                log.warning("%s/%s seed %d: %s", scenario.id, method.label, seed, e)
                status = "budget_exceeded"
                break
            valid += d.valid
            total += d.candidates
            degraded += int(d.degraded)
            if detail is None or DETAIL_RANK[d.detail_level] < DETAIL_RANK[detail]:
                detail = d.detail_level
        else:
            budget = None
            if method.params.get("budget") == "time_equated" and slot_budgets is not None:
                if state.slot >= len(slot_budgets):
                    log.warning(
                        "%s/%s seed %d: no generative latency for slot %d", scenario.id, method.label, seed, state.slot
                    )
                    status = "budget_exceeded"
                    break
                budget = slot_budgets[state.slot]
            try:
                result = _call_solver(method, state, slot_seed, budget)
            except SizeExceeded as e:
                log.warning("%s/%s: %s", scenario.id, method.label, e)
                status = "budget_exceeded"
                break
            except SolverError as e:
                log.warning("%s/%s slot %d: %s", scenario.id, method.label, state.slot, e)
                degraded += 1
                utilities.append(0.0)
                latencies.append(0.0)
                continue
            d = SlotDecision(
                utility=result.objective,
                feasible=is_feasible(result.allocation, state).feasible,
                latency=result.elapsed,
            )
        utilities.append(d.utility)
        latencies.append(d.latency)
        infeasible += int(not d.feasible)

    if status == "ok" and degraded:
        status = "degraded"
    if method.generative:
        valid_rate = valid / total if total else (None if status == "budget_exceeded" else 0.0)
    else:
        valid_rate = 1.0
    return BenchRecord(
        scenario_id=scenario.id,
        solver_name=method.label,
        seed=seed,
        episode_throughput=None if status == "budget_exceeded" else episode_utility(utilities, scenario.gamma),
        mean_latency=float(np.mean(latencies)) if latencies else 0.0,
        valid_rate=valid_rate,
        status=status,
        slots_run=len(utilities),
        degraded_slots=degraded,
        infeasible_deployments=infeasible,
        detail_level=detail,
        slot_latencies=latencies,
    )


def _close(backend: Backend) -> None:
    close = getattr(backend, "close", None)
    if callable(close):
        close()


def summarize(records: Sequence[BenchRecord], scenarios: Sequence[ScenarioConfig], methods: Sequence[MethodSpec]) -> list[SummaryRow]:
    rows = []
    for sc in scenarios:
        for m in methods:
            cell = [r for r in records if r.scenario_id == sc.id and r.solver_name == m.label]
            if not cell:
                continue
            values = np.array([r.episode_throughput for r in cell if r.episode_throughput is not None], dtype=float)
            valid = [r.valid_rate for r in cell if r.valid_rate is not None]
            lat = np.array([x for r in cell for x in r.slot_latencies], dtype=float)
            rows.append(
                SummaryRow(
                    scenario_id=sc.id,
                    solver_name=m.label,
                    n=len(cell),
                    n_ok=sum(r.status == "ok" for r in cell),
                    mean_throughput=float(values.mean()) if values.size else None,
                    stderr_throughput=float(values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else None,
                    mean_valid_rate=float(np.mean(valid)) if valid else None,
                    mean_latency=float(lat.mean()) if lat.size else 0.0,
                    p95_latency=float(np.percentile(lat, 95)) if lat.size else 0.0,
                    note=sc.note,
                )
            )
    return rows


def run_benchmark(config: BenchConfig, out_dir: Path | None = None, config_path: str | None = None) -> BenchRun:
    run_id = str(uuid.uuid4())
    t0 = time.perf_counter()
    generative = [m for m in config.methods if m.generative]
    # generative methods first so time-equated budgets can reuse their slot latencies
    ordered = generative + [m for m in config.methods if not m.generative]
    if any(m.params.get("budget") == "time_equated" for m in ordered) and not generative:
        raise ConfigError("time_equated budget needs a generative method in the same run")

    records: list[BenchRecord] = []
    reference: dict[tuple[str, int], list[float]] = {}
    for scenario in config.scenarios:
        for method in ordered:
            backend = build_backend(method.backend) if method.generative else None
            try:
                for seed in config.seeds:
                    rec = run_episode(
                        scenario,
                        method,
                        seed,
                        backend=backend,
                        budget_tokens=config.serializer_budget,
                        slot_budgets=reference.get((scenario.id, seed)),
                    )
                    if generative and method is generative[0]:
                        reference[(scenario.id, seed)] = [max(x, 1e-3) for x in rec.slot_latencies]
                    records.append(rec)
            finally:
                if backend is not None:
                    _close(backend)

    method_order = {m.label: i for i, m in enumerate(config.methods)}
    scenario_order = {s.id: i for i, s in enumerate(config.scenarios)}
    records.sort(key=lambda r: (scenario_order[r.scenario_id], method_order[r.solver_name], r.seed))
    audit = Audit(
        deployed=sum(r.slots_run for r in records),
        infeasible=sum(r.infeasible_deployments for r in records),
    )
    run = BenchRun(run_id, records, summarize(records, config.scenarios, config.methods), audit, out_dir)
    timings_ms = {"benchmark": int((time.perf_counter() - t0) * 1000)}
    if out_dir is not None:
        _write_bench(run, config, out_dir, config_path, timings_ms)
    return run


def _write_bench(
    run: BenchRun,
    config: BenchConfig,
    out_dir: Path,
    config_path: str | None,
    timings_ms: dict[str, int],
) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(
        out_dir / "records.csv",
        ["scenario", "method", "seed", "episode_throughput", "valid_rate", "status", "slots_run", "degraded_slots"],
        [
            [r.scenario_id, r.solver_name, r.seed, r.episode_throughput, r.valid_rate, r.status, r.slots_run, r.degraded_slots]
            for r in run.records
        ],
    )
    write_csv(
        out_dir / "summary.csv",
        ["scenario", "method", "n", "n_ok", "mean_throughput", "stderr_throughput", "mean_valid_rate", "note"],
        [
            [s.scenario_id, s.solver_name, s.n, s.n_ok, s.mean_throughput, s.stderr_throughput, s.mean_valid_rate, s.note]
            for s in run.summary
        ],
    )
    records = []
    for r in run.records:
        item = asdict(r)
        item.pop("slot_latencies")
        records.append(item)
    write_json(
        out_dir / "run.json",
        {
            "run_id": run.run_id,
            "kind": "bench",
            "name": config.name,
            "created_at": now_iso(),
            "config_path": config_path,
            "seeds": config.seeds,
            "scenarios": [asdict(s) for s in config.scenarios],
            "methods": [asdict(m) for m in config.methods],
            "summary": [asdict(s) for s in run.summary],
            "records": records,
            "audit": run.audit.to_dict(),
            "timings_ms": timings_ms,
        },
    )
    append_event(
        out_dir,
        "bench_run_completed",
        run.run_id,
        command="run",
        config_path=config_path,
        records=len(run.records),
        audit=run.audit.to_dict(),
    )


@dataclass(slots=True)
class ContextRow:
    budget: int
    throughput: float | None
    latency: float
    detail_level: str | None
    status: Status


def compare_context_budgets(
    scenario: ScenarioConfig,
    budgets: Sequence[int],
    method: MethodSpec,
    seeds: Sequence[int] = (0,),
    backend: Backend | None = None,
) -> list[ContextRow]:
    own = backend is None
    backend = backend if backend is not None else build_backend(method.backend)
    rows = []
    try:
        for budget in budgets:
            recs = [run_episode(scenario, method, s, backend=backend, budget_tokens=budget) for s in seeds]
            ok = [r for r in recs if r.episode_throughput is not None]
            status: Status = "budget_exceeded" if len(ok) < len(recs) else ("degraded" if any(r.status == "degraded" for r in recs) else "ok")
            levels = [r.detail_level for r in ok if r.detail_level is not None]
            rows.append(
                ContextRow(
                    budget=budget,
                    throughput=float(np.mean([r.episode_throughput for r in ok])) if ok else None,
                    latency=float(np.mean([r.mean_latency for r in recs])),
                    detail_level=min(levels, key=DETAIL_RANK.__getitem__) if levels else None,
                    status=status,
                )
            )
    finally:
        if own:
            _close(backend)
    return rows


def run_context(config: ContextConfig, out_dir: Path | None = None, config_path: str | None = None) -> list[ContextRow]:
    run_id = str(uuid.uuid4())
    rows = compare_context_budgets(config.scenario, config.budgets, config.method, config.seeds)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_csv(
            out_dir / "context.csv",
            ["budget", "throughput", "detail_level", "status"],
            [[r.budget, r.throughput, r.detail_level, r.status] for r in rows],
        )
        write_json(
            out_dir / "context.json",
            {
                "run_id": run_id,
                "kind": "context",
                "name": config.name,
                "created_at": now_iso(),
                "config_path": config_path,
                "scenario": config.scenario.id,
                "rows": [asdict(r) for r in rows],
            },
        )
        append_event(out_dir, "context_run_completed", run_id, command="context", config_path=config_path, rows=len(rows))
    return rows


@dataclass(slots=True)
class FuzzReport:
    n: int
    feasible: int = 0
    idempotent: int = 0
    preserved: int = 0
    winner_take_all: int = 0
    accounted: int = 0
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.n == self.feasible == self.idempotent == self.preserved == self.winner_take_all == self.accounted


def _fuzz_state(rng: np.random.Generator, seed: int) -> NetworkState:
    users = int(rng.integers(1, 9))
    channels = int(rng.integers(1, 9))
    k = int(rng.integers(0, users + 1))
    occupied = float(rng.choice([0.0, 0.25, 0.5]))
    return initial_state(EnvConfig.fixed(users, channels, k, occupied_fraction=occupied), seed)


def _fuzz_raw(rng: np.random.Generator, state: NetworkState) -> dict[Any, Any]:
    if rng.random() < 0.1:
        return {}
    n_users, n_channels = len(state.users), len(state.channels)
    raw: dict[Any, Any] = {}
    for _ in range(int(rng.integers(1, n_users + 3))):
        roll = rng.random()
        if roll < 0.05:
            raw[f"u{rng.integers(0, 9)}"] = int(rng.integers(0, n_channels))
        elif roll < 0.1:
            raw[int(rng.integers(0, n_users))] = True
        else:
            raw[int(rng.integers(-2, n_users + 2))] = int(rng.integers(-2, n_channels + 2))
    return raw


def _oracle_rate(state: NetworkState, user: int, channel: int) -> float:
    link = state.link
    power = received_power(link, normalized_distance(state.user_by_id[user], link))
    return achievable_rate(power, 0.0, state.channel_by_id[channel].bandwidth_hz, link.noise_density_dbm_hz)


def _is_id(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def repair_fuzz(n: int, seed: int = 0) -> FuzzReport:
    """Repair audited on fuzzed raw maps: feasibility, idempotence, preservation of
    uncontended valid suggestions, winner-take-all against an independent rate oracle,
    and entry accounting."""
    if n < 1:
        raise HarnessError("n must be >= 1")
    report = FuzzReport(n=n)
    rng = np.random.default_rng([seed, 99])

    def fail(i: int, what: str) -> None:
        if len(report.failures) < 20:
            report.failures.append(f"case {i}: {what}")

    for i in range(n):
        state = _fuzz_state(rng, derive_seed(seed, i))
        raw = _fuzz_raw(rng, state)
        out = repair(raw, state)
        alloc = out.allocation

        if is_feasible(alloc, state).feasible:
            report.feasible += 1
        else:
            fail(i, "infeasible output")

        if repair(alloc.assignment, state).allocation.assignment == alloc.assignment:
            report.idempotent += 1
        else:
            fail(i, "not idempotent")

        claims: dict[int, list[int]] = {}
        for u, c in raw.items():
            if _is_id(u) and _is_id(c) and u in state.active_set and c in state.idle_set:
                claims.setdefault(c, []).append(u)
        kept = all(alloc.assignment.get(us[0]) == c for c, us in claims.items() if len(us) == 1)
        report.preserved += int(kept)
        if not kept:
            fail(i, "uncontended valid suggestion dropped")

        wta = True
        for c, us in claims.items():
            if len(us) < 2:
                continue
            holders = [u for u in us if alloc.assignment.get(u) == c]
            best = max(_oracle_rate(state, u, c) for u in us)
            if len(holders) != 1 or _oracle_rate(state, holders[0], c) < best * (1 - 1e-9):
                wta = False
        report.winner_take_all += int(wta)
        if not wta:
            fail(i, "winner-take-all violated")

        if out.kept_suggestions + out.invalid_entries + out.contention_losers == len(raw):
            report.accounted += 1
        else:
            fail(i, "entry accounting mismatch")
    return report


def run_repair_fuzz(n: int, seed: int = 0, out_dir: Path | None = None) -> FuzzReport:
    run_id = str(uuid.uuid4())
    t0 = time.perf_counter()
    report = repair_fuzz(n, seed)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_json(
            out_dir / "repair_fuzz.json",
            {
                "run_id": run_id,
                "kind": "repair_fuzz",
                "created_at": now_iso(),
                "seed": seed,
                **asdict(report),
                "passed": report.passed,
                "timings_ms": {"fuzz": int((time.perf_counter() - t0) * 1000)},
            },
        )
        append_event(out_dir, "repair_fuzz_completed", run_id, command="repair-fuzz", n=n, passed=report.passed)
    return report


@dataclass(slots=True)
class VariantResult:
    name: str
    trace: list[list[float]]
    first_window: list[float]
    last_window: list[float]
    eval_throughput: list[float]
    theta: list[list[float]]


def run_training(config: TrainConfig, out_dir: Path | None = None, config_path: str | None = None) -> list[VariantResult]:
    run_id = str(uuid.uuid4())
    t0 = time.perf_counter()
    env = config.scenario.env()
    results = []
    for variant in config.variants:
        traces, first, last, evals = [], [], [], []
        theta: list[list[float]] = []
        for seed in config.seeds:
            res = align(variant.paradigm, env, variant.weights, variant.grpo, seed, sft_steps=variant.sft_steps)
            totals = [row.total for row in res.trace]
            window = min(TRAIN_WINDOW, len(totals))
            first.append(float(np.mean(totals[:window])))
            last.append(float(np.mean(totals[-window:])))
            traces.append([[r.total, r.r_struct_mean, r.r_perf_mean, r.r_depth_mean] for r in res.trace])
            if config.eval_seeds:
                evals.append(evaluate_policy(res.policy, env, config.eval_seeds))
            if not theta:
                theta = res.policy.theta.tolist()
            log.info("variant %s seed %d: first=%.4f last=%.4f", variant.name, seed, first[-1], last[-1])
        mean_trace = np.mean(np.array(traces), axis=0).tolist()
        results.append(VariantResult(variant.name, mean_trace, first, last, evals, theta))

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        for r in results:
            write_csv(
                out_dir / f"trace_{r.name}.csv",
                ["step", "total", "r_struct_mean", "r_perf_mean", "r_depth_mean"],
                [[step, *row] for step, row in enumerate(r.trace)],
            )
        write_json(
            out_dir / "train.json",
            {
                "run_id": run_id,
                "kind": "train",
                "name": config.name,
                "created_at": now_iso(),
                "config_path": config_path,
                "scenario": config.scenario.id,
                "seeds": config.seeds,
                "variants": [
                    {
                        "name": r.name,
                        "first_window_mean": r.first_window,
                        "last_window_mean": r.last_window,
                        "improved": sum(b > a for a, b in zip(r.first_window, r.last_window)),
                        "eval_throughput": r.eval_throughput,
                        "theta": r.theta,
                    }
                    for r in results
                ],
                "timings_ms": {"train": int((time.perf_counter() - t0) * 1000)},
            },
        )
        append_event(out_dir, "train_run_completed", run_id, command="train", config_path=config_path, variants=len(results))
    return results

