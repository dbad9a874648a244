from __future__ import annotations

import math

import numpy as np
import pytest

from lsabench.backends import MockBackend
from lsabench.config import parse_bench, parse_method, parse_scenario
from lsabench.grpo import (
    ToyPolicy,
    expert_dataset,
    group_advantages,
    grpo_gradient,
    grpo_objective,
    sample_group,
    score_group,
    sft_gradient,
    sft_objective,
    train,
)
from lsabench.harness import TRAIN_WINDOW, repair_fuzz, run_benchmark, run_episode
from lsabench.netenv import LINK_PROFILES, EnvConfig, initial_state
from lsabench.reward import RewardWeights
from lsabench.solvers import solve_exhaustive, solve_grouped_hungarian, solve_hungarian

HIGH_SNR = LINK_PROFILES["high_snr"]
SMALL_PRESETS = ("small-5-5-1", "small-7-10-2", "small-10-15-3", "small-15-20-4", "small-5-5-2", "small-8-10-4", "small-12-15-6", "small-15-20-8")


def numeric_gradient(fn, theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(theta)
    for idx in np.ndindex(theta.shape):
        up, down = theta.copy(), theta.copy()
        up[idx] += h
        down[idx] -= h
        grad[idx] = (fn(up) - fn(down)) / (2 * h)
    return grad


def paired_margin(a: list[float], b: list[float]) -> tuple[float, float]:
    """Mean of b - a and its standard error."""
    diff = np.asarray(b) - np.asarray(a)
    return float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(diff.size))


@pytest.mark.acceptance
def test_hungarian_is_optimal_on_500_instances() -> None:
    rng = np.random.default_rng(7)
    for seed in range(500):
        users = int(rng.integers(1, 8))
        config = EnvConfig.fixed(users, int(rng.integers(1, 8)), int(rng.integers(1, users + 1)), link=HIGH_SNR)
        state = initial_state(config, seed=seed)
        assert solve_hungarian(state).objective == solve_exhaustive(state).objective


@pytest.mark.acceptance
def test_repair_soundness_on_10k_fuzzed_maps() -> None:
    report = repair_fuzz(10_000, seed=0)
    assert report.failures == []
    assert report.passed


@pytest.mark.acceptance
def test_solver_ordering_on_small_presets() -> None:
    cfg = parse_bench(
        {
            "scenarios": [{"preset": p, "slots": 1, "link": "high_snr"} for p in SMALL_PRESETS],
            "methods": ["random", "hungarian", "exhaustive", {"name": "de", "generations": 100}],
            "seeds": {"start": 0, "count": 100},
        }
    )
    run = run_benchmark(cfg)
    assert run.audit.passed
    for preset in SMALL_PRESETS:
        cell = {
            name: [r.episode_throughput for r in run.records if r.scenario_id == preset and r.solver_name == name]
            for name in ("random", "hungarian", "exhaustive", "de")
        }
        mean, se = paired_margin(cell["random"], cell["hungarian"])
        assert mean > 3 * se, preset
        mean, se = paired_margin(cell["random"], cell["de"])
        assert mean > 3 * se, preset
        if None not in cell["exhaustive"]:
            assert np.mean(cell["hungarian"]) <= np.mean(cell["exhaustive"]) * (1 + 1e-12)


@pytest.mark.acceptance
def test_grpo_mechanics_on_two_user_instances() -> None:
    for seed in range(5):
        config = EnvConfig.fixed(2, 3, 2, link=HIGH_SNR)
        state = initial_state(config, seed=seed)
        rng = np.random.default_rng(seed)
        policy = ToyPolicy(theta=0.5 * rng.standard_normal((4, 4)), temperature=0.8)
        ref = ToyPolicy(theta=policy.theta + 0.1 * rng.standard_normal((4, 4)))
        group = score_group(sample_group(policy, state, 6, seed=seed, ref_policy=ref), state, RewardWeights(), seed=seed)
        assert sum(c.advantage for c in group.candidates) == pytest.approx(0.0, abs=1e-12)

        def objective(theta: np.ndarray) -> float:
            return grpo_objective(group, ToyPolicy(theta=theta, temperature=0.8), ref, 0.2, 0.25, state)

        analytic = grpo_gradient(group, policy, ref, 0.2, 0.25, state)
        assert np.allclose(analytic, numeric_gradient(objective, policy.theta), rtol=1e-4, atol=1e-7)

    pairs = expert_dataset(EnvConfig.fixed(2, 3, 2, link=HIGH_SNR), 6, seed=1)
    policy = ToyPolicy(theta=np.random.default_rng(3).standard_normal((4, 4)))

    def sft(theta: np.ndarray) -> float:
        return sft_objective(ToyPolicy(theta=theta), pairs)

    assert np.allclose(sft_gradient(policy, pairs), numeric_gradient(sft, policy.theta), rtol=1e-4, atol=1e-7)
    assert sum(group_advantages([0.1, 0.7, -2.0, 5.5, 0.0])) == pytest.approx(0.0, abs=1e-12)


def _final_windows(group_size: int, seeds: range) -> tuple[list[float], list[float]]:
    env = EnvConfig.fixed(10, 15, 3, link=HIGH_SNR)
    first, last = [], []
    for seed in seeds:
        result = train(
            ToyPolicy.uniform(), env, RewardWeights(), 300, group_size, 0.2, 0.25, 0.05, seed=seed, anchor="old"
        )
        totals = [row.total for row in result.trace]
        first.append(float(np.mean(totals[:TRAIN_WINDOW])))
        last.append(float(np.mean(totals[-TRAIN_WINDOW:])))
    return first, last


@pytest.mark.acceptance
def test_grpo_learning_curve_rises() -> None:
    first, last = _final_windows(8, range(10))
    assert sum(b > a for a, b in zip(first, last)) >= 9


@pytest.mark.acceptance
def test_larger_group_finishes_higher() -> None:
    _, g8 = _final_windows(8, range(10))
    _, g4 = _final_windows(4, range(10))
    assert sum(b >= a for a, b in zip(g4, g8)) >= 7


@pytest.mark.acceptance
def test_mock_valid_rate_accounting() -> None:
    scenario = parse_scenario("s", {"preset": "small-7-10-2", "slots": 250})
    method = parse_method("m", {"name": "lsa", "backend": {"kind": "mock"}})
    rec = run_episode(scenario, method, seed=0, backend=MockBackend({"valid": 0.78, "prose": 0.22}))
    assert 250 * method.num_candidates == 2000
    assert abs(rec.valid_rate - 0.78) <= 0.03
    assert rec.infeasible_deployments == 0


@pytest.mark.acceptance
def test_time_equated_grouped_hungarian_on_scale_one() -> None:
    state = initial_state(EnvConfig.fixed(1000, 1000, 200), seed=0)
    single = solve_grouped_hungarian(state, budget=2.0, group_size=50, seed=0, max_iterations=1)
    timed = solve_grouped_hungarian(state, budget=2.0, group_size=50, seed=0)
    assert timed.elapsed <= 2.0 + max(1.0, 3 * single.elapsed)
    assert timed.objective >= single.objective
    assert timed.iterations >= 1
