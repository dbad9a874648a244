from __future__ import annotations

from types import SimpleNamespace

import numpy as np
import pytest

from lsabench.allocation import lenient_throughput
from lsabench.netenv import LINK_PROFILES, EnvConfig, initial_state
from lsabench.reward import (
    WEIGHT_PRESETS,
    RewardError,
    RewardWeights,
    psi_penalty,
    reward_depth,
    reward_perf,
    reward_struct,
    reward_total,
)
from lsabench.serializer import render_action, render_candidate_text, try_parse_action

HIGH_SNR = LINK_PROFILES["high_snr"]


@pytest.fixture
def state(make_state):
    # channel 3 is held by a primary user; user 0 sits 50 m from the base station
    return make_state(
        [(50.0, 0.0), (0.0, 300.0), (-120.0, 40.0)],
        [5e6, 10e6, 20e6, 5e6],
        occupied=[3],
        link=HIGH_SNR,
    )


def fixed_baseline(monkeypatch: pytest.MonkeyPatch, objective: float) -> None:
    monkeypatch.setattr("lsabench.reward.solve_random", lambda seed, state: SimpleNamespace(objective=objective))


@pytest.mark.unit
@pytest.mark.parametrize(("tokens", "expected"), [(0, -5.0), (256, -2.5), (512, 0.0), (2000, 0.0)])
def test_reward_depth(tokens: int, expected: float) -> None:
    assert reward_depth(tokens) == expected


@pytest.mark.unit
def test_reward_depth_is_monotone_and_validated() -> None:
    values = [reward_depth(n) for n in range(0, 700, 7)]
    assert values == sorted(values)
    with pytest.raises(RewardError):
        reward_depth(-1)


@pytest.mark.unit
@pytest.mark.parametrize(
    ("text", "expected"),
    [
        ("I think user 0 should take the widest channel.", 0.0),
        (render_action({0: 2, 1: 1, 2: 0}), 1.2),
        (render_action({0: 3}), 0.8),
        (render_action({7: 1}), 0.8),
        (render_action({0: 42}), 0.4),
    ],
)
def test_reward_struct(state, text: str, expected: float) -> None:
    assert reward_struct(text, try_parse_action(text), state) == pytest.approx(expected)


@pytest.mark.unit
def test_reward_struct_non_decreasing_as_violations_are_removed(state) -> None:
    texts = ["no action", render_action({0: 42}), render_action({0: 3}), render_action({0: 2})]
    scores = [reward_struct(t, try_parse_action(t), state) for t in texts]
    assert scores == sorted(scores)


@pytest.mark.unit
def test_psi_penalty(state, make_state) -> None:
    assert psi_penalty({0: 1, 1: 1}, state) == 0.0
    assert psi_penalty({0: 2, 1: 1}, state) == 1.0
    assert psi_penalty({0: 3}, state) == 0.3

    weak = make_state([(450.0, 0.0)], [5e6, 5e6], occupied=[1])
    assert psi_penalty({0: 1}, weak) == 1.0
    assert psi_penalty({0: 1}, weak, threshold=0.0) == 0.3


@pytest.mark.unit
def test_reward_perf_against_fixed_baseline(state, monkeypatch: pytest.MonkeyPatch) -> None:
    raw = {0: 2, 1: 1, 2: 0}
    t_llm = lenient_throughput(raw, state)

    fixed_baseline(monkeypatch, t_llm)
    assert reward_perf(raw, state, seed=0).value == 0.0

    fixed_baseline(monkeypatch, t_llm / 1.2)
    assert reward_perf(raw, state, seed=0).value == pytest.approx(1.0)

    fixed_baseline(monkeypatch, t_llm / 100.0)
    assert reward_perf(raw, state, seed=0).value == 10.0


@pytest.mark.unit
def test_reward_perf_zero_cases(state, monkeypatch: pytest.MonkeyPatch) -> None:
    assert reward_perf(None, state, seed=0).value == 0.0
    assert reward_perf({}, state, seed=0).value == 0.0

    duplicate = reward_perf({0: 2, 1: 2}, state, seed=0)
    assert duplicate.psi == 0.0
    assert duplicate.value == 0.0

    fixed_baseline(monkeypatch, 0.0)
    degenerate = reward_perf({0: 2}, state, seed=0)
    assert degenerate.degenerate_baseline
    assert degenerate.value == 0.0


@pytest.mark.unit
def test_reward_total_empty_text(state) -> None:
    out = reward_total("", state, RewardWeights(), seed=0)
    assert (out.r_struct, out.r_perf, out.r_depth, out.total) == (0.0, 0.0, -5.0, -5.0)
    assert out.parse_error == "NoActionFound"


@pytest.mark.unit
def test_reward_total_perfect_candidate(state, monkeypatch: pytest.MonkeyPatch) -> None:
    raw = {0: 2, 1: 1, 2: 0}
    fixed_baseline(monkeypatch, lenient_throughput(raw, state) / 1.2)
    text = render_candidate_text(raw, target_tokens=512)
    out = reward_total(text, state, RewardWeights(), seed=0)
    assert out.r_depth == 0.0
    assert out.total == pytest.approx(2.2)


@pytest.mark.unit
def test_reward_total_with_zero_weights(state) -> None:
    weights = RewardWeights(lambda1=0.0, lambda2=0.0, lambda3=0.0)
    assert reward_total(render_action({0: 2}), state, weights, seed=0).total == 0.0


@pytest.mark.unit
def test_reward_total_never_repairs(state, monkeypatch: pytest.MonkeyPatch) -> None:
    def boom(*_args, **_kwargs):
        raise AssertionError("repair called from the reward path")

    monkeypatch.setattr("lsabench.repair.repair", boom)
    reward_total(render_action({0: 2, 1: 2, 9: 0}), state, RewardWeights(), seed=1)


@pytest.mark.unit
def test_reward_components_stay_bounded() -> None:
    rng = np.random.default_rng(0)
    config = EnvConfig(num_users=8, num_channels=6, k_min=1, k_max=8, occupied_fraction=0.3, link=HIGH_SNR)
    weights = RewardWeights()
    for i in range(1000):
        state = initial_state(config, seed=i % 25)
        n = int(rng.integers(0, 6))
        raw = {int(rng.integers(0, 10)): int(rng.integers(0, 8)) for _ in range(n)}
        text = "prose only" if i % 7 == 0 else render_candidate_text(raw, int(rng.integers(0, 700)))
        out = reward_total(text, state, weights, seed=i)
        assert 0.0 <= out.r_struct <= 1.2
        assert -10.0 <= out.r_perf <= 10.0
        assert -5.0 <= out.r_depth <= 0.0
        assert -10.0 <= out.total <= 10.0
        assert out.psi in (0.0, 0.3, 1.0)
        if out.psi == 0.0:
            assert out.r_perf == 0.0


@pytest.mark.unit
def test_weight_presets_and_validation() -> None:
    assert WEIGHT_PRESETS["baseline"] == RewardWeights()
    assert WEIGHT_PRESETS["no_depth"].lambda3 == 0.0
    with pytest.raises(RewardError):
        RewardWeights(l_thr=0)
    with pytest.raises(RewardError):
        RewardWeights(clamp_lo=1.0, clamp_hi=1.0)
