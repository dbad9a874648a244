from __future__ import annotations

import math

import numpy as np
import pytest

from lsabench.netenv import (
    LINK_PROFILES,
    EnvConfig,
    LinkParams,
    NetEnvError,
    NonPositiveDistance,
    RangeExceedsPopulation,
    UserNode,
    ZeroDistance,
    achievable_rate,
    dbm_to_watts,
    derive_seed,
    episode_states,
    initial_state,
    normalized_distance,
    rate_matrix,
    received_power,
    sample_channels,
    sample_topology,
    step_occupancy,
    step_traffic,
    watts_to_dbm,
)


@pytest.mark.unit
def test_dbm_watts_round_trip() -> None:
    assert dbm_to_watts(30.0) == pytest.approx(1.0, rel=1e-12)
    assert dbm_to_watts(23.0) == pytest.approx(0.19952623149688797, rel=1e-12)
    for dbm in (-174.0, -112.0, 0.0, 23.0):
        assert watts_to_dbm(dbm_to_watts(dbm)) == pytest.approx(dbm, rel=1e-12, abs=1e-12)
    with pytest.raises(NetEnvError):
        watts_to_dbm(0.0)


@pytest.mark.unit
def test_sample_topology_empty_and_inside_disk() -> None:
    link = LinkParams()
    assert sample_topology(7, 0, link) == []
    nodes = sample_topology(3, 500, link)
    assert [n.id for n in nodes] == list(range(500))
    assert all(math.hypot(n.x_m, n.y_m) <= 500.0 + 1e-9 for n in nodes)


@pytest.mark.unit
def test_sample_topology_mean_radius_matches_uniform_disk() -> None:
    nodes = sample_topology(42, 1000, LinkParams())
    r = np.array([math.hypot(n.x_m, n.y_m) for n in nodes])
    expected = 2.0 / 3.0 * 500.0
    # radial sd of a uniform disk is R * sqrt(1/2 - 4/9)
    se = 500.0 * math.sqrt(0.5 - 4.0 / 9.0) / math.sqrt(r.size)
    assert abs(r.mean() - expected) <= 3 * se


@pytest.mark.unit
def test_sample_topology_is_seeded() -> None:
    link = LinkParams()
    assert sample_topology(11, 20, link) == sample_topology(11, 20, link)
    assert sample_topology(11, 20, link) != sample_topology(12, 20, link)


@pytest.mark.unit
def test_sample_channels_bandwidth_range() -> None:
    channels = sample_channels(5, 200)
    assert all(5e6 <= c.bandwidth_hz <= 20e6 for c in channels)
    assert not any(c.occupied for c in channels)


@pytest.mark.unit
@pytest.mark.parametrize(
    ("x", "y", "expected"),
    [(500.0, 0.0, 1.0), (300.0, 400.0, 1.0), (100.0, 0.0, 0.2)],
)
def test_normalized_distance(x: float, y: float, expected: float) -> None:
    assert normalized_distance(UserNode(0, x, y), LinkParams()) == pytest.approx(expected, rel=1e-12)


@pytest.mark.unit
def test_normalized_distance_at_base_station() -> None:
    at_bs = UserNode(0, 0.0, 0.0)
    assert normalized_distance(at_bs, LinkParams()) == 1e-3
    with pytest.raises(ZeroDistance):
        normalized_distance(at_bs, LinkParams(distance_floor=None))


@pytest.mark.unit
def test_received_power_unit_ratio_and_power_law() -> None:
    d_norm = 0.3
    link = LinkParams(wavelength_m=4.0 * math.pi * d_norm * 500.0)
    assert received_power(link, d_norm) == pytest.approx(link.tx_power_w, rel=1e-12)

    base = LinkParams()
    ratio = received_power(base, 0.4) / received_power(base, 0.2)
    assert ratio == pytest.approx(2.0 ** -3.5, rel=1e-12)


@pytest.mark.unit
def test_received_power_formula_oracle() -> None:
    # 23 dBm, unit gains, 0.125 m, 100 m, alpha 3.5
    oracle = 0.19952623149688797 * (0.125 / (4.0 * math.pi * 100.0)) ** 3.5
    assert received_power(LinkParams(), 0.2) == pytest.approx(oracle, rel=1e-12)


@pytest.mark.unit
def test_received_power_rejects_non_positive_distance() -> None:
    with pytest.raises(NonPositiveDistance):
        received_power(LinkParams(), 0.0)


@pytest.mark.unit
def test_achievable_rate_cases() -> None:
    assert achievable_rate(0.0, 0.0, 1e6, -112.0) == 0.0
    noise = dbm_to_watts(-112.0) * 1e6
    assert achievable_rate(3.0 * noise, 0.0, 1e6, -112.0) == pytest.approx(2e6, rel=1e-12)
    # interference adds to the noise floor
    assert achievable_rate(3.0 * noise, 2.0 * noise, 1e6, -112.0) == pytest.approx(1e6 * math.log2(2.0), rel=1e-12)


@pytest.mark.unit
def test_achievable_rate_high_precision_oracle() -> None:
    sigma2 = 10.0 ** ((-112.0 - 30.0) / 10.0) * 1e7
    oracle = 1e7 * math.log2(1.0 + 1e-9 / sigma2)
    assert achievable_rate(1e-9, 0.0, 1e7, -112.0) == pytest.approx(oracle, rel=1e-12)


@pytest.mark.unit
def test_rate_matrix_elementwise(make_state) -> None:
    state = make_state(
        [(100.0, 0.0), (0.0, 250.0), (-300.0, 300.0)],
        [5e6, 10e6, 20e6, 7e6],
        active=[0, 2],
        link=LINK_PROFILES["high_snr"],
    )
    rates = rate_matrix(state)
    assert rates.shape == (2, 4)
    for i, u in enumerate(state.active_ids):
        p = received_power(state.link, normalized_distance(state.user_by_id[u], state.link))
        for j, ch in enumerate(state.channels):
            expected = achievable_rate(p, 0.0, ch.bandwidth_hz, state.link.noise_density_dbm_hz)
            assert rates[i, j] == pytest.approx(expected, rel=1e-12)


@pytest.mark.unit
def test_rate_matrix_empty_and_equal_bandwidth(make_state) -> None:
    state = make_state([(100.0, 0.0), (0.0, 200.0)], [10e6, 10e6, 10e6], active=[])
    assert rate_matrix(state).shape == (0, 3)
    full = rate_matrix(make_state([(100.0, 0.0), (0.0, 200.0)], [10e6, 10e6, 10e6]))
    assert np.allclose(full, full[:, :1], rtol=0, atol=0)


@pytest.mark.unit
def test_step_traffic_bounds_and_determinism() -> None:
    state = initial_state(EnvConfig.fixed(10, 5, 0), seed=1)
    assert step_traffic(1, state, 0, 0) == []
    assert step_traffic(1, state, 10, 10) == list(range(10))
    picked = step_traffic(9, state, 2, 6)
    assert 2 <= len(picked) <= 6
    assert picked == sorted(set(picked))
    assert picked == step_traffic(9, state, 2, 6)
    with pytest.raises(RangeExceedsPopulation):
        step_traffic(1, state, 0, 11)


@pytest.mark.unit
def test_step_occupancy_count() -> None:
    state = initial_state(EnvConfig.fixed(4, 10, 1), seed=2)
    channels = step_occupancy(2, state, 0.35)
    assert sum(c.occupied for c in channels) == 3
    assert channels == step_occupancy(2, state, 0.35)


@pytest.mark.unit
def test_env_config_validation() -> None:
    with pytest.raises(RangeExceedsPopulation):
        EnvConfig.fixed(3, 5, 4)
    with pytest.raises(NetEnvError):
        EnvConfig.fixed(3, 5, 1, occupied_fraction=1.0)


@pytest.mark.unit
def test_episode_states_keep_topology() -> None:
    config = EnvConfig(num_users=12, num_channels=8, k_min=1, k_max=6, occupied_fraction=0.25)
    states = list(episode_states(config, seed=4, slots=5))
    assert [s.slot for s in states] == list(range(5))
    assert all(s.users == states[0].users for s in states)
    assert all([c.bandwidth_hz for c in s.channels] == [c.bandwidth_hz for c in states[0].channels] for s in states)
    assert all(sum(c.occupied for c in s.channels) == 2 for s in states)
    assert all(1 <= len(s.active_ids) <= 6 for s in states)


@pytest.mark.unit
def test_link_params_validation() -> None:
    with pytest.raises(NetEnvError):
        LinkParams(path_loss_exp=2.0)
    with pytest.raises(NetEnvError):
        LinkParams(cell_radius_m=0.0)


@pytest.mark.unit
def test_derive_seed_keeps_sign_and_is_stable() -> None:
    assert derive_seed(-3, 1) != derive_seed(3, 1)
    assert derive_seed(1, -1) != derive_seed(1, 1)
    assert derive_seed(7, 2) == derive_seed(7, 2)
    assert 0 <= derive_seed(-(2**40), 5) < 2**63
