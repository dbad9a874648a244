from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np

# Independent random streams per seed; a slot index is appended for per-slot draws.
STREAM_TOPOLOGY = 0
STREAM_CHANNELS = 1
STREAM_TRAFFIC = 2
STREAM_OCCUPANCY = 3

DEFAULT_BANDWIDTH_RANGE_HZ = (5e6, 20e6)
LN2 = math.log(2.0)


class NetEnvError(RuntimeError):
    pass


class ZeroDistance(NetEnvError):
    pass


class NonPositiveDistance(NetEnvError):
    pass


class RangeExceedsPopulation(NetEnvError):
    pass


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def watts_to_dbm(watts: float) -> float:
    if watts <= 0:
        raise NetEnvError("watts_to_dbm needs a positive power")
    return 10.0 * math.log10(watts) + 30.0


@dataclass(slots=True, frozen=True)
class LinkParams:
    """Link budget of the single cell.

    Defaults are the reference link budget (23 dBm, alpha 3.5, -112 dBm/Hz, 500 m radius) with
    0 dBi antennas and a 2.4 GHz carrier. `distance_floor` bounds the normalized
    distance from below; None makes a user at the base station an error.
    """

    tx_power_dbm: float = 23.0
    antenna_gain_tx: float = 1.0
    antenna_gain_rx: float = 1.0
    wavelength_m: float = 0.125
    path_loss_exp: float = 3.5
    noise_density_dbm_hz: float = -112.0
    cell_radius_m: float = 500.0
    distance_floor: float | None = 1e-3

    def __post_init__(self) -> None:
        if not math.isfinite(self.tx_power_dbm):
            raise NetEnvError("tx_power_dbm must be finite")
        if not self.path_loss_exp > 2:
            raise NetEnvError("path_loss_exp must be > 2")
        if not self.cell_radius_m > 0:
            raise NetEnvError("cell_radius_m must be > 0")
        if not self.wavelength_m > 0:
            raise NetEnvError("wavelength_m must be > 0")
        if not (self.antenna_gain_tx > 0 and self.antenna_gain_rx > 0):
            raise NetEnvError("antenna gains must be > 0")
        if self.distance_floor is not None and not (0 < self.distance_floor <= 1):
            raise NetEnvError("distance_floor must be in (0, 1]")

    @property
    def tx_power_w(self) -> float:
        return dbm_to_watts(self.tx_power_dbm)

    @property
    def noise_density_w_hz(self) -> float:
        return dbm_to_watts(self.noise_density_dbm_hz)


LINK_PROFILES: dict[str, LinkParams] = {
    "reference": LinkParams(),
    # Thermal floor and a 100 MHz carrier: rates depend on the assigned bandwidth.
    "high_snr": LinkParams(noise_density_dbm_hz=-174.0, wavelength_m=3.0),
}


@dataclass(slots=True, frozen=True)
class UserNode:
    id: int
    x_m: float
    y_m: float


@dataclass(slots=True, frozen=True)
class ChannelSpec:
    id: int
    bandwidth_hz: float
    occupied: bool = False

    def __post_init__(self) -> None:
        if not self.bandwidth_hz > 0:
            raise NetEnvError(f"channel {self.id}: bandwidth_hz must be > 0")


@dataclass(frozen=True)
class NetworkState:
    slot: int
    users: tuple[UserNode, ...]
    channels: tuple[ChannelSpec, ...]
    active_ids: tuple[int, ...]
    link: LinkParams = field(default_factory=LinkParams)
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.slot < 0:
            raise NetEnvError("slot must be non-negative")
        if len(set(self.active_ids)) != len(self.active_ids):
            raise NetEnvError("active_ids contains duplicates")
        unknown = [u for u in self.active_ids if u not in self.user_by_id]
        if unknown:
            raise NetEnvError(f"active_ids not in users: {unknown}")

    @cached_property
    def user_by_id(self) -> dict[int, UserNode]:
        return {u.id: u for u in self.users}

    @cached_property
    def channel_by_id(self) -> dict[int, ChannelSpec]:
        return {c.id: c for c in self.channels}

    @cached_property
    def active_set(self) -> frozenset[int]:
        return frozenset(self.active_ids)

    @cached_property
    def active_index(self) -> dict[int, int]:
        return {u: i for i, u in enumerate(self.active_ids)}

    @cached_property
    def channel_index(self) -> dict[int, int]:
        return {c.id: j for j, c in enumerate(self.channels)}

    @cached_property
    def idle_ids(self) -> tuple[int, ...]:
        return tuple(sorted(c.id for c in self.channels if not c.occupied))

    @cached_property
    def idle_set(self) -> frozenset[int]:
        return frozenset(self.idle_ids)


@dataclass(slots=True, frozen=True)
class EnvConfig:
    num_users: int
    num_channels: int
    k_min: int
    k_max: int
    occupied_fraction: float = 0.0
    link: LinkParams = field(default_factory=LinkParams)
    bandwidth_range_hz: tuple[float, float] = DEFAULT_BANDWIDTH_RANGE_HZ

    def __post_init__(self) -> None:
        if self.num_users < 0 or self.num_channels < 0:
            raise NetEnvError("num_users and num_channels must be non-negative")
        if not 0 <= self.k_min <= self.k_max <= self.num_users:
            raise RangeExceedsPopulation(
                f"need 0 <= k_min <= k_max <= num_users, got {self.k_min}, {self.k_max}, {self.num_users}"
            )
        if not 0 <= self.occupied_fraction < 1:
            raise NetEnvError("occupied_fraction must be in [0, 1)")
        lo, hi = self.bandwidth_range_hz
        if not 0 < lo <= hi:
            raise NetEnvError("bandwidth_range_hz must satisfy 0 < lo <= hi")

    @classmethod
    def fixed(cls, num_users: int, num_channels: int, k_active: int, **kw) -> EnvConfig:
        """(U, C, K) triple with a fixed per-slot requester count."""
        return cls(num_users=num_users, num_channels=num_channels, k_min=k_active, k_max=k_active, **kw)


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def sample_topology(seed: int, num_users: int, link: LinkParams) -> list[UserNode]:
    # A homogeneous PPP conditioned on its count is uniform on the disk.
    if num_users < 0:
        raise NetEnvError("num_users must be non-negative")
    rng = _rng(seed, STREAM_TOPOLOGY)
    radius = link.cell_radius_m * np.sqrt(rng.random(num_users))
    angle = 2.0 * np.pi * rng.random(num_users)
    xs = radius * np.cos(angle)
    ys = radius * np.sin(angle)
    return [UserNode(id=i, x_m=float(x), y_m=float(y)) for i, (x, y) in enumerate(zip(xs, ys))]


def sample_channels(
    seed: int,
    num_channels: int,
    bandwidth_range_hz: tuple[float, float] = DEFAULT_BANDWIDTH_RANGE_HZ,
) -> list[ChannelSpec]:
    rng = _rng(seed, STREAM_CHANNELS)
    lo, hi = bandwidth_range_hz
    bws = rng.uniform(lo, hi, size=num_channels) if hi > lo else np.full(num_channels, lo)
    return [ChannelSpec(id=j, bandwidth_hz=float(b)) for j, b in enumerate(bws)]


def normalized_distance(user: UserNode, link: LinkParams) -> float:
    d = math.hypot(user.x_m, user.y_m) / link.cell_radius_m
    if link.distance_floor is None:
        if d == 0:
            raise ZeroDistance(f"user {user.id} is co-located with the base station")
        return d
    return max(d, link.distance_floor)


def received_power(link: LinkParams, d_norm: float) -> float:
    if not d_norm > 0:
        raise NonPositiveDistance(f"d_norm must be > 0, got {d_norm}")
    ratio = link.wavelength_m / (4.0 * math.pi * d_norm * link.cell_radius_m)
    return link.tx_power_w * link.antenna_gain_tx * link.antenna_gain_rx * ratio**link.path_loss_exp


def achievable_rate(
    power_w: float,
    interference_w: float,
    bandwidth_hz: float,
    noise_density_dbm_hz: float,
) -> float:
    if power_w < 0 or interference_w < 0:
        raise NetEnvError("power and interference must be non-negative")
    if not bandwidth_hz > 0:
        raise NetEnvError("bandwidth must be > 0")
    noise_w = dbm_to_watts(noise_density_dbm_hz) * bandwidth_hz
    return bandwidth_hz * math.log1p(power_w / (noise_w + interference_w)) / LN2


def power_vector(state: NetworkState, user_ids: Sequence[int] | None = None) -> np.ndarray:
    """Received power (W) per user, in the order of `user_ids` (default: active order)."""
    ids = state.active_ids if user_ids is None else user_ids
    link = state.link
    d = np.array([normalized_distance(state.user_by_id[u], link) for u in ids], dtype=float)
    ratio = link.wavelength_m / (4.0 * np.pi * d * link.cell_radius_m)
    return link.tx_power_w * link.antenna_gain_tx * link.antenna_gain_rx * ratio**link.path_loss_exp


def rate_submatrix(state: NetworkState, user_ids: Sequence[int], channel_ids: Sequence[int]) -> np.ndarray:
    """Interference-free rates (bit/s) for the given users x channels block."""
    if len(user_ids) == 0 or len(channel_ids) == 0:
        return np.zeros((len(user_ids), len(channel_ids)))
    power = power_vector(state, user_ids)
    bw = np.array([state.channel_by_id[c].bandwidth_hz for c in channel_ids], dtype=float)
    noise = state.link.noise_density_w_hz * bw
    return bw[None, :] * np.log1p(power[:, None] / noise[None, :]) / LN2


def rate_matrix(state: NetworkState) -> np.ndarray:
    """K_t x C rate matrix; rows follow active_ids, columns follow state.channels."""
    return rate_submatrix(state, state.active_ids, [c.id for c in state.channels])


def step_traffic(seed: int, state: NetworkState, k_min: int, k_max: int) -> list[int]:
    if not 0 <= k_min <= k_max <= len(state.users):
        raise RangeExceedsPopulation(
            f"need 0 <= k_min <= k_max <= {len(state.users)}, got [{k_min}, {k_max}]"
        )
    rng = _rng(seed, STREAM_TRAFFIC, state.slot)
    k = int(rng.integers(k_min, k_max + 1))
    ids = np.array([u.id for u in state.users], dtype=np.int64)
    picked = rng.choice(ids, size=k, replace=False) if k else np.empty(0, dtype=np.int64)
    return sorted(int(u) for u in picked)


def step_occupancy(seed: int, state: NetworkState, occupied_fraction: float) -> list[ChannelSpec]:
    if not 0 <= occupied_fraction < 1:
        raise NetEnvError("occupied_fraction must be in [0, 1)")
    n_busy = int(math.floor(occupied_fraction * len(state.channels)))
    busy: set[int] = set()
    if n_busy:
        rng = _rng(seed, STREAM_OCCUPANCY, state.slot)
        ids = np.array([c.id for c in state.channels], dtype=np.int64)
        busy = {int(c) for c in rng.choice(ids, size=n_busy, replace=False)}
    return [replace(c, occupied=c.id in busy) for c in state.channels]


def initial_state(config: EnvConfig, seed: int) -> NetworkState:
    users = tuple(sample_topology(seed, config.num_users, config.link))
    channels = tuple(sample_channels(seed, config.num_channels, config.bandwidth_range_hz))
    return state_at_slot(config, seed, users, channels, slot=0)


def state_at_slot(
    config: EnvConfig,
    seed: int,
    users: tuple[UserNode, ...],
    channels: tuple[ChannelSpec, ...],
    slot: int,
) -> NetworkState:
    base = NetworkState(slot=slot, users=users, channels=channels, active_ids=(), link=config.link, rng_seed=seed)
    active = step_traffic(seed, base, config.k_min, config.k_max)
    occupancy = step_occupancy(seed, base, config.occupied_fraction)
    return NetworkState(
        slot=slot,
        users=users,
        channels=tuple(occupancy),
        active_ids=tuple(active),
        link=config.link,
        rng_seed=seed,
    )


def episode_states(config: EnvConfig, seed: int, slots: int) -> Iterator[NetworkState]:
    """Topology and bandwidths fixed for the episode; traffic and occupancy per slot."""
    first = initial_state(config, seed)
    yield first
    for t in range(1, slots):
        yield state_at_slot(config, seed, first.users, first.channels, slot=t)


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed derived from a tuple of integers.

    Parts are read as 64-bit two's-complement words, so negative parts stay distinct.
    """
    words = [int(p) & 0xFFFFFFFFFFFFFFFF for p in parts]
    return int(np.random.SeedSequence(words).generate_state(2, dtype=np.uint64)[0] >> 1)
