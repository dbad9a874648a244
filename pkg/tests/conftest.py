from __future__ import annotations

import os
import sys
from pathlib import Path
from typing import Callable, Sequence

import pytest

from lsabench.netenv import ChannelSpec, LinkParams, NetworkState, UserNode

REPO_ROOT = Path(__file__).resolve().parents[1]
SRC_PATH = str(REPO_ROOT / "src")
FIXTURES = REPO_ROOT / "tests" / "fixtures"

StateFactory = Callable[..., NetworkState]


@pytest.fixture(autouse=True)
def _isolate_remote_env(monkeypatch: pytest.MonkeyPatch) -> None:
    for name in ("LSABENCH_REMOTE_URL", "LSABENCH_REMOTE_TOKEN", "LSABENCH_REMOTE_MODEL"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.setenv("LSABENCH_REMOTE_TIMEOUT_SEC", "2")
    monkeypatch.setenv("LSABENCH_REMOTE_RETRIES", "1")


@pytest.fixture
def make_state() -> StateFactory:
    """Hand-built state: users at (x, y) metres, channels by bandwidth, ids by position."""

    def build(
        positions: Sequence[tuple[float, float]],
        bandwidths: Sequence[float],
        active: Sequence[int] | None = None,
        occupied: Sequence[int] = (),
        link: LinkParams | None = None,
        slot: int = 0,
    ) -> NetworkState:
        users = tuple(UserNode(id=i, x_m=x, y_m=y) for i, (x, y) in enumerate(positions))
        channels = tuple(
            ChannelSpec(id=j, bandwidth_hz=b, occupied=j in set(occupied)) for j, b in enumerate(bandwidths)
        )
        return NetworkState(
            slot=slot,
            users=users,
            channels=channels,
            active_ids=tuple(range(len(positions))) if active is None else tuple(active),
            link=link or LinkParams(),
        )

    return build


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def cli_cmd() -> list[str]:
    return [sys.executable, "-m", "lsabench.cli"]


@pytest.fixture
def cli_env() -> dict[str, str]:
    env = os.environ.copy()
    existing = env.get("PYTHONPATH")
    env["PYTHONPATH"] = SRC_PATH if not existing else f"{SRC_PATH}:{existing}"
    return env
