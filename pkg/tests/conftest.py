import asyncio

import pytest

from ctxpool import protocol
from ctxpool.core import A10, TITAN_X_PASCAL, Config, default_recipe
from ctxpool.net import run_virtual


class ManualClock:
    """Clock stand-in for driving the scheduler synchronously."""

    time_scale = 1.0

    def __init__(self, t: float = 0.0):
        self.t = t

    def now(self) -> float:
        return self.t

    def wall(self, emulated: float) -> float:
        return max(emulated, 0.0)

    async def sleep(self, emulated: float) -> None:
        await asyncio.sleep(0)


class RecordingConn:
    """Connection stand-in that keeps every message the scheduler sends."""

    def __init__(self, peer="fake"):
        self.peer = peer
        self.sent: list[dict] = []
        self.closed = False

    def send(self, msg: dict) -> bool:
        if self.closed:
            return False
        protocol.validate(msg)
        self.sent.append(msg)
        return True

    def close(self) -> None:
        self.closed = True

    def of_type(self, kind: str) -> list[dict]:
        return [m for m in self.sent if m["type"] == kind]


def register_msg(worker_id, gpu=A10, inventory=(), address="auto"):
    return protocol.message(
        "REGISTER",
        worker_id=worker_id,
        gpu_model=gpu,
        resources={"cores": 2, "memory_bytes": 10 * 10**9, "disk_bytes": 70 * 10**9, "gpus": 1},
        cache_inventory=list(inventory),
        address=f"{worker_id}:peer" if address == "auto" else address,
    )


@pytest.fixture
def recipe():
    return default_recipe()


@pytest.fixture
def config():
    return Config()


@pytest.fixture
def virtual():
    """Run a coroutine to completion on a fresh virtual-clock loop."""
    return run_virtual


__all__ = ["ManualClock", "RecordingConn", "register_msg", "A10", "TITAN_X_PASCAL"]


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    # lets fixtures see whether the test body passed
    outcome = yield
    rep = outcome.get_result()
    setattr(item, f"rep_{rep.when}", rep)
