from __future__ import annotations

import threading

import pytest

from lvmon.gateway import DeviceConfig, ModbusMaster, PollPolicy
from lvmon.simulator import AnalyserSim, serve
from lvmon.transport import InMemoryBus


class SimRig:
    """A simulator served over an in-memory bus, plus a master to poll it."""

    def __init__(self, sims: list[AnalyserSim], tick_period: float = 1.0):
        self.sims = sims
        self.bus = InMemoryBus()
        self.stop = threading.Event()
        self.thread = threading.Thread(
            target=serve,
            args=(sims, self.bus.slave_endpoint(), self.stop),
            kwargs={"tick_period": tick_period},
            daemon=True)
        self.thread.start()
        self.master = ModbusMaster(self.bus.master_endpoint())

    def shutdown(self) -> None:
        self.stop.set()
        self.thread.join(timeout=5.0)
        self.bus.close()


@pytest.fixture
def rig():
    """Default single-simulator rig: unit 1, seed 42."""
    r = SimRig([AnalyserSim(unit=1, seed=42)])
    yield r
    r.shutdown()


@pytest.fixture
def device():
    return DeviceConfig(name="pm01", unit=1, transport="mem:test")


@pytest.fixture
def fast_policy():
    """Short timeouts so failure paths do not slow the suite down."""
    return PollPolicy(interval_ms=250, timeout_ms=60, retries=2)
