"""All-in-one demo: simulator, gateway, and API in one process.

The pieces talk exactly as they would cross-process, just over an
in-memory transport instead of TCP: the simulator serves RTU frames on
the slave side of a bus, the gateway polls the master side and appends
to the store writer, and the API reads through its own read-only
handle. Faults can be scheduled relative to start time to demonstrate
outage handling.

The gateway starts half a poll interval after the simulator, so polls
land mid-way between simulator ticks. With a fixed seed this makes the
stored value sequence reproducible run to run: poll k always observes
the state after exactly k ticks.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field

from .api import ApiServer, ApiSettings, AuthRecord
from .gateway import DeviceConfig, GatewayFatal, PollPolicy, run_loop
from .model import GapEvent, Sample
from .simulator import AnalyserSim, FaultKind, serve
from .store import Store
from .transport import InMemoryBus

log = logging.getLogger(__name__)

DEMO_USERNAME = "admin"
DEMO_PASSWORD = "admin"
DEMO_DEVICE = "pm01"
MEM_TRANSPORT = "mem:demo"


@dataclass(frozen=True)
class ScheduledFault:
    at_s: float
    fault: FaultKind

    @classmethod
    def parse(cls, text: str) -> "ScheduledFault":
        """Parse a ``kind@seconds`` flag value like ``fuse_blown@30``."""
        kind_text, sep, at_text = text.partition("@")
        if not sep:
            raise ValueError(f"expected KIND@SECONDS, got {text!r}")
        try:
            fault = FaultKind(kind_text)
        except ValueError:
            names = ", ".join(k.value for k in FaultKind)
            raise ValueError(f"unknown fault {kind_text!r} (one of: {names})") from None
        try:
            at_s = float(at_text)
        except ValueError:
            raise ValueError(f"bad time in {text!r}") from None
        if at_s < 0:
            raise ValueError(f"fault time must be non-negative: {text!r}")
        return cls(at_s=at_s, fault=fault)


@dataclass
class DemoOptions:
    store_path: str = "lvmon-demo.store"
    seed: int | None = 42
    device_name: str = DEMO_DEVICE
    unit: int = 1
    poll: PollPolicy = field(default_factory=PollPolicy)
    api: ApiSettings = field(default_factory=ApiSettings)
    users: list[AuthRecord] = field(default_factory=list)
    faults: list[ScheduledFault] = field(default_factory=list)


@dataclass
class DemoStats:
    samples: int
    gaps: int
    store_path: str
    started_ms: int = 0


class Demo:
    """Owns all demo components; start(), then wait() or stop()."""

    def __init__(self, options: DemoOptions):
        self.options = options
        self.stop_event = threading.Event()
        self.bus = InMemoryBus()
        self.sim = AnalyserSim(unit=options.unit, seed=options.seed)
        self.device = DeviceConfig(
            name=options.device_name, unit=options.unit, transport=MEM_TRANSPORT)
        self.writer: Store | None = None
        self.api: ApiServer | None = None
        self._threads: list[threading.Thread] = []
        self._timers: list[threading.Timer] = []
        self.gateway_error: GatewayFatal | None = None
        self.started_ms = 0

    def start(self) -> "Demo":
        options = self.options
        self.started_ms = int(time.time() * 1000)
        self.writer = Store.open_writer(options.store_path)
        users = options.users or [
            AuthRecord.from_password(DEMO_USERNAME, DEMO_PASSWORD)]
        self.api = ApiServer(
            Store.open_reader(options.store_path),
            [self.device], users, options.api).start()

        sim_thread = threading.Thread(
            target=serve,
            args=([self.sim], self.bus.slave_endpoint(), self.stop_event),
            kwargs={"tick_period": options.poll.interval_s},
            name="demo-sim", daemon=True)
        sim_thread.start()
        self._threads.append(sim_thread)

        gw_thread = threading.Thread(
            target=self._run_gateway, name="demo-gateway", daemon=True)
        gw_thread.start()
        self._threads.append(gw_thread)

        for item in options.faults:
            timer = threading.Timer(
                item.at_s, self.sim.inject, args=(item.fault,))
            timer.daemon = True
            timer.start()
            self._timers.append(timer)
        log.info("demo up: api=http://%s:%d store=%s device=%s",
                 *self.api.address, options.store_path, options.device_name)
        return self

    def _run_gateway(self) -> None:
        # offset polling by half an interval so a poll never races a tick
        if self.stop_event.wait(self.options.poll.interval_s / 2):
            return
        try:
            run_loop(
                [self.device], self.options.poll, self.writer,
                stop=self.stop_event,
                endpoint_factory=lambda _: self.bus.master_endpoint())
        except GatewayFatal as exc:
            self.gateway_error = exc

    def wait(self, duration_s: float | None) -> None:
        """Block for the given time (or until interrupted; None = forever)."""
        if duration_s is None:
            while not self.stop_event.is_set():
                time.sleep(0.2)
        else:
            self.stop_event.wait(duration_s)

    def stop(self) -> DemoStats:
        self.stop_event.set()
        for timer in self._timers:
            timer.cancel()
        for thread in self._threads:
            thread.join(timeout=10.0)
        if self.api is not None:
            self.api.store.close()
            self.api.stop()
        stats = self._stats()
        if self.writer is not None:
            self.writer.close()
        self.bus.close()
        return stats

    def _stats(self) -> DemoStats:
        samples = gaps = 0
        if self.writer is not None:
            for row in self.writer.all_rows(self.options.device_name):
                if isinstance(row.record, Sample):
                    samples += 1
                elif isinstance(row.record, GapEvent):
                    gaps += 1
        return DemoStats(samples=samples, gaps=gaps,
                         store_path=self.options.store_path,
                         started_ms=self.started_ms)


def run_demo(options: DemoOptions, duration_s: float | None) -> DemoStats:
    """Run a demo to completion; Ctrl-C stops it cleanly."""
    demo = Demo(options).start()
    try:
        demo.wait(duration_s)
    except KeyboardInterrupt:
        log.info("interrupted, stopping demo")
    stats = demo.stop()
    if demo.gateway_error is not None:
        raise demo.gateway_error
    return stats
