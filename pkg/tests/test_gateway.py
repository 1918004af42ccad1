"""Polling master: retries, deadlines, gap classification, the run loop."""

from __future__ import annotations

import logging
import threading
import time

import pytest

from lvmon.gateway import (
    DeviceConfig,
    GatewayFatal,
    ModbusMaster,
    PollPolicy,
    _MonotoneStamp,
    _validate_fleet,
    poll_device,
    read_all_fast,
    run_loop,
)
from lvmon.model import DEFAULT_MAP, KIND_ORDER, GapEvent, GapReason, MeasurementKind, RegisterMap, Sample
from lvmon.modbus import crc16_bytes, decode_request, encode_read_response, f32_round, f32_to_registers
from lvmon.simulator import AnalyserSim
from lvmon.transport import InMemoryBus, TransportClosed

from conftest import SimRig


class FakeSlave:
    """Synchronous endpoint: every send is answered by a handler.

    The handler receives the raw request frame and returns the bytes to
    queue for the next recv (None queues nothing; the read times out).
    """

    def __init__(self, handler):
        self.handler = handler
        self.pending: list[bytes] = []
        self.sends = 0
        self.closed = False

    def send(self, data: bytes) -> None:
        self.sends += 1
        reply = self.handler(data)
        if reply is not None:
            self.pending.append(reply)

    def recv(self, timeout: float) -> bytes:
        if self.pending:
            return self.pending.pop(0)
        if timeout > 0:
            time.sleep(min(timeout, 0.005))
        return b""

    def drain(self) -> None:
        self.pending.clear()

    def close(self) -> None:
        self.closed = True


def sim_slave(sim: AnalyserSim) -> FakeSlave:
    return FakeSlave(sim.handle_frame)


# -- poll_device ------------------------------------------------------------

def test_poll_device_happy_path(device, fast_policy):
    sim = AnalyserSim(unit=1, seed=42)
    sim.tick(1.0)
    master = ModbusMaster(sim_slave(sim))
    out = poll_device(master, device, fast_policy)
    assert isinstance(out, Sample)
    assert out.device == "pm01"
    for kind in KIND_ORDER:
        assert out.value(kind) == sim.reading(kind)


def test_poll_device_power_identity(device, fast_policy):
    sim = AnalyserSim(unit=1, seed=9)
    sim.tick(1.0)
    master = ModbusMaster(sim_slave(sim))
    out = poll_device(master, device, fast_policy)
    assert isinstance(out, Sample)
    want = f32_round(
        f32_round(out.voltage) * f32_round(out.current)
        * f32_round(out.power_factor))
    assert out.active_power == want


def test_poll_device_timestamp_is_wall_clock_ms(device, fast_policy):
    sim = AnalyserSim(unit=1, seed=1)
    master = ModbusMaster(sim_slave(sim))
    before = int(time.time() * 1000)
    out = poll_device(master, device, fast_policy)
    after = int(time.time() * 1000)
    assert before <= out.ts <= after


def test_poll_device_silence_yields_timeout_gap(device, fast_policy):
    master = ModbusMaster(FakeSlave(lambda _frame: None))
    start = time.monotonic()
    out = poll_device(master, device, fast_policy)
    elapsed = time.monotonic() - start
    assert isinstance(out, GapEvent)
    assert out.reason is GapReason.TIMEOUT
    # the whole cycle must fit in one interval, not retries*timeout*kinds
    assert elapsed <= fast_policy.interval_s + 0.1


def test_poll_device_deadline_caps_attempts(device):
    policy = PollPolicy(interval_ms=10_000, timeout_ms=10_000, retries=3)
    master = ModbusMaster(FakeSlave(lambda _frame: None))
    start = time.monotonic()
    out = poll_device(master, device, policy,
                      deadline=time.monotonic() + 0.25)
    elapsed = time.monotonic() - start
    assert isinstance(out, GapEvent) and out.reason is GapReason.TIMEOUT
    assert elapsed < 0.6


def test_poll_device_retry_recovers_dropped_request(device, fast_policy):
    sim = AnalyserSim(unit=1, seed=3)
    sim.tick(1.0)
    dropped = {"count": 0}

    def flaky(frame: bytes) -> bytes | None:
        if dropped["count"] == 0:
            dropped["count"] += 1
            return None
        return sim.handle_frame(frame)

    master = ModbusMaster(FakeSlave(flaky))
    out = poll_device(master, device, fast_policy)
    assert isinstance(out, Sample)
    assert dropped["count"] == 1


def test_poll_device_exception_reply_is_terminal(fast_policy):
    # device expects energy somewhere the sim does not map: the sim
    # answers with an illegal-address exception, and the gateway must
    # not retry an answered request
    starts = {k: DEFAULT_MAP.start(k) for k in KIND_ORDER}
    starts[MeasurementKind.ENERGY] = 0x0100
    config = DeviceConfig(name="pm01", unit=1, transport="mem:test",
                          register_map=RegisterMap(starts))
    sim = AnalyserSim(unit=1, seed=3)
    endpoint = sim_slave(sim)
    master = ModbusMaster(endpoint)
    out = poll_device(master, config, fast_policy)
    assert isinstance(out, GapEvent)
    assert out.reason is GapReason.EXCEPTION
    assert out.exception_code == 0x02
    # five good reads plus exactly one refused read, no retry of it
    assert endpoint.sends == len(KIND_ORDER)


def test_poll_device_corrupt_replies_fail_fast(device, fast_policy):
    sim = AnalyserSim(unit=1, seed=4)

    def corrupting(frame: bytes) -> bytes | None:
        reply = sim.handle_frame(frame)
        if reply is None:
            return None
        return reply[:-1] + bytes([reply[-1] ^ 0x40])

    master = ModbusMaster(FakeSlave(corrupting))
    start = time.monotonic()
    out = poll_device(master, device, fast_policy)
    elapsed = time.monotonic() - start
    assert isinstance(out, GapEvent)
    assert out.reason is GapReason.CRC_ERROR
    # a full-length corrupt reply ends the attempt immediately; no
    # timeout is burned waiting for more bytes
    assert elapsed < fast_policy.timeout_s


def test_poll_device_rejects_nan_payload(device, fast_policy):
    def nan_slave(frame: bytes) -> bytes:
        req = decode_request(frame)
        return encode_read_response(req.unit, [0x7FC0, 0x0000])

    master = ModbusMaster(FakeSlave(nan_slave))
    out = poll_device(master, device, fast_policy)
    assert isinstance(out, GapEvent)
    assert out.reason is GapReason.CRC_ERROR


def test_poll_device_rejects_infinity_payload(device, fast_policy):
    def inf_slave(frame: bytes) -> bytes:
        req = decode_request(frame)
        return encode_read_response(req.unit, [0xFF80, 0x0000])

    master = ModbusMaster(FakeSlave(inf_slave))
    out = poll_device(master, device, fast_policy)
    assert isinstance(out, GapEvent) and out.reason is GapReason.CRC_ERROR


def test_poll_device_skips_noise_before_reply(device, fast_policy):
    sim = AnalyserSim(unit=1, seed=5)
    sim.tick(1.0)

    def noisy(frame: bytes) -> bytes | None:
        reply = sim.handle_frame(frame)
        if reply is None:
            return None
        return b"\xff\x00\x17" + reply

    master = ModbusMaster(FakeSlave(noisy))
    out = poll_device(master, device, fast_policy)
    assert isinstance(out, Sample)
    assert out.voltage == sim.reading(MeasurementKind.VOLTAGE)


def test_poll_device_ignores_reply_from_wrong_unit(device, fast_policy):
    # a unit-2 reply must never satisfy a unit-1 request, even with a
    # valid checksum
    sim2 = AnalyserSim(unit=2, seed=6)
    sim2.tick(1.0)

    def wrong_unit(frame: bytes) -> bytes | None:
        req = decode_request(frame)
        regs = f32_to_registers(230.0)
        return encode_read_response(2, list(regs)) if req.unit == 1 else None

    master = ModbusMaster(FakeSlave(wrong_unit))
    out = poll_device(master, device, fast_policy)
    assert isinstance(out, GapEvent)


def test_poll_device_transport_death_is_timeout_gap(device, fast_policy):
    class DeadEndpoint:
        def send(self, data: bytes) -> None:
            raise TransportClosed("gone")

        def recv(self, timeout: float) -> bytes:
            raise TransportClosed("gone")

        def drain(self) -> None:
            raise TransportClosed("gone")

        def close(self) -> None:
            pass

    master = ModbusMaster(DeadEndpoint())
    out = poll_device(master, device, fast_policy)
    assert isinstance(out, GapEvent) and out.reason is GapReason.TIMEOUT


# -- bulk read --------------------------------------------------------------

def test_read_all_fast_matches_sequential_poll(device, fast_policy):
    sim = AnalyserSim(unit=1, seed=7)
    sim.tick(1.0)
    master = ModbusMaster(sim_slave(sim))
    seq = poll_device(master, device, fast_policy)
    endpoint = sim_slave(sim)
    bulk_master = ModbusMaster(endpoint)
    bulk = read_all_fast(bulk_master, device, fast_policy)
    assert isinstance(seq, Sample) and isinstance(bulk, Sample)
    for kind in KIND_ORDER:
        assert bulk.value(kind) == seq.value(kind)
    assert endpoint.sends == 1


def test_read_all_fast_requires_default_layout(fast_policy):
    starts = {k: DEFAULT_MAP.start(k) for k in KIND_ORDER}
    starts[MeasurementKind.ENERGY] = 0x0100
    config = DeviceConfig(name="pm01", unit=1, transport="mem:test",
                          register_map=RegisterMap(starts))
    master = ModbusMaster(FakeSlave(lambda _frame: None))
    with pytest.raises(ValueError):
        read_all_fast(master, config, fast_policy)


# -- policy and fleet validation ---------------------------------------------

def test_policy_validation():
    with pytest.raises(ValueError):
        PollPolicy(interval_ms=0)
    with pytest.raises(ValueError):
        PollPolicy(timeout_ms=0)
    with pytest.raises(ValueError):
        PollPolicy(retries=0)


def test_policy_warns_when_budget_exceeds_interval(caplog):
    policy = PollPolicy(interval_ms=1000, timeout_ms=500, retries=3)
    with caplog.at_level(logging.WARNING, logger="lvmon.gateway"):
        policy.warn_if_tight()
    assert any("interval" in r.message for r in caplog.records)

    caplog.clear()
    roomy = PollPolicy(interval_ms=1000, timeout_ms=200, retries=3)
    with caplog.at_level(logging.WARNING, logger="lvmon.gateway"):
        roomy.warn_if_tight()
    assert not caplog.records


def test_device_config_validation():
    with pytest.raises(ValueError):
        DeviceConfig(name="", unit=1, transport="mem:x")
    with pytest.raises(ValueError):
        DeviceConfig(name="pm01", unit=0, transport="mem:x")
    with pytest.raises(ValueError):
        DeviceConfig(name="pm01", unit=248, transport="mem:x")
    with pytest.raises(ValueError):
        DeviceConfig(name="pm01", unit=1, transport="")


def test_fleet_rejects_duplicate_names():
    devices = [DeviceConfig(name="pm01", unit=1, transport="a"),
               DeviceConfig(name="pm01", unit=2, transport="b")]
    with pytest.raises(ValueError):
        _validate_fleet(devices)


def test_fleet_rejects_duplicate_units_on_shared_transport():
    devices = [DeviceConfig(name="pm01", unit=1, transport="a"),
               DeviceConfig(name="pm02", unit=1, transport="a")]
    with pytest.raises(ValueError):
        _validate_fleet(devices)


def test_fleet_allows_same_unit_on_distinct_transports():
    devices = [DeviceConfig(name="pm01", unit=1, transport="a"),
               DeviceConfig(name="pm02", unit=1, transport="b")]
    groups = _validate_fleet(devices)
    assert set(groups) == {"a", "b"}


# -- timestamps -------------------------------------------------------------

def test_monotone_stamp_breaks_ties_per_device():
    stamps = _MonotoneStamp(lambda: 12.0)
    a = stamps.wrap("pm01")
    b = stamps.wrap("pm02")
    assert int(a() * 1000) == 12000
    assert int(a() * 1000) == 12001
    assert int(a() * 1000) == 12002
    # an independent device is not pushed forward by pm01's ties
    assert int(b() * 1000) == 12000


def test_monotone_stamp_follows_advancing_clock():
    now = {"t": 5.0}
    stamps = _MonotoneStamp(lambda: now["t"])
    stamp = stamps.wrap("pm01")
    assert int(stamp() * 1000) == 5000
    now["t"] = 8.0
    assert int(stamp() * 1000) == 8000


# -- run_loop ---------------------------------------------------------------

class ListSink:
    def __init__(self):
        self.records = []
        self.lock = threading.Lock()

    def append(self, record):
        with self.lock:
            self.records.append(record)

    def samples(self, name=None):
        with self.lock:
            return [r for r in self.records
                    if isinstance(r, Sample) and (name is None or r.device == name)]

    def gaps(self, name=None):
        with self.lock:
            return [r for r in self.records
                    if isinstance(r, GapEvent) and (name is None or r.device == name)]


def run_loop_for(devices, policy, endpoint_factory, duration_s):
    sink = ListSink()
    stop = threading.Event()
    timer = threading.Timer(duration_s, stop.set)
    timer.start()
    try:
        run_loop(devices, policy, sink, stop=stop,
                 endpoint_factory=endpoint_factory)
    finally:
        timer.cancel()
    return sink


def test_run_loop_keeps_cadence(device):
    rig = SimRig([AnalyserSim(unit=1, seed=42)], tick_period=0.25)
    policy = PollPolicy(interval_ms=250, timeout_ms=100, retries=2)
    try:
        sink = run_loop_for([device], policy,
                            lambda _t: rig.bus.master_endpoint(), 1.1)
    finally:
        rig.shutdown()
    count = len(sink.samples("pm01"))
    # 1.1s at 250ms: the count window mirrors the acceptance rule T-2..T+1
    assert 2 <= count <= 5
    assert not sink.gaps()
    ts = [s.ts for s in sink.samples("pm01")]
    assert ts == sorted(ts) and len(set(ts)) == len(ts)


def test_run_loop_polls_every_device_on_shared_transport():
    rig = SimRig([AnalyserSim(unit=1, seed=1), AnalyserSim(unit=2, seed=2)],
                 tick_period=0.25)
    devices = [DeviceConfig(name="pm01", unit=1, transport="mem:shared"),
               DeviceConfig(name="pm02", unit=2, transport="mem:shared")]
    policy = PollPolicy(interval_ms=300, timeout_ms=100, retries=2)
    try:
        sink = run_loop_for(devices, policy,
                            lambda _t: rig.bus.master_endpoint(), 1.0)
    finally:
        rig.shutdown()
    assert len(sink.samples("pm01")) >= 2
    assert len(sink.samples("pm02")) >= 2
    # half-duplex: polls interleave one at a time, pm01 before pm02
    names = [r.device for r in sink.records]
    assert names[:2] == ["pm01", "pm02"]


def test_run_loop_dead_device_yields_one_gap_per_interval():
    bus = InMemoryBus()  # nobody serving
    device = DeviceConfig(name="pm01", unit=1, transport="mem:dead")
    policy = PollPolicy(interval_ms=200, timeout_ms=150, retries=3)
    try:
        sink = run_loop_for([device], policy,
                            lambda _t: bus.master_endpoint(), 1.0)
    finally:
        bus.close()
    gaps = sink.gaps("pm01")
    # deadline capping keeps one GapEvent per interval even though
    # retries*timeout would overflow it
    assert 3 <= len(gaps) <= 6
    assert all(g.reason is GapReason.TIMEOUT for g in gaps)
    ts = [g.ts for g in gaps]
    assert ts == sorted(ts) and len(set(ts)) == len(ts)


def test_run_loop_sink_failure_is_fatal(device):
    rig = SimRig([AnalyserSim(unit=1, seed=42)], tick_period=0.25)

    class BrokenSink:
        def append(self, record):
            raise OSError("disk full")

    policy = PollPolicy(interval_ms=200, timeout_ms=100, retries=2)
    try:
        with pytest.raises(GatewayFatal):
            run_loop([device], policy, BrokenSink(),
                     endpoint_factory=lambda _t: rig.bus.master_endpoint())
    finally:
        rig.shutdown()


def test_run_loop_requires_devices():
    with pytest.raises(ValueError):
        run_loop([], PollPolicy(), ListSink())


def test_run_loop_connect_failure_becomes_gap():
    def refuse(_transport: str):
        raise OSError("connection refused")

    device = DeviceConfig(name="pm01", unit=1, transport="tcp:127.0.0.1:1")
    policy = PollPolicy(interval_ms=200, timeout_ms=100, retries=2)
    sink = run_loop_for([device], policy, refuse, 0.7)
    gaps = sink.gaps("pm01")
    assert len(gaps) >= 2
    assert all(g.reason is GapReason.TIMEOUT for g in gaps)
