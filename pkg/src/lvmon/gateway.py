"""Polling master: reads six quantities from each analyser once per
second and turns the results into Samples or GapEvents.

Cadence is steady, not drifting: each cycle's deadline is the previous
deadline plus the interval, regardless of how long the cycle took.
Request timeouts are additionally capped by the time left in the
cycle, so a dead device costs exactly one cycle per gap instead of
stalling the schedule (with the defaults, 3 x 500 ms of retries would
otherwise overrun the 1000 ms interval; that combination is legal but
logged as a warning).

A cycle is six two-register reads in fixed kind order. All six must
succeed for a Sample; the first terminal failure aborts the cycle with
a GapEvent. Corrupt replies are retried immediately rather than waited
out, because a CRC failure proves the reply already arrived.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass
from typing import Callable, Protocol

from .model import (
    DEFAULT_MAP,
    KIND_ORDER,
    GapEvent,
    GapReason,
    MeasurementKind,
    RegisterMap,
    Sample,
)
from .modbus import (
    DecodeNaN,
    DecodeInfinity,
    ExceptionReceived,
    ReadRequest,
    crc_ok,
    encode_read_request,
    f32_from_registers,
    response_length,
    EXCEPTION_LEN,
    EXC_FUNCTION_FLAG,
    FUNC_READ_INPUT,
)
from .transport import Endpoint, TransportClosed, open_endpoint

log = logging.getLogger(__name__)

REGISTERS_PER_READ = 2
BULK_READ_COUNT = 12


class NoReply(Exception):
    """Nothing at all arrived before the timeout."""


class ReplyCorrupt(Exception):
    """Bytes arrived but no CRC-valid frame could be found in them."""

    def __init__(self, received: bytes):
        super().__init__(f"no valid frame in {len(received)} received bytes")
        self.received = received


class GatewayFatal(Exception):
    """The polling loop died of a non-poll error (store append failed)."""


@dataclass(frozen=True)
class DeviceConfig:
    """One analyser to poll."""

    name: str
    unit: int
    transport: str
    register_map: RegisterMap = DEFAULT_MAP

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("device name must be non-empty")
        if not 1 <= self.unit <= 247:
            raise ValueError(f"device {self.name}: unit must be in 1..247, got {self.unit}")
        if not self.transport:
            raise ValueError(f"device {self.name}: transport must be non-empty")


@dataclass(frozen=True)
class PollPolicy:
    interval_ms: int = 1000
    timeout_ms: int = 500
    retries: int = 3

    def __post_init__(self) -> None:
        if self.interval_ms <= 0:
            raise ValueError(f"interval must be positive, got {self.interval_ms}")
        if self.timeout_ms <= 0:
            raise ValueError(f"timeout must be positive, got {self.timeout_ms}")
        if self.retries < 1:
            raise ValueError(f"retries must be at least 1, got {self.retries}")

    @property
    def interval_s(self) -> float:
        return self.interval_ms / 1000.0

    @property
    def timeout_s(self) -> float:
        return self.timeout_ms / 1000.0

    def warn_if_tight(self) -> None:
        worst = self.timeout_ms * self.retries
        if self.interval_ms < worst:
            log.warning(
                "poll interval %d ms is shorter than worst-case retries "
                "(%d ms); per-request timeouts will be capped to hold cadence",
                self.interval_ms, worst)


class _PollFailure(Exception):
    """Internal: a read gave up. Carries the GapEvent reason."""

    def __init__(self, reason: GapReason, exception_code: int = 0):
        super().__init__(reason.value)
        self.reason = reason
        self.exception_code = exception_code


class RecordSink(Protocol):
    def append(self, record: Sample | GapEvent) -> None: ...


class ModbusMaster:
    """Request/response driver for one transport (one bus)."""

    def __init__(self, endpoint: Endpoint):
        self.endpoint = endpoint

    def close(self) -> None:
        self.endpoint.close()

    def transact(self, req: ReadRequest, timeout: float) -> list[int]:
        """Send one read request and wait for its reply.

        Raises NoReply, ReplyCorrupt, or ExceptionReceived. The receive
        buffer is scanned at every offset so garbage before a valid
        reply does not hide it, and a buffer already holding a full
        reply's worth of invalid bytes fails immediately instead of
        waiting out the clock.
        """
        if timeout <= 0:
            raise NoReply(f"no time budget for unit {req.unit}")
        self.endpoint.drain()
        self.endpoint.send(encode_read_request(req))
        normal_len = response_length(req.count)
        deadline = time.monotonic() + timeout
        buf = b""
        while True:
            found = self._find_reply(buf, req, normal_len)
            if found is not None:
                return found
            if len(buf) >= normal_len:
                raise ReplyCorrupt(buf)
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                if buf:
                    raise ReplyCorrupt(buf)
                raise NoReply(f"unit {req.unit} silent for {timeout * 1000:.0f} ms")
            buf += self.endpoint.recv(remaining)

    @staticmethod
    def _find_reply(buf: bytes, req: ReadRequest, normal_len: int) -> list[int] | None:
        """Locate a CRC-valid reply to req anywhere in buf.

        Raises ExceptionReceived if the valid window is an exception
        reply; returns the register words for a normal reply; None if
        no valid window exists yet.
        """
        for offset in range(len(buf)):
            if buf[offset] != req.unit:
                continue
            window = buf[offset:offset + normal_len]
            if (len(window) == normal_len
                    and window[1] == FUNC_READ_INPUT
                    and window[2] == 2 * req.count
                    and crc_ok(window)):
                words = []
                for i in range(req.count):
                    hi = window[3 + 2 * i]
                    lo = window[4 + 2 * i]
                    words.append((hi << 8) | lo)
                return words
            window = buf[offset:offset + EXCEPTION_LEN]
            if (len(window) == EXCEPTION_LEN
                    and window[1] == (FUNC_READ_INPUT | EXC_FUNCTION_FLAG)
                    and crc_ok(window)):
                raise ExceptionReceived(window[2])
        return None


def _read_with_retries(
    master: ModbusMaster,
    req: ReadRequest,
    policy: PollPolicy,
    deadline: float,
) -> list[int]:
    """One logical read: up to policy.retries attempts within deadline.

    Exception replies are terminal on the first attempt; the device
    answered, it just said no, and asking again will not change that.
    """
    last: _PollFailure | None = None
    for _ in range(policy.retries):
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            break
        budget = min(policy.timeout_s, remaining)
        try:
            return master.transact(req, budget)
        except NoReply:
            last = _PollFailure(GapReason.TIMEOUT)
        except ReplyCorrupt:
            last = _PollFailure(GapReason.CRC_ERROR)
        except ExceptionReceived as exc:
            raise _PollFailure(GapReason.EXCEPTION, exc.code) from exc
        except TransportClosed:
            raise
    raise last or _PollFailure(GapReason.TIMEOUT)


def _decode_pair(words: list[int]) -> float:
    try:
        return f32_from_registers(words[0], words[1])
    except (DecodeNaN, DecodeInfinity) as exc:
        # register pair decoded to a non-finite value: payload garbage
        raise _PollFailure(GapReason.CRC_ERROR) from exc


_DEFAULT_CLOCK = time.time


def _stamp_ms(clock: Callable[[], float]) -> int:
    return int(clock() * 1000)


def poll_device(
    master: ModbusMaster,
    device: DeviceConfig,
    policy: PollPolicy,
    *,
    deadline: float | None = None,
    clock: Callable[[], float] = _DEFAULT_CLOCK,
) -> Sample | GapEvent:
    """One full poll cycle: six reads, one Sample or one GapEvent.

    The deadline (monotonic seconds) caps the whole cycle; omitted, it
    defaults to one interval from now. No poll error ever escapes:
    failures come back as GapEvents. The timestamp is taken when the
    cycle's last reply is decoded (or when the cycle gives up).
    """
    if deadline is None:
        deadline = time.monotonic() + policy.interval_s
    started = time.monotonic()
    values: dict[MeasurementKind, float] = {}
    try:
        for kind in KIND_ORDER:
            req = ReadRequest(device.unit, device.register_map.start(kind),
                              REGISTERS_PER_READ)
            words = _read_with_retries(master, req, policy, deadline)
            values[kind] = _decode_pair(words)
    except _PollFailure as failure:
        return _gap_from_failure(device, failure, started, clock)
    except TransportClosed:
        return _gap_from_failure(
            device, _PollFailure(GapReason.TIMEOUT), started, clock)
    return _sample_from_values(device, values, started, clock)


def read_all_fast(
    master: ModbusMaster,
    device: DeviceConfig,
    policy: PollPolicy,
    *,
    deadline: float | None = None,
    clock: Callable[[], float] = _DEFAULT_CLOCK,
) -> Sample | GapEvent:
    """Bulk variant: all six quantities in a single 12-register read.

    Only valid for the contiguous default register layout; a custom
    map is a caller error, not a GapEvent.
    """
    if not device.register_map.is_contiguous_default():
        raise ValueError(
            f"device {device.name}: bulk read requires the contiguous "
            "default register layout")
    if deadline is None:
        deadline = time.monotonic() + policy.interval_s
    started = time.monotonic()
    req = ReadRequest(device.unit, 0x0000, BULK_READ_COUNT)
    try:
        words = _read_with_retries(master, req, policy, deadline)
        values = {}
        for kind in KIND_ORDER:
            start = device.register_map.start(kind)
            values[kind] = _decode_pair(words[start:start + 2])
    except _PollFailure as failure:
        return _gap_from_failure(device, failure, started, clock)
    except TransportClosed:
        return _gap_from_failure(
            device, _PollFailure(GapReason.TIMEOUT), started, clock)
    return _sample_from_values(device, values, started, clock)


def _sample_from_values(
    device: DeviceConfig,
    values: dict[MeasurementKind, float],
    started: float,
    clock: Callable[[], float],
) -> Sample:
    sample = Sample(
        device=device.name,
        ts=_stamp_ms(clock),
        voltage=values[MeasurementKind.VOLTAGE],
        current=values[MeasurementKind.CURRENT],
        frequency=values[MeasurementKind.FREQUENCY],
        power_factor=values[MeasurementKind.POWER_FACTOR],
        active_power=values[MeasurementKind.ACTIVE_POWER],
        energy=values[MeasurementKind.ENERGY],
    )
    log.info("poll %s: sample latency_ms=%.0f",
             device.name, (time.monotonic() - started) * 1000)
    return sample


def _gap_from_failure(
    device: DeviceConfig,
    failure: _PollFailure,
    started: float,
    clock: Callable[[], float],
) -> GapEvent:
    gap = GapEvent(
        device=device.name,
        ts=_stamp_ms(clock),
        reason=failure.reason,
        exception_code=failure.exception_code,
    )
    log.info("poll %s: gap reason=%s code=%02x latency_ms=%.0f",
             device.name, failure.reason.value, failure.exception_code,
             (time.monotonic() - started) * 1000)
    return gap


class _MonotoneStamp:
    """Wall-clock milliseconds forced strictly increasing per device."""

    def __init__(self, clock: Callable[[], float]):
        self._clock = clock
        self._last: dict[str, int] = {}

    def wrap(self, device_name: str) -> Callable[[], float]:
        def stamped() -> float:
            now_ms = int(self._clock() * 1000)
            floor = self._last.get(device_name)
            if floor is not None and now_ms <= floor:
                now_ms = floor + 1
            self._last[device_name] = now_ms
            return now_ms / 1000.0
        return stamped


EndpointFactory = Callable[[str], Endpoint]


def _validate_fleet(devices: list[DeviceConfig]) -> dict[str, list[DeviceConfig]]:
    names = [d.name for d in devices]
    if len(set(names)) != len(names):
        raise ValueError(f"device names must be unique: {sorted(names)}")
    groups: dict[str, list[DeviceConfig]] = {}
    for device in devices:
        groups.setdefault(device.transport, []).append(device)
    for transport, group in groups.items():
        units = [d.unit for d in group]
        if len(set(units)) != len(units):
            raise ValueError(
                f"duplicate unit addresses on transport {transport}: {sorted(units)}")
    return groups


@dataclass
class _TransportTask:
    transport: str
    devices: list[DeviceConfig]
    master: ModbusMaster | None = None
    thread: threading.Thread | None = None
    fatal: BaseException | None = None


def run_loop(
    devices: list[DeviceConfig],
    policy: PollPolicy,
    sink: RecordSink,
    *,
    stop: threading.Event | None = None,
    endpoint_factory: EndpointFactory = open_endpoint,
    clock: Callable[[], float] = _DEFAULT_CLOCK,
) -> None:
    """Poll every device until the stop event is set.

    One thread per transport; devices sharing a transport are polled
    back to back inside the cycle (the bus is half-duplex), each with
    an equal slice of the interval as its budget. Poll failures are
    data; a store append failure is fatal and raises GatewayFatal once
    all threads have wound down.
    """
    if not devices:
        raise ValueError("no devices configured")
    if stop is None:
        stop = threading.Event()
    policy.warn_if_tight()
    groups = _validate_fleet(devices)
    tasks = [_TransportTask(transport, group) for transport, group in groups.items()]
    for task in tasks:
        task.thread = threading.Thread(
            target=_transport_loop,
            args=(task, policy, sink, stop, endpoint_factory, clock),
            name=f"poll-{task.transport}",
            daemon=True,
        )
        task.thread.start()
    try:
        while any(t.thread.is_alive() for t in tasks):
            for t in tasks:
                t.thread.join(timeout=0.2)
    except KeyboardInterrupt:
        stop.set()
        for t in tasks:
            t.thread.join(timeout=5.0)
    failures = [t.fatal for t in tasks if t.fatal is not None]
    if failures:
        raise GatewayFatal(f"polling stopped: {failures[0]}") from failures[0]


def _transport_loop(
    task: _TransportTask,
    policy: PollPolicy,
    sink: RecordSink,
    stop: threading.Event,
    endpoint_factory: EndpointFactory,
    clock: Callable[[], float],
) -> None:
    stamps = _MonotoneStamp(clock)
    interval = policy.interval_s
    slice_s = interval / len(task.devices)
    cycle_start = time.monotonic()
    next_deadline = cycle_start + interval
    try:
        while not stop.is_set():
            for index, device in enumerate(task.devices):
                if stop.is_set():
                    return
                sub_deadline = cycle_start + (index + 1) * slice_s
                outcome = _poll_once(task, device, policy, endpoint_factory,
                                     sub_deadline, stamps)
                sink.append(outcome)
            while not stop.is_set():
                remaining = next_deadline - time.monotonic()
                if remaining <= 0:
                    break
                stop.wait(min(remaining, 0.05))
            cycle_start = next_deadline
            next_deadline += interval
            now = time.monotonic()
            if now > next_deadline:
                # fell more than a full interval behind: realign the grid
                missed = int((now - cycle_start) / interval)
                log.warning("transport %s: %d cycle(s) overrun, realigning",
                            task.transport, missed)
                cycle_start += missed * interval
                next_deadline = cycle_start + interval
    except BaseException as exc:  # noqa: BLE001 - recorded and re-raised by run_loop
        log.error("transport %s: polling stopped: %s", task.transport, exc)
        task.fatal = exc
        stop.set()
    finally:
        if task.master is not None:
            task.master.close()
            task.master = None


def _poll_once(
    task: _TransportTask,
    device: DeviceConfig,
    policy: PollPolicy,
    endpoint_factory: EndpointFactory,
    deadline: float,
    stamps: _MonotoneStamp,
) -> Sample | GapEvent:
    clock = stamps.wrap(device.name)
    if task.master is None:
        try:
            task.master = ModbusMaster(endpoint_factory(task.transport))
        except OSError as exc:
            log.warning("transport %s: connect failed: %s", task.transport, exc)
            return GapEvent(device=device.name, ts=int(clock() * 1000),
                            reason=GapReason.TIMEOUT)
    outcome = poll_device(task.master, device, policy,
                          deadline=deadline, clock=clock)
    if isinstance(outcome, GapEvent) and _link_is_dead(task.master):
        task.master.close()
        task.master = None
    return outcome


def _link_is_dead(master: ModbusMaster) -> bool:
    try:
        master.endpoint.drain()
    except TransportClosed:
        return True
    return False
