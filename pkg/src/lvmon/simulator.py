"""Simulated single-phase power analyser acting as a Modbus RTU slave.

The simulator owns an electrical state (voltage walking inside the
supply band, 50 Hz with jitter, a constant pump load, an accumulating
kWh register) and answers function 0x04 reads against its register
map. Fault injection covers a blown sensing fuse (total silence), a
voltage sag, and the pump switching off.

Supply band: 220 V nominal, +/-6 % => [206.8, 233.2] V. Sag band:
[0.80, 0.90] x nominal => [176.0, 198.0] V.

State is owned by whichever loop calls tick()/handle_frame(); faults
arrive through a queue so other threads never mutate state directly.
All randomness comes from one seeded generator, and ticks integrate a
fixed nominal dt, so a given seed always produces the same reading
sequence.
"""

from __future__ import annotations

import enum
import logging
import queue
import random
import socket
import threading
import time

from .model import DEFAULT_MAP, KIND_ORDER, MeasurementKind, RegisterMap
from .modbus import (
    EXC_ILLEGAL_DATA_ADDRESS,
    EXC_ILLEGAL_DATA_VALUE,
    EXC_ILLEGAL_FUNCTION,
    FUNC_READ_INPUT,
    REQUEST_LEN,
    CrcMismatch,
    InvalidRequest,
    ShortFrame,
    UnsupportedFunction,
    decode_request,
    encode_exception,
    encode_read_response,
    f32_round,
    f32_to_registers,
    scan_frame,
)
from .transport import Endpoint, TransportClosed

log = logging.getLogger(__name__)

# Substitute for the UART 3.5-character silence: stale partial bytes
# are flushed after this much idle time on the link.
INTER_FRAME_GAP_S = 0.05

FREQUENCY_BAND = (49.5, 50.5)
SAG_BAND_FRACTION = (0.80, 0.90)


class FaultKind(enum.Enum):
    FUSE_BLOWN = "fuse_blown"      # sensing fuse gone: slave falls silent
    VOLTAGE_SAG = "voltage_sag"    # supply band shifts down
    PUMP_OFF = "pump_off"          # load current drops to zero
    RESTORE = "restore"            # clear all faults


class AnalyserSim:
    """One simulated analyser: electrical state plus the slave protocol."""

    def __init__(
        self,
        unit: int = 1,
        *,
        seed: int | None = None,
        nominal_voltage: float = 220.0,
        tolerance: float = 0.06,
        load_current: float = 14.0,
        power_factor: float = 0.85,
        voltage_step: float = 0.5,
        frequency_step: float = 0.05,
        register_map: RegisterMap = DEFAULT_MAP,
    ):
        if not 1 <= unit <= 247:
            raise ValueError(f"unit must be in 1..247, got {unit}")
        if not 0.0 < power_factor <= 1.0:
            raise ValueError(f"power factor must be in (0, 1], got {power_factor}")
        self.unit = unit
        self.nominal_voltage = nominal_voltage
        self.tolerance = tolerance
        self.load_current = load_current
        self.power_factor = power_factor
        self.voltage_step = voltage_step
        self.frequency_step = frequency_step
        self.register_map = register_map

        self.voltage = nominal_voltage
        self.frequency = 50.0
        self.energy_kwh = 0.0
        self.fuse_intact = True
        self.pump_on = True
        self.sag_active = False

        self._rng = random.Random(seed)
        self._faults: queue.Queue[FaultKind] = queue.Queue()

    # -- physics --------------------------------------------------------------

    def voltage_band(self) -> tuple[float, float]:
        if self.sag_active:
            lo, hi = SAG_BAND_FRACTION
            return lo * self.nominal_voltage, hi * self.nominal_voltage
        return (self.nominal_voltage * (1.0 - self.tolerance),
                self.nominal_voltage * (1.0 + self.tolerance))

    @property
    def current(self) -> float:
        return self.load_current if self.pump_on else 0.0

    def tick(self, dt: float) -> None:
        """Advance the electrical state by dt seconds.

        A dead fuse means a dead meter: nothing is measured or
        accumulated until restore.
        """
        if dt <= 0:
            raise ValueError(f"dt must be positive, got {dt}")
        if not self.fuse_intact:
            return
        self.voltage = self._walk(self.voltage, self.voltage_step, self.voltage_band())
        self.frequency = self._walk(self.frequency, self.frequency_step, FREQUENCY_BAND)
        active_power = self.voltage * self.current * self.power_factor
        self.energy_kwh += active_power * dt / 3.6e6

    def _walk(self, value: float, step: float, band: tuple[float, float]) -> float:
        lo, hi = band
        value += self._rng.uniform(-step, step)
        if value > hi:
            value = hi - (value - hi)
        if value < lo:
            value = lo + (lo - value)
        return min(max(value, lo), hi)

    def reading(self, kind: MeasurementKind) -> float:
        """The value the meter reports for one quantity, as float32.

        Active power is the product of the reported (already rounded)
        voltage, current, and power factor, so the P = V*I*PF identity
        holds exactly at float32 within one tick.
        """
        if kind is MeasurementKind.VOLTAGE:
            return f32_round(self.voltage)
        if kind is MeasurementKind.CURRENT:
            return f32_round(self.current)
        if kind is MeasurementKind.FREQUENCY:
            return f32_round(self.frequency)
        if kind is MeasurementKind.POWER_FACTOR:
            return f32_round(self.power_factor)
        if kind is MeasurementKind.ACTIVE_POWER:
            v = f32_round(self.voltage)
            i = f32_round(self.current)
            pf = f32_round(self.power_factor)
            return f32_round(v * i * pf)
        if kind is MeasurementKind.ENERGY:
            return f32_round(self.energy_kwh)
        raise ValueError(f"unknown kind {kind!r}")

    def register_image(self) -> dict[int, int]:
        """Current register contents: address -> 16-bit word."""
        image: dict[int, int] = {}
        for kind in KIND_ORDER:
            start = self.register_map.start(kind)
            hi, lo = f32_to_registers(self.reading(kind))
            image[start] = hi
            image[start + 1] = lo
        return image

    # -- faults ----------------------------------------------------------------

    def inject(self, fault: FaultKind) -> None:
        """Queue a fault for the owning loop to apply (thread-safe)."""
        self._faults.put(fault)

    def apply_pending_faults(self) -> None:
        while True:
            try:
                fault = self._faults.get_nowait()
            except queue.Empty:
                return
            self._apply(fault)

    def _apply(self, fault: FaultKind) -> None:
        log.info("sim unit %d: fault %s", self.unit, fault.value)
        if fault is FaultKind.FUSE_BLOWN:
            self.fuse_intact = False
        elif fault is FaultKind.VOLTAGE_SAG:
            self.sag_active = True
            self._clamp_voltage()
        elif fault is FaultKind.PUMP_OFF:
            self.pump_on = False
        elif fault is FaultKind.RESTORE:
            self.fuse_intact = True
            self.sag_active = False
            self.pump_on = True
            self._clamp_voltage()

    def _clamp_voltage(self) -> None:
        lo, hi = self.voltage_band()
        self.voltage = min(max(self.voltage, lo), hi)

    # -- slave protocol ---------------------------------------------------------

    def handle_frame(self, frame: bytes) -> bytes | None:
        """Answer one request frame; None means RTU silence.

        Silence on: CRC failure, short frame, foreign unit, blown fuse.
        Exception replies: 01 unsupported function, 02 unmapped span,
        03 malformed register count.
        """
        try:
            req = decode_request(frame)
        except (ShortFrame, CrcMismatch):
            return None
        except UnsupportedFunction as exc:
            if exc.unit != self.unit or not self.fuse_intact:
                return None
            return encode_exception(self.unit, exc.function, EXC_ILLEGAL_FUNCTION)
        except InvalidRequest as exc:
            if exc.unit != self.unit or not self.fuse_intact:
                return None
            return encode_exception(self.unit, FUNC_READ_INPUT, EXC_ILLEGAL_DATA_VALUE)
        if req.unit != self.unit or not self.fuse_intact:
            return None
        image = self.register_image()
        span = range(req.start, req.start + req.count)
        if any(address not in image for address in span):
            return encode_exception(self.unit, FUNC_READ_INPUT, EXC_ILLEGAL_DATA_ADDRESS)
        return encode_read_response(self.unit, [image[address] for address in span])


def _check_unique_units(sims: list[AnalyserSim]) -> None:
    units = [sim.unit for sim in sims]
    if len(set(units)) != len(units):
        raise ValueError(f"duplicate unit addresses on one transport: {sorted(units)}")


class _SlaveSession:
    """Byte buffering, frame scanning, and dispatch for one link."""

    def __init__(self, sims: list[AnalyserSim]):
        self.sims = sims
        self.buf = b""
        self.last_rx: float | None = None

    def feed(self, chunk: bytes, endpoint: Endpoint, now: float) -> None:
        if chunk:
            self.buf += chunk
            self.last_rx = now
        elif self.buf and self.last_rx is not None \
                and now - self.last_rx > INTER_FRAME_GAP_S:
            self.buf = b""
        while True:
            frame, self.buf = scan_frame(self.buf, (REQUEST_LEN,))
            if frame is None:
                return
            for sim in self.sims:
                response = sim.handle_frame(frame)
                if response is not None:
                    endpoint.send(response)
                    break


class _Ticker:
    """Fixed-cadence tick scheduling with catch-up after stalls."""

    def __init__(self, sims: list[AnalyserSim], period: float):
        self.sims = sims
        self.period = period
        self.next_due = time.monotonic() + period

    def run_due(self) -> None:
        now = time.monotonic()
        while now >= self.next_due:
            for sim in self.sims:
                sim.tick(self.period)
            self.next_due += self.period

    def wait_budget(self, cap: float) -> float:
        return max(0.001, min(cap, self.next_due - time.monotonic()))


def serve(
    sims: list[AnalyserSim] | AnalyserSim,
    endpoint: Endpoint,
    stop: threading.Event | None = None,
    tick_period: float = 1.0,
) -> None:
    """Request/response loop over one endpoint until stopped or closed.

    Strictly half-duplex: one frame handled at a time. Several
    simulators may share the endpoint (multi-drop); each answers only
    its own unit address.
    """
    if isinstance(sims, AnalyserSim):
        sims = [sims]
    _check_unique_units(sims)
    session = _SlaveSession(sims)
    ticker = _Ticker(sims, tick_period)
    while stop is None or not stop.is_set():
        for sim in sims:
            sim.apply_pending_faults()
        ticker.run_due()
        try:
            chunk = endpoint.recv(ticker.wait_budget(0.02))
        except TransportClosed:
            log.info("slave transport closed, shutting down")
            return
        session.feed(chunk, endpoint, time.monotonic())


class SimTcpServer:
    """Hosts one or more simulators on a TCP listener carrying raw RTU
    bytes, with an optional admin listener for fault injection.

    Serial-port semantics: one client connection is served at a time;
    ticking continues while no client is connected. Admin commands are
    text lines: ``<fault> [unit]`` where fault is one of fuse_blown,
    voltage_sag, pump_off, restore; omitting the unit targets every
    simulator on the server.
    """

    def __init__(
        self,
        sims: list[AnalyserSim] | AnalyserSim,
        host: str = "127.0.0.1",
        port: int = 0,
        admin_port: int | None = None,
        tick_period: float = 1.0,
    ):
        if isinstance(sims, AnalyserSim):
            sims = [sims]
        _check_unique_units(sims)
        self.sims = sims
        self.tick_period = tick_period
        self._stop = threading.Event()
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(4)
        self._listener.settimeout(0.02)
        self.address: tuple[str, int] = self._listener.getsockname()
        self._admin_listener: socket.socket | None = None
        self.admin_address: tuple[str, int] | None = None
        if admin_port is not None:
            self._admin_listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            self._admin_listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            self._admin_listener.bind((host, admin_port))
            self._admin_listener.listen(4)
            self._admin_listener.settimeout(0.2)
            self.admin_address = self._admin_listener.getsockname()
        self._threads: list[threading.Thread] = []

    def start(self) -> "SimTcpServer":
        main = threading.Thread(target=self._run, name="sim-serve", daemon=True)
        main.start()
        self._threads.append(main)
        if self._admin_listener is not None:
            admin = threading.Thread(target=self._run_admin, name="sim-admin", daemon=True)
            admin.start()
            self._threads.append(admin)
        return self

    def stop(self) -> None:
        self._stop.set()
        for thread in self._threads:
            thread.join(timeout=5.0)
        self._listener.close()
        if self._admin_listener is not None:
            self._admin_listener.close()

    def run_forever(self) -> None:
        """Blocking variant for the CLI: serve until interrupted."""
        self.start()
        try:
            while not self._stop.is_set():
                time.sleep(0.2)
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()

    def _run(self) -> None:
        from .transport import TcpEndpoint

        ticker = _Ticker(self.sims, self.tick_period)
        conn: TcpEndpoint | None = None
        session = _SlaveSession(self.sims)
        while not self._stop.is_set():
            for sim in self.sims:
                sim.apply_pending_faults()
            ticker.run_due()
            if conn is None:
                try:
                    raw, peer = self._listener.accept()
                except socket.timeout:
                    continue
                except OSError:
                    return
                log.info("sim: client connected from %s:%d", *peer)
                conn = TcpEndpoint(raw)
                session = _SlaveSession(self.sims)
            try:
                chunk = conn.recv(ticker.wait_budget(0.02))
            except TransportClosed:
                log.info("sim: client disconnected")
                conn.close()
                conn = None
                continue
            session.feed(chunk, conn, time.monotonic())
        if conn is not None:
            conn.close()

    def _run_admin(self) -> None:
        while not self._stop.is_set():
            try:
                raw, _ = self._admin_listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            with raw:
                raw.settimeout(2.0)
                reader = raw.makefile("r", encoding="ascii", errors="replace")
                try:
                    for line in reader:
                        reply = self._admin_command(line.strip())
                        raw.sendall(reply.encode("ascii"))
                except OSError:
                    pass

    def _admin_command(self, line: str) -> str:
        if not line:
            return "err empty command\n"
        parts = line.split()
        try:
            fault = FaultKind(parts[0])
        except ValueError:
            return f"err unknown fault {parts[0]!r}\n"
        targets = self.sims
        if len(parts) > 1:
            try:
                unit = int(parts[1])
            except ValueError:
                return f"err bad unit {parts[1]!r}\n"
            targets = [sim for sim in self.sims if sim.unit == unit]
            if not targets:
                return f"err no simulator with unit {unit}\n"
        for sim in targets:
            sim.inject(fault)
        return "ok\n"
