"""Modbus RTU framing for function 0x04 (read input registers).

Pure functions over byte sequences: CRC-16, request/response/exception
frames, and the two-register IEEE-754 float codec used by power
analysers. No IO here; transports live elsewhere.

Wire conventions (see docs/REGISTERS.md):
- CRC-16 with initial value 0xFFFF and reflected polynomial 0xA001,
  transmitted low byte first.
- Register data big-endian on the wire; 32-bit floats span two
  registers, high word in the lower register address.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

FUNC_READ_INPUT = 0x04
EXC_FUNCTION_FLAG = 0x80  # set on the function byte of exception replies

EXC_ILLEGAL_FUNCTION = 0x01
EXC_ILLEGAL_DATA_ADDRESS = 0x02
EXC_ILLEGAL_DATA_VALUE = 0x03
EXC_DEVICE_FAILURE = 0x04

MAX_READ_COUNT = 125

REQUEST_LEN = 8       # unit, func, start hi/lo, count hi/lo, crc lo/hi
EXCEPTION_LEN = 5     # unit, func|0x80, code, crc lo/hi


class FrameError(Exception):
    """Base for all frame-level decode failures."""


class ShortFrame(FrameError):
    """Frame too short to carry the expected structure."""


class CrcMismatch(FrameError):
    """Frame checksum does not match its contents (slave stays silent)."""


class UnsupportedFunction(FrameError):
    """Request carries a function code other than 0x04."""

    def __init__(self, unit: int, function: int):
        super().__init__(f"unsupported function 0x{function:02X} for unit {unit}")
        self.unit = unit
        self.function = function


class InvalidRequest(FrameError):
    """Request fields violate protocol bounds (count, span)."""

    def __init__(self, unit: int, message: str):
        super().__init__(message)
        self.unit = unit


class ExceptionReceived(FrameError):
    """Slave answered with an exception frame."""

    def __init__(self, code: int):
        super().__init__(f"slave exception 0x{code:02X}")
        self.code = code


class UnitMismatch(FrameError):
    """Response unit byte differs from the request's unit."""


class LengthMismatch(FrameError):
    """Response byte count disagrees with the request's register count."""


class DecodeNaN(ValueError):
    """Register pair holds a NaN bit pattern (physically meaningless)."""


class DecodeInfinity(ValueError):
    """Register pair holds an infinity bit pattern (physically meaningless)."""


# -- CRC-16 -------------------------------------------------------------------

_CRC_POLY = 0xA001  # bit-reversed 0x8005
_CRC_INIT = 0xFFFF


def _table_entry(index: int) -> int:
    crc = index
    for _ in range(8):
        crc = (crc >> 1) ^ _CRC_POLY if crc & 1 else crc >> 1
    return crc


_CRC_TABLE = tuple(_table_entry(i) for i in range(256))


def crc16(payload: bytes) -> int:
    """CRC-16/MODBUS checksum register for a byte sequence.

    Table-driven. Empty payload returns the initial value 0xFFFF.
    The wire order is low byte first; use crc16_bytes for that.
    """
    crc = _CRC_INIT
    for byte in payload:
        crc = (crc >> 8) ^ _CRC_TABLE[(crc ^ byte) & 0xFF]
    return crc


def crc16_bytes(payload: bytes) -> bytes:
    """The two trailing CRC bytes for a frame body, low byte first."""
    return struct.pack("<H", crc16(payload))


def crc_ok(frame: bytes) -> bool:
    """True when the last two bytes are the valid CRC of the rest."""
    if len(frame) < 4:
        return False
    return crc16(frame[:-2]) == struct.unpack("<H", frame[-2:])[0]


# -- Request / response frames ------------------------------------------------


@dataclass(frozen=True)
class ReadRequest:
    """Read input registers: unit address, start register, register count."""

    unit: int
    start: int
    count: int

    def validate(self) -> None:
        if not 1 <= self.unit <= 247:
            raise ValueError(f"unit must be in 1..247, got {self.unit}")
        if not 0 <= self.start <= 0xFFFF:
            raise ValueError(f"start must be in 0..65535, got {self.start}")
        if not 1 <= self.count <= MAX_READ_COUNT:
            raise ValueError(f"count must be in 1..{MAX_READ_COUNT}, got {self.count}")
        if self.start + self.count > 0x10000:
            raise ValueError("start + count exceeds the register address space")


def encode_read_request(req: ReadRequest) -> bytes:
    """8-byte request frame: unit, 0x04, start, count, CRC low-first."""
    req.validate()
    body = struct.pack(">BBHH", req.unit, FUNC_READ_INPUT, req.start, req.count)
    return body + crc16_bytes(body)


def decode_request(frame: bytes) -> ReadRequest:
    """Parse a request frame, validating the CRC before anything else.

    Raises ShortFrame (< 8 bytes), CrcMismatch, UnsupportedFunction
    (function byte not 0x04), or InvalidRequest (count/span out of
    bounds). Callers implementing the slave side translate these into
    silence or exception replies.
    """
    if len(frame) < REQUEST_LEN:
        raise ShortFrame(f"request frame is {len(frame)} bytes, need {REQUEST_LEN}")
    if not crc_ok(frame):
        raise CrcMismatch("request CRC check failed")
    unit, function, start, count = struct.unpack(">BBHH", frame[:6])
    if function != FUNC_READ_INPUT:
        raise UnsupportedFunction(unit, function)
    if len(frame) != REQUEST_LEN:
        raise ShortFrame(f"function 0x04 request must be 8 bytes, got {len(frame)}")
    if not 1 <= count <= MAX_READ_COUNT or start + count > 0x10000:
        raise InvalidRequest(unit, f"bad register span start={start} count={count}")
    return ReadRequest(unit=unit, start=start, count=count)


def encode_read_response(unit: int, registers: list[int]) -> bytes:
    """Response frame: unit, 0x04, byte count, big-endian words, CRC."""
    if not 1 <= len(registers) <= MAX_READ_COUNT:
        raise ValueError(f"register count must be in 1..{MAX_READ_COUNT}, "
                         f"got {len(registers)}")
    body = struct.pack(">BBB", unit, FUNC_READ_INPUT, 2 * len(registers))
    body += struct.pack(f">{len(registers)}H", *registers)
    return body + crc16_bytes(body)


def encode_exception(unit: int, function: int, code: int) -> bytes:
    """Exception frame: unit, function|0x80, exception code, CRC."""
    body = struct.pack(">BBB", unit, function | EXC_FUNCTION_FLAG, code)
    return body + crc16_bytes(body)


def response_length(count: int) -> int:
    """Wire length of a normal response carrying `count` registers."""
    return 5 + 2 * count


def decode_response(frame: bytes, expected: ReadRequest) -> list[int]:
    """Parse the response to `expected`, returning its register words.

    Validates, in order: CRC, unit match, exception function, byte
    count. Never returns data from a frame whose CRC failed.
    """
    if len(frame) < EXCEPTION_LEN:
        raise ShortFrame(f"response frame is {len(frame)} bytes, need >= {EXCEPTION_LEN}")
    if not crc_ok(frame):
        raise CrcMismatch("response CRC check failed")
    unit = frame[0]
    function = frame[1]
    if unit != expected.unit:
        raise UnitMismatch(f"expected unit {expected.unit}, frame is from {unit}")
    if function == (FUNC_READ_INPUT | EXC_FUNCTION_FLAG):
        raise ExceptionReceived(frame[2])
    if function != FUNC_READ_INPUT:
        raise UnsupportedFunction(unit, function)
    byte_count = frame[2]
    if byte_count != 2 * expected.count or len(frame) != response_length(expected.count):
        raise LengthMismatch(
            f"expected {2 * expected.count} data bytes, frame carries {byte_count}")
    return list(struct.unpack(f">{expected.count}H", frame[3:3 + byte_count]))


def scan_frame(buf: bytes, lengths: tuple[int, ...]) -> tuple[bytes | None, bytes]:
    """Find the first CRC-valid frame of any given length in a byte stream.

    Returns (frame, remainder-after-frame) on a hit. On a miss, returns
    (None, tail) where the tail keeps only bytes that could still start
    a frame once more bytes arrive; everything older is garbage and is
    dropped (resync discipline for noisy links).
    """
    if not buf:
        return None, buf
    shortest = min(lengths)
    for offset in range(len(buf)):
        for length in lengths:
            window = buf[offset:offset + length]
            if len(window) == length and crc_ok(window):
                return window, buf[offset + length:]
    keep = min(len(buf), shortest - 1)
    return None, buf[len(buf) - keep:]


# -- IEEE-754 two-register codec ----------------------------------------------


def f32_from_registers(hi: int, lo: int) -> float:
    """32-bit float assembled from two registers, high word first.

    NaN and infinity payloads are rejected: a meter never reports them,
    so they indicate a corrupt or bogus reading.
    """
    value = struct.unpack(">f", struct.pack(">HH", hi & 0xFFFF, lo & 0xFFFF))[0]
    if math.isnan(value):
        raise DecodeNaN(f"registers {hi:04X} {lo:04X} decode to NaN")
    if math.isinf(value):
        raise DecodeInfinity(f"registers {hi:04X} {lo:04X} decode to infinity")
    return value


def f32_to_registers(value: float) -> tuple[int, int]:
    """Two register words (hi, lo) for a finite value, rounded to float32."""
    if not math.isfinite(value):
        raise ValueError(f"cannot encode non-finite value {value!r}")
    try:
        packed = struct.pack(">f", value)
    except OverflowError as exc:
        raise ValueError(f"value {value!r} overflows float32") from exc
    hi, lo = struct.unpack(">HH", packed)
    return hi, lo


def f32_round(value: float) -> float:
    """The nearest float32 to `value`, as a Python float."""
    return struct.unpack(">f", struct.pack(">f", value))[0]
