"""Shared domain types: measurement kinds, register map, samples, gaps.

A power analyser exposes six quantities, each held in a two-register
block of input registers. The default map is contiguous starting at
voltage = 0x0000 (see docs/REGISTERS.md).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field


class MeasurementKind(enum.Enum):
    VOLTAGE = "voltage"
    CURRENT = "current"
    FREQUENCY = "frequency"
    POWER_FACTOR = "power_factor"
    ACTIVE_POWER = "active_power"
    ENERGY = "energy"


# Poll order is fixed: one read per kind, in this sequence.
KIND_ORDER = (
    MeasurementKind.VOLTAGE,
    MeasurementKind.CURRENT,
    MeasurementKind.FREQUENCY,
    MeasurementKind.POWER_FACTOR,
    MeasurementKind.ACTIVE_POWER,
    MeasurementKind.ENERGY,
)

UNIT_LABELS = {
    MeasurementKind.VOLTAGE: "V",
    MeasurementKind.CURRENT: "A",
    MeasurementKind.FREQUENCY: "Hz",
    MeasurementKind.POWER_FACTOR: "",
    MeasurementKind.ACTIVE_POWER: "W",
    MeasurementKind.ENERGY: "kWh",
}

REGISTERS_PER_KIND = 2


@dataclass(frozen=True)
class RegisterMap:
    """Which input register block holds which quantity.

    Each kind spans two registers. Blocks must not overlap, and voltage
    is pinned to register 0x0000 by the wire contract.
    """

    starts: dict[MeasurementKind, int] = field(default_factory=lambda: dict(_DEFAULT_STARTS))

    def __post_init__(self):
        if set(self.starts) != set(MeasurementKind):
            missing = set(MeasurementKind) - set(self.starts)
            raise ValueError(f"register map must cover all six kinds, missing {missing}")
        if self.starts[MeasurementKind.VOLTAGE] != 0x0000:
            raise ValueError("voltage block must start at register 0x0000")
        covered: set[int] = set()
        for kind, start in self.starts.items():
            if not 0 <= start <= 0xFFFF - (REGISTERS_PER_KIND - 1):
                raise ValueError(f"{kind.value} block start {start:#06x} out of range")
            block = set(range(start, start + REGISTERS_PER_KIND))
            if covered & block:
                raise ValueError(f"{kind.value} block overlaps another block")
            covered |= block

    def start(self, kind: MeasurementKind) -> int:
        return self.starts[kind]

    def registers(self) -> set[int]:
        """All register addresses the map covers."""
        out: set[int] = set()
        for start in self.starts.values():
            out.update(range(start, start + REGISTERS_PER_KIND))
        return out

    def is_contiguous_default(self) -> bool:
        """True for the standard layout: six blocks packed from 0x0000."""
        return all(self.starts[k] == _DEFAULT_STARTS[k] for k in MeasurementKind)


_DEFAULT_STARTS = {
    MeasurementKind.VOLTAGE: 0x0000,
    MeasurementKind.CURRENT: 0x0002,
    MeasurementKind.FREQUENCY: 0x0004,
    MeasurementKind.POWER_FACTOR: 0x0006,
    MeasurementKind.ACTIVE_POWER: 0x0008,
    MeasurementKind.ENERGY: 0x000A,
}

DEFAULT_MAP = RegisterMap()


@dataclass(frozen=True)
class Sample:
    """One timestamped six-quantity reading from one device.

    ts is UTC epoch milliseconds; values are finite floats straight
    from the float32 wire codec.
    """

    device: str
    ts: int
    voltage: float
    current: float
    frequency: float
    power_factor: float
    active_power: float
    energy: float

    def value(self, kind: MeasurementKind) -> float:
        return getattr(self, kind.value)


class GapReason(enum.Enum):
    TIMEOUT = "timeout"
    CRC_ERROR = "crc_error"
    EXCEPTION = "exception"


@dataclass(frozen=True)
class GapEvent:
    """A poll cycle that produced no valid Sample."""

    device: str
    ts: int
    reason: GapReason
    exception_code: int = 0
