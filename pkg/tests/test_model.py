"""Domain types: measurement kinds, register layout, samples, gaps."""

from __future__ import annotations

import dataclasses

import pytest

from lvmon.model import (
    DEFAULT_MAP,
    KIND_ORDER,
    UNIT_LABELS,
    GapEvent,
    GapReason,
    MeasurementKind,
    RegisterMap,
    Sample,
)


def test_kind_order_and_labels():
    assert [k.value for k in KIND_ORDER] == [
        "voltage", "current", "frequency", "power_factor",
        "active_power", "energy"]
    assert UNIT_LABELS[MeasurementKind.VOLTAGE] == "V"
    assert UNIT_LABELS[MeasurementKind.CURRENT] == "A"
    assert UNIT_LABELS[MeasurementKind.FREQUENCY] == "Hz"
    assert UNIT_LABELS[MeasurementKind.POWER_FACTOR] == ""
    assert UNIT_LABELS[MeasurementKind.ACTIVE_POWER] == "W"
    assert UNIT_LABELS[MeasurementKind.ENERGY] == "kWh"


def test_default_map_layout():
    starts = [DEFAULT_MAP.start(k) for k in KIND_ORDER]
    assert starts == [0x0000, 0x0002, 0x0004, 0x0006, 0x0008, 0x000A]
    assert DEFAULT_MAP.is_contiguous_default()
    assert DEFAULT_MAP.registers() == set(range(12))


def test_voltage_must_sit_at_address_zero():
    starts = {k: DEFAULT_MAP.start(k) for k in KIND_ORDER}
    starts[MeasurementKind.VOLTAGE] = 0x0010
    starts[MeasurementKind.ENERGY] = 0x0000
    with pytest.raises(ValueError):
        RegisterMap(starts)


def test_register_blocks_must_not_overlap():
    starts = {k: DEFAULT_MAP.start(k) for k in KIND_ORDER}
    starts[MeasurementKind.ENERGY] = 0x0009  # collides with active power
    with pytest.raises(ValueError):
        RegisterMap(starts)


def test_map_requires_all_six_kinds():
    starts = {k: DEFAULT_MAP.start(k) for k in KIND_ORDER}
    del starts[MeasurementKind.ENERGY]
    with pytest.raises(ValueError):
        RegisterMap(starts)


def test_custom_map_is_not_contiguous_default():
    starts = {k: DEFAULT_MAP.start(k) for k in KIND_ORDER}
    starts[MeasurementKind.ENERGY] = 0x0100
    custom = RegisterMap(starts)
    assert not custom.is_contiguous_default()
    assert custom.start(MeasurementKind.ENERGY) == 0x0100


def test_sample_value_accessor():
    sample = Sample(device="pm01", ts=1, voltage=220.0, current=14.0,
                    frequency=50.0, power_factor=0.85, active_power=2618.0,
                    energy=0.5)
    assert sample.value(MeasurementKind.VOLTAGE) == 220.0
    assert sample.value(MeasurementKind.ENERGY) == 0.5
    assert dataclasses.asdict(sample)["device"] == "pm01"


def test_gap_event_defaults():
    gap = GapEvent(device="pm01", ts=2, reason=GapReason.TIMEOUT)
    assert gap.exception_code == 0
    coded = GapEvent(device="pm01", ts=3, reason=GapReason.EXCEPTION,
                     exception_code=2)
    assert coded.reason is GapReason.EXCEPTION and coded.exception_code == 2


def test_records_are_immutable():
    sample = Sample(device="pm01", ts=1, voltage=220.0, current=14.0,
                    frequency=50.0, power_factor=0.85, active_power=2618.0,
                    energy=0.5)
    with pytest.raises(dataclasses.FrozenInstanceError):
        sample.voltage = 0.0
