"""Low-voltage switchboard power monitoring.

A self-contained acquisition pipeline for single-phase power
analysers: a Modbus RTU simulator, a polling gateway, a crash-safe
sample store, and an authenticated JSON API. The ``lvmon`` command
ties the pieces together; ``lvmon demo`` runs them all in one process.
"""

from .model import (
    GapEvent,
    GapReason,
    KIND_ORDER,
    MeasurementKind,
    RegisterMap,
    Sample,
)

__version__ = "0.1.0"

__all__ = [
    "GapEvent",
    "GapReason",
    "KIND_ORDER",
    "MeasurementKind",
    "RegisterMap",
    "Sample",
    "__version__",
]
