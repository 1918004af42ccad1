"""Append-only persistent store for samples and gap events.

One file holds every device's rows. Each record is length-prefixed and
carries its own CRC-32, so a crash mid-write can only ever produce a
damaged tail, never a damaged middle; the writer truncates that tail
away on reopen, and readers simply stop at it. Appends are flushed and
fsynced before returning.

Layout (all integers little-endian):

    file   := magic(8) record*
    magic  := "LVST0001"
    record := len:u32 payload crc32(payload):u32
    payload:= kind:u8 name_len:u8 name id:u64 ts_ms:i64 body
    body   := sample: 6 x f64 (V, A, Hz, PF, W, kWh)
            | gap:    reason:u8 exception_code:u8

Ids count per device, gapless from 1. Concurrency: exactly one writer
(enforced with an OS file lock), any number of read-only handles; a
writer handle may be shared across threads, appends are serialized
internally.
"""

from __future__ import annotations

import fcntl
import io
import os
import struct
import threading
import zlib
from dataclasses import dataclass

from .model import GapEvent, GapReason, Sample

MAGIC = b"LVST0001"

KIND_SAMPLE = 1
KIND_GAP = 2

# length prefix sanity bound; a real payload is under 200 bytes
MAX_PAYLOAD = 1 << 20

_REASON_CODES = {
    GapReason.TIMEOUT: 1,
    GapReason.CRC_ERROR: 2,
    GapReason.EXCEPTION: 3,
}
_REASON_BY_CODE = {code: reason for reason, code in _REASON_CODES.items()}

_LEN = struct.Struct("<I")
_CRC = struct.Struct("<I")
_HEAD = struct.Struct("<BB")      # kind, name_len
_META = struct.Struct("<Qq")      # id, ts_ms
_SAMPLE_BODY = struct.Struct("<6d")
_GAP_BODY = struct.Struct("<BB")


class StoreError(Exception):
    """Base for store failures."""


class StoreLocked(StoreError):
    """Another process already holds the writer lock."""


class CorruptStore(StoreError):
    """The file exists but does not look like a store."""


class ReadOnlyStore(StoreError):
    """Append attempted through a read-only handle."""


@dataclass(frozen=True)
class StoredRow:
    """One persisted row: a per-device id plus the record itself."""

    id: int
    record: Sample | GapEvent

    @property
    def device(self) -> str:
        return self.record.device

    @property
    def ts(self) -> int:
        return self.record.ts

    @property
    def is_sample(self) -> bool:
        return isinstance(self.record, Sample)


def _encode_payload(row_id: int, record: Sample | GapEvent) -> bytes:
    name = record.device.encode("utf-8")
    if not 1 <= len(name) <= 255:
        raise ValueError(f"device name length out of range: {record.device!r}")
    if isinstance(record, Sample):
        kind = KIND_SAMPLE
        body = _SAMPLE_BODY.pack(record.voltage, record.current,
                                 record.frequency, record.power_factor,
                                 record.active_power, record.energy)
    elif isinstance(record, GapEvent):
        kind = KIND_GAP
        body = _GAP_BODY.pack(_REASON_CODES[record.reason],
                              record.exception_code & 0xFF)
    else:
        raise TypeError(f"cannot store {type(record).__name__}")
    return (_HEAD.pack(kind, len(name)) + name
            + _META.pack(row_id, record.ts) + body)


def _decode_payload(payload: bytes) -> StoredRow:
    kind, name_len = _HEAD.unpack_from(payload, 0)
    offset = _HEAD.size
    name = payload[offset:offset + name_len].decode("utf-8")
    offset += name_len
    row_id, ts = _META.unpack_from(payload, offset)
    offset += _META.size
    if kind == KIND_SAMPLE:
        v, i, hz, pf, w, kwh = _SAMPLE_BODY.unpack_from(payload, offset)
        record: Sample | GapEvent = Sample(
            device=name, ts=ts, voltage=v, current=i, frequency=hz,
            power_factor=pf, active_power=w, energy=kwh)
    elif kind == KIND_GAP:
        reason_code, exc_code = _GAP_BODY.unpack_from(payload, offset)
        reason = _REASON_BY_CODE.get(reason_code)
        if reason is None:
            raise CorruptStore(f"unknown gap reason code {reason_code}")
        record = GapEvent(device=name, ts=ts, reason=reason,
                          exception_code=exc_code)
    else:
        raise CorruptStore(f"unknown record kind {kind}")
    return StoredRow(id=row_id, record=record)


class Store:
    """A handle on one store file.

    Use :meth:`open_writer` for the single appending handle and
    :meth:`open_reader` for query-only handles. Readers re-scan the
    file tail on every query, so they see rows the writer appended
    after they opened.
    """

    def __init__(self, path: str, *, writable: bool):
        self.path = path
        self.writable = writable
        self._lock = threading.Lock()
        self._rows: dict[str, list[StoredRow]] = {}
        self._next_id: dict[str, int] = {}
        self._scan_offset = 0
        self._file: io.BufferedRandom | io.BufferedReader | None = None
        if writable:
            self._open_writer()
        else:
            self._open_reader()

    # -- opening ---------------------------------------------------------------

    @classmethod
    def open_writer(cls, path: str) -> "Store":
        return cls(path, writable=True)

    @classmethod
    def open_reader(cls, path: str) -> "Store":
        return cls(path, writable=False)

    def _open_writer(self) -> None:
        new = not os.path.exists(self.path) or os.path.getsize(self.path) == 0
        try:
            self._file = open(self.path, "a+b")
        except OSError as exc:
            raise StoreError(f"{self.path}: cannot open for writing: {exc}") from exc
        try:
            fcntl.flock(self._file.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError as exc:
            self._file.close()
            self._file = None
            raise StoreLocked(f"{self.path}: another writer holds the lock") from exc
        if new:
            self._file.write(MAGIC)
            self._file.flush()
            os.fsync(self._file.fileno())
        self._check_magic()
        valid_end = self._scan_all()
        size = os.path.getsize(self.path)
        if size > valid_end:
            # torn tail from an interrupted write: cut it off
            self._file.truncate(valid_end)
            self._file.flush()
            os.fsync(self._file.fileno())
        self._file.seek(0, os.SEEK_END)

    def _open_reader(self) -> None:
        try:
            self._file = open(self.path, "rb")
        except OSError as exc:
            raise StoreError(f"{self.path}: cannot open: {exc}") from exc
        self._check_magic()
        self._scan_all()

    def _check_magic(self) -> None:
        self._file.seek(0)
        head = self._file.read(len(MAGIC))
        if head != MAGIC:
            raise CorruptStore(f"{self.path}: bad magic {head!r}")
        self._scan_offset = len(MAGIC)

    # -- scanning ---------------------------------------------------------------

    def _scan_all(self) -> int:
        """Index every whole valid record; returns the clean end offset."""
        self._rows.clear()
        self._next_id.clear()
        self._scan_offset = len(MAGIC)
        self._absorb_new_rows()
        return self._scan_offset

    def _absorb_new_rows(self) -> None:
        """Advance over freshly appended whole records, indexing them.

        Stops (without advancing) at anything short or invalid, so a
        mid-append snapshot only hides the unfinished row, and the next
        call picks it up once complete.
        """
        f = self._file
        f.seek(self._scan_offset)
        while True:
            start = f.tell()
            len_bytes = f.read(_LEN.size)
            if len(len_bytes) < _LEN.size:
                break
            (payload_len,) = _LEN.unpack(len_bytes)
            if payload_len == 0 or payload_len > MAX_PAYLOAD:
                break
            rest = f.read(payload_len + _CRC.size)
            if len(rest) < payload_len + _CRC.size:
                break
            payload = rest[:payload_len]
            (crc_stored,) = _CRC.unpack(rest[payload_len:])
            if zlib.crc32(payload) != crc_stored:
                break
            try:
                row = _decode_payload(payload)
            except (CorruptStore, struct.error, UnicodeDecodeError):
                break
            self._rows.setdefault(row.device, []).append(row)
            self._next_id[row.device] = row.id + 1
            self._scan_offset = f.tell()
        f.seek(start)

    def _refresh(self) -> None:
        if not self.writable:
            self._absorb_new_rows()

    # -- writing ---------------------------------------------------------------

    def append(self, record: Sample | GapEvent) -> int:
        """Persist one record durably; returns its per-device id."""
        if not self.writable:
            raise ReadOnlyStore(f"{self.path}: opened read-only")
        with self._lock:
            if self._file is None:
                raise StoreError(f"{self.path}: store is closed")
            row_id = self._next_id.get(record.device, 1)
            payload = _encode_payload(row_id, record)
            frame = _LEN.pack(len(payload)) + payload + _CRC.pack(zlib.crc32(payload))
            try:
                self._file.write(frame)
                self._file.flush()
                os.fsync(self._file.fileno())
            except OSError as exc:
                raise StoreError(f"{self.path}: append failed: {exc}") from exc
            row = StoredRow(id=row_id, record=record)
            self._rows.setdefault(record.device, []).append(row)
            self._next_id[record.device] = row_id + 1
            self._scan_offset += len(frame)
            return row_id

    # -- queries ----------------------------------------------------------------

    def devices(self) -> list[str]:
        """Names with at least one row, sorted."""
        with self._lock:
            self._refresh()
            return sorted(self._rows.keys())

    def query_latest(self, device: str) -> StoredRow | None:
        """Newest Sample row for the device; gap rows are skipped.

        A device with no rows (or none that are samples) yields None;
        whether the name is known at all is the caller's concern.
        """
        with self._lock:
            self._refresh()
            rows = self._rows.get(device, [])
            for row in reversed(rows):
                if row.is_sample:
                    return row
            return None

    def query_range(
        self,
        device: str,
        from_ts: int,
        to_ts: int,
        limit: int,
        *,
        samples_only: bool = False,
    ) -> tuple[list[StoredRow], bool]:
        """Rows with from_ts <= ts <= to_ts in ascending ts order.

        Returns (rows, truncated). Both bounds inclusive. Gap rows are
        included unless samples_only is set; the limit counts whatever
        survives that filter.
        """
        if from_ts > to_ts:
            raise ValueError(f"invalid range: from {from_ts} > to {to_ts}")
        if limit < 1:
            raise ValueError(f"limit must be at least 1, got {limit}")
        with self._lock:
            self._refresh()
            rows = self._rows.get(device, [])
            # append order is ts order (non-decreasing per device)
            matching = [r for r in rows
                        if from_ts <= r.ts <= to_ts
                        and (r.is_sample or not samples_only)]
            if len(matching) > limit:
                return matching[:limit], True
            return matching, False

    def last_seen(self, device: str) -> int | None:
        """ts of the newest Sample for the device, if any."""
        row = self.query_latest(device)
        return row.ts if row is not None else None

    def count(self, device: str | None = None) -> int:
        with self._lock:
            self._refresh()
            if device is not None:
                return len(self._rows.get(device, []))
            return sum(len(rows) for rows in self._rows.values())

    def all_rows(self, device: str | None = None) -> list[StoredRow]:
        """Every row in append order, optionally for one device."""
        with self._lock:
            self._refresh()
            if device is not None:
                return list(self._rows.get(device, []))
            merged: list[StoredRow] = []
            for rows in self._rows.values():
                merged.extend(rows)
            merged.sort(key=lambda r: (r.ts, r.device, r.id))
            return merged

    # -- lifecycle ---------------------------------------------------------------

    def close(self) -> None:
        with self._lock:
            if self._file is not None:
                self._file.close()
                self._file = None

    def __enter__(self) -> "Store":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()
