"""Authenticated JSON API over the sample store.

Four routes, one of them unauthenticated:

    POST /api/login                          {username, password} -> {token, expires}
    GET  /api/devices                        [{name, unit, last_seen}]
    GET  /api/devices/{name}/latest          newest sample, JSON numbers; 204 if none
    GET  /api/devices/{name}/records         {"<name>": [rows]} with string values
         ?from=&to=&limit=                   truncation flagged via X-Truncated header

Data routes need ``Authorization: Bearer <token>``. Every 401 carries
the same body bytes regardless of cause (unknown user, wrong password,
missing or expired token), and login hashes a dummy credential for
unknown users so the two failure modes take the same time.

The records route keeps the shape of the old PHP table dump it
replaces: one top-level key named after the device table, rows with
every value rendered as a decimal string. The latest route is the
modern surface and uses plain JSON numbers.

The server only reads the store; pass it its own read handle so
request handling never contends with the writer.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import logging
import secrets
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Iterable, Protocol
from urllib.parse import parse_qs, unquote, urlsplit

from .model import Sample
from .modbus import f32_round
from .store import Store, StoredRow

log = logging.getLogger(__name__)

PBKDF2_ITERATIONS = 60_000
SALT_LEN = 16
TOKEN_TTL_S = 12 * 3600
DEFAULT_RECORD_LIMIT = 1000
TRUNCATION_HEADER = "X-Truncated"

_UNAUTHORIZED_BODY = b'{"error":"unauthorized"}'

# canonical key order of one legacy records row
ROW_FIELDS = ("id", "ts", "voltage", "current", "frequency",
              "power_factor", "active_power", "energy")


def hash_password(password: str, salt: bytes | None = None) -> tuple[bytes, bytes]:
    """Salted PBKDF2 digest; returns (salt, hash)."""
    if salt is None:
        salt = secrets.token_bytes(SALT_LEN)
    digest = hashlib.pbkdf2_hmac(
        "sha256", password.encode("utf-8"), salt, PBKDF2_ITERATIONS)
    return salt, digest


@dataclass(frozen=True, repr=False)
class AuthRecord:
    """One user: name plus salted password hash. No plaintext kept."""

    username: str
    password_hash: bytes
    salt: bytes

    def __repr__(self) -> str:
        return f"AuthRecord(username={self.username!r})"

    @classmethod
    def from_password(cls, username: str, password: str) -> "AuthRecord":
        salt, digest = hash_password(password)
        return cls(username=username, password_hash=digest, salt=salt)

    def verify(self, password: str) -> bool:
        _, candidate = hash_password(password, self.salt)
        return hmac.compare_digest(candidate, self.password_hash)


class Authenticator:
    """Credential table with timing-equalized verification."""

    def __init__(self, users: Iterable[AuthRecord]):
        self._users = {u.username: u for u in users}
        # hashed against for unknown usernames, so lookup misses cost
        # the same as a wrong password
        self._decoy = AuthRecord.from_password("\x00decoy", secrets.token_hex(16))

    def check(self, username: str, password: str) -> bool:
        record = self._users.get(username)
        if record is None:
            self._decoy.verify(password)
            return False
        return record.verify(password)

    def __len__(self) -> int:
        return len(self._users)


@dataclass
class _Session:
    username: str
    expires_ms: int


class TokenTable:
    """In-memory bearer tokens; restart forgets every session."""

    def __init__(self, ttl_s: float = TOKEN_TTL_S):
        self.ttl_s = ttl_s
        self._lock = threading.Lock()
        self._sessions: dict[str, _Session] = {}

    def issue(self, username: str) -> tuple[str, int]:
        token = secrets.token_urlsafe(32)
        expires_ms = int((time.time() + self.ttl_s) * 1000)
        with self._lock:
            self._sessions[token] = _Session(username, expires_ms)
        return token, expires_ms

    def check(self, token: str) -> bool:
        now_ms = int(time.time() * 1000)
        with self._lock:
            session = self._sessions.get(token)
            if session is None:
                return False
            if session.expires_ms <= now_ms:
                del self._sessions[token]
                return False
            return True


class DeviceInfo(Protocol):
    name: str
    unit: int


def legacy_number(value: float) -> str:
    """Decimal string for one reading, as the old table dump printed it.

    Shortest decimal that still parses back to the same float32, so
    "220.0" and "0.85" come out instead of their double expansions.
    """
    target = f32_round(value)
    for digits in range(0, 13):
        cand = round(value, digits)
        if f32_round(cand) == target:
            return repr(cand)
    return repr(value)


def legacy_row(row: StoredRow) -> dict[str, str]:
    """One records row, every value string-typed, canonical key order."""
    sample = row.record
    if not isinstance(sample, Sample):
        raise TypeError("records rows are built from samples only")
    return {
        "id": str(row.id),
        "ts": str(sample.ts),
        "voltage": legacy_number(sample.voltage),
        "current": legacy_number(sample.current),
        "frequency": legacy_number(sample.frequency),
        "power_factor": legacy_number(sample.power_factor),
        "active_power": legacy_number(sample.active_power),
        "energy": legacy_number(sample.energy),
    }


def serialize_records(device: str, rows: list[StoredRow]) -> bytes:
    """The full legacy response body. Deterministic byte-for-byte."""
    payload = {device: [legacy_row(r) for r in rows]}
    return json.dumps(payload, separators=(",", ":")).encode("utf-8")


def sample_json(row: StoredRow) -> bytes:
    sample = row.record
    assert isinstance(sample, Sample)
    payload = {
        "device": sample.device,
        "ts": sample.ts,
        "voltage": sample.voltage,
        "current": sample.current,
        "frequency": sample.frequency,
        "power_factor": sample.power_factor,
        "active_power": sample.active_power,
        "energy": sample.energy,
    }
    return json.dumps(payload, separators=(",", ":")).encode("utf-8")


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: "ApiServer"

    # -- plumbing ----------------------------------------------------------------

    def log_message(self, fmt: str, *args) -> None:
        log.debug("http %s " + fmt, self.address_string(), *args)

    def _reply(self, status: int, body: bytes | None,
               extra_headers: dict[str, str] | None = None) -> None:
        self.send_response(status)
        if extra_headers:
            for key, value in extra_headers.items():
                self.send_header(key, value)
        if body is None:
            self.send_header("Content-Length", "0")
            self.end_headers()
            return
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _reply_json(self, status: int, payload: object,
                    extra_headers: dict[str, str] | None = None) -> None:
        body = json.dumps(payload, separators=(",", ":")).encode("utf-8")
        self._reply(status, body, extra_headers)

    def _unauthorized(self) -> None:
        self._reply(401, _UNAUTHORIZED_BODY)

    def _bad_request(self, message: str) -> None:
        self._reply_json(400, {"error": message})

    def _not_found(self) -> None:
        self._reply_json(404, {"error": "not found"})

    def _authorized(self) -> bool:
        header = self.headers.get("Authorization", "")
        if header.startswith("Bearer "):
            token = header[len("Bearer "):].strip()
            if token and self.server.tokens.check(token):
                return True
        self._unauthorized()
        return False

    def _read_body(self) -> bytes:
        try:
            length = int(self.headers.get("Content-Length", "0"))
        except ValueError:
            return b""
        if length <= 0:
            return b""
        return self.rfile.read(length)

    # -- routes -------------------------------------------------------------------

    def do_POST(self) -> None:  # noqa: N802 - http.server API
        try:
            split = urlsplit(self.path)
            if split.path == "/api/login":
                self._login()
            else:
                self._not_found()
        except BrokenPipeError:
            pass
        except Exception:
            log.exception("request handler failed")
            self._reply_json(500, {"error": "internal error"})

    def do_GET(self) -> None:  # noqa: N802 - http.server API
        try:
            split = urlsplit(self.path)
            parts = [unquote(p) for p in split.path.split("/") if p != ""]
            query = parse_qs(split.query)
            if parts == ["api", "devices"]:
                self._devices()
            elif len(parts) == 4 and parts[:2] == ["api", "devices"] \
                    and parts[3] == "latest":
                self._latest(parts[2])
            elif len(parts) == 4 and parts[:2] == ["api", "devices"] \
                    and parts[3] == "records":
                self._records(parts[2], query)
            else:
                self._not_found()
        except BrokenPipeError:
            pass
        except Exception:
            log.exception("request handler failed")
            self._reply_json(500, {"error": "internal error"})

    def _login(self) -> None:
        raw = self._read_body()
        try:
            body = json.loads(raw.decode("utf-8"))
            username = body["username"]
            password = body["password"]
            if not isinstance(username, str) or not isinstance(password, str):
                raise TypeError
        except (ValueError, KeyError, TypeError, UnicodeDecodeError):
            self._bad_request("expected JSON body with username and password")
            return
        if not self.server.auth.check(username, password):
            self._unauthorized()
            return
        token, expires_ms = self.server.tokens.issue(username)
        log.info("login ok for %s", username)
        self._reply_json(200, {"token": token, "expires": expires_ms})

    def _devices(self) -> None:
        if not self._authorized():
            return
        out = []
        for device in self.server.devices:
            out.append({
                "name": device.name,
                "unit": device.unit,
                "last_seen": self.server.store.last_seen(device.name),
            })
        self._reply_json(200, out)

    def _device_known(self, name: str) -> bool:
        return any(d.name == name for d in self.server.devices)

    def _latest(self, name: str) -> None:
        if not self._authorized():
            return
        if not self._device_known(name):
            self._not_found()
            return
        row = self.server.store.query_latest(name)
        if row is None:
            self._reply(204, None)
            return
        self._reply(200, sample_json(row))

    def _records(self, name: str, query: dict[str, list[str]]) -> None:
        if not self._authorized():
            return
        if not self._device_known(name):
            self._not_found()
            return
        try:
            from_ts = int(query.get("from", ["0"])[0])
            to_ts = int(query.get("to", [str(2 ** 62)])[0])
            limit = int(query.get("limit", [str(DEFAULT_RECORD_LIMIT)])[0])
        except ValueError:
            self._bad_request("from, to and limit must be integers")
            return
        try:
            rows, truncated = self.server.store.query_range(
                name, from_ts, to_ts, limit, samples_only=True)
        except ValueError as exc:
            self._bad_request(str(exc))
            return
        body = serialize_records(name, rows)
        self._reply(200, body,
                    {TRUNCATION_HEADER: "true" if truncated else "false"})


@dataclass
class ApiSettings:
    host: str = "127.0.0.1"
    port: int = 8420
    token_ttl_s: float = TOKEN_TTL_S


class ApiServer(ThreadingHTTPServer):
    """The HTTP front end; serves in a background thread via start()."""

    daemon_threads = True

    def __init__(
        self,
        store: Store,
        devices: list[DeviceInfo],
        users: Iterable[AuthRecord],
        settings: ApiSettings | None = None,
    ):
        settings = settings or ApiSettings()
        self.store = store
        self.devices = list(devices)
        self.auth = Authenticator(users)
        self.tokens = TokenTable(ttl_s=settings.token_ttl_s)
        self._thread: threading.Thread | None = None
        super().__init__((settings.host, settings.port), _Handler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[0], self.server_address[1]

    def start(self) -> "ApiServer":
        self._thread = threading.Thread(
            target=self.serve_forever, name="api-http", daemon=True)
        self._thread.start()
        log.info("api listening on http://%s:%d", *self.address)
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
            self._thread = None
