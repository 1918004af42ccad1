"""YAML configuration: one file describes devices, polling, store,
API, users, and simulators.

Validation is strict: unknown keys are rejected, and every diagnostic
carries the dotted path of the offending node (``poll.intervall_ms``,
``devices[0].unit``), so typos point at themselves.

Passwords may be given in the clear (hashed immediately on load,
never kept) or pre-hashed as hex ``password_hash`` + ``salt``.

The ``serial`` block (baud, parity, ...) is validated and carried
along for transports that need it; TCP transports ignore it, which is
logged once at startup rather than treated as an error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import yaml

from .api import ApiSettings, AuthRecord
from .gateway import DeviceConfig, PollPolicy
from .model import MeasurementKind, RegisterMap

DEFAULT_API_HOST = "127.0.0.1"
DEFAULT_API_PORT = 8420
DEFAULT_STORE_PATH = "lvmon.store"

_PARITY_VALUES = {"none", "even", "odd"}


class ConfigError(Exception):
    """Invalid configuration; message includes the offending key path."""


@dataclass(frozen=True)
class SimSettings:
    unit: int = 1
    seed: int | None = None
    listen: str = "127.0.0.1:15020"
    admin_port: int | None = None
    tick_ms: int = 1000


@dataclass(frozen=True)
class SerialSettings:
    """Line parameters, advisory on TCP transports."""

    baud: int = 9600
    parity: str = "none"
    data_bits: int = 8
    stop_bits: int = 1


@dataclass
class Config:
    devices: list[DeviceConfig] = field(default_factory=list)
    poll: PollPolicy = field(default_factory=PollPolicy)
    store_path: str = DEFAULT_STORE_PATH
    api: ApiSettings = field(default_factory=lambda: ApiSettings(
        host=DEFAULT_API_HOST, port=DEFAULT_API_PORT))
    users: list[AuthRecord] = field(default_factory=list)
    sims: list[SimSettings] = field(default_factory=list)
    serial: SerialSettings = field(default_factory=SerialSettings)


# -- node validators -----------------------------------------------------------


def _mapping(node: object, path: str, allowed: set[str]) -> dict:
    if node is None:
        return {}
    if not isinstance(node, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(node).__name__}")
    for key in node:
        if not isinstance(key, str):
            raise ConfigError(f"{path}: keys must be strings, got {key!r}")
        if key not in allowed:
            raise ConfigError(
                f"{path}.{key}: unknown key (allowed: {', '.join(sorted(allowed))})")
    return node


def _seq(node: object, path: str) -> list:
    if node is None:
        return []
    if not isinstance(node, list):
        raise ConfigError(f"{path}: expected a list, got {type(node).__name__}")
    return node


def _str(node: object, path: str) -> str:
    if not isinstance(node, str) or not node:
        raise ConfigError(f"{path}: expected a non-empty string, got {node!r}")
    return node


def _int(node: object, path: str, lo: int | None = None,
         hi: int | None = None) -> int:
    if isinstance(node, bool) or not isinstance(node, int):
        raise ConfigError(f"{path}: expected an integer, got {node!r}")
    if lo is not None and node < lo:
        raise ConfigError(f"{path}: must be at least {lo}, got {node}")
    if hi is not None and node > hi:
        raise ConfigError(f"{path}: must be at most {hi}, got {node}")
    return node


def _number(node: object, path: str) -> float:
    if isinstance(node, bool) or not isinstance(node, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {node!r}")
    return float(node)


def _hex_bytes(node: object, path: str) -> bytes:
    text = _str(node, path)
    try:
        return bytes.fromhex(text)
    except ValueError:
        raise ConfigError(f"{path}: expected hex digits") from None


# -- section parsers -------------------------------------------------------------


def _parse_register_map(node: object, path: str) -> RegisterMap:
    fields = {kind.value for kind in MeasurementKind}
    mapping = _mapping(node, path, fields)
    missing = fields - set(mapping)
    if missing:
        raise ConfigError(
            f"{path}: register map must name all six quantities, "
            f"missing {', '.join(sorted(missing))}")
    starts = {MeasurementKind(key): _int(value, f"{path}.{key}", 0, 0xFFFF)
              for key, value in mapping.items()}
    try:
        return RegisterMap(starts)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _parse_device(node: object, path: str) -> DeviceConfig:
    mapping = _mapping(node, path, {"name", "unit", "transport", "register_map"})
    if "name" not in mapping or "unit" not in mapping or "transport" not in mapping:
        raise ConfigError(f"{path}: device needs name, unit and transport")
    kwargs = {
        "name": _str(mapping["name"], f"{path}.name"),
        "unit": _int(mapping["unit"], f"{path}.unit", 1, 247),
        "transport": _str(mapping["transport"], f"{path}.transport"),
    }
    if "register_map" in mapping:
        kwargs["register_map"] = _parse_register_map(
            mapping["register_map"], f"{path}.register_map")
    try:
        return DeviceConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _parse_poll(node: object, path: str) -> PollPolicy:
    mapping = _mapping(node, path, {"interval_ms", "timeout_ms", "retries"})
    try:
        return PollPolicy(
            interval_ms=_int(mapping.get("interval_ms", 1000), f"{path}.interval_ms"),
            timeout_ms=_int(mapping.get("timeout_ms", 500), f"{path}.timeout_ms"),
            retries=_int(mapping.get("retries", 3), f"{path}.retries"),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _parse_api(node: object, path: str) -> ApiSettings:
    mapping = _mapping(node, path, {"host", "port", "token_ttl_s"})
    settings = ApiSettings(host=DEFAULT_API_HOST, port=DEFAULT_API_PORT)
    if "host" in mapping:
        settings.host = _str(mapping["host"], f"{path}.host")
    if "port" in mapping:
        settings.port = _int(mapping["port"], f"{path}.port", 0, 65535)
    if "token_ttl_s" in mapping:
        settings.token_ttl_s = _number(mapping["token_ttl_s"], f"{path}.token_ttl_s")
        if settings.token_ttl_s <= 0:
            raise ConfigError(f"{path}.token_ttl_s: must be positive")
    return settings


def _parse_user(node: object, path: str) -> AuthRecord:
    mapping = _mapping(node, path, {"username", "password", "password_hash", "salt"})
    if "username" not in mapping:
        raise ConfigError(f"{path}: user needs a username")
    username = _str(mapping["username"], f"{path}.username")
    has_plain = "password" in mapping
    has_hash = "password_hash" in mapping or "salt" in mapping
    if has_plain and has_hash:
        raise ConfigError(f"{path}: give either password or password_hash+salt, not both")
    if has_plain:
        return AuthRecord.from_password(
            username, _str(mapping["password"], f"{path}.password"))
    if "password_hash" not in mapping or "salt" not in mapping:
        raise ConfigError(f"{path}: pre-hashed users need both password_hash and salt")
    return AuthRecord(
        username=username,
        password_hash=_hex_bytes(mapping["password_hash"], f"{path}.password_hash"),
        salt=_hex_bytes(mapping["salt"], f"{path}.salt"),
    )


def _parse_sim(node: object, path: str) -> SimSettings:
    mapping = _mapping(node, path,
                       {"unit", "seed", "listen", "admin_port", "tick_ms"})
    kwargs = {}
    if "unit" in mapping:
        kwargs["unit"] = _int(mapping["unit"], f"{path}.unit", 1, 247)
    if "seed" in mapping:
        kwargs["seed"] = _int(mapping["seed"], f"{path}.seed")
    if "listen" in mapping:
        kwargs["listen"] = _str(mapping["listen"], f"{path}.listen")
    if "admin_port" in mapping:
        kwargs["admin_port"] = _int(mapping["admin_port"], f"{path}.admin_port", 0, 65535)
    if "tick_ms" in mapping:
        kwargs["tick_ms"] = _int(mapping["tick_ms"], f"{path}.tick_ms", 1)
    return SimSettings(**kwargs)


def _parse_serial(node: object, path: str) -> SerialSettings:
    mapping = _mapping(node, path, {"baud", "parity", "data_bits", "stop_bits"})
    parity = mapping.get("parity", "none")
    if parity in (0, "0"):
        parity = "none"
    if not isinstance(parity, str) or parity.lower() not in _PARITY_VALUES:
        raise ConfigError(
            f"{path}.parity: expected none, even, odd or 0, got {parity!r}")
    return SerialSettings(
        baud=_int(mapping.get("baud", 9600), f"{path}.baud", 1),
        parity=parity.lower(),
        data_bits=_int(mapping.get("data_bits", 8), f"{path}.data_bits", 5, 9),
        stop_bits=_int(mapping.get("stop_bits", 1), f"{path}.stop_bits", 1, 2),
    )


_TOP_KEYS = {"devices", "poll", "store", "api", "users", "sims", "serial"}


def parse_config(raw: object, source: str = "config") -> Config:
    """Validate an already-loaded YAML document into a Config."""
    mapping = _mapping(raw, source, _TOP_KEYS)
    config = Config()
    config.devices = [
        _parse_device(node, f"{source}.devices[{i}]")
        for i, node in enumerate(_seq(mapping.get("devices"), f"{source}.devices"))
    ]
    names = [d.name for d in config.devices]
    if len(set(names)) != len(names):
        raise ConfigError(f"{source}.devices: device names must be unique")
    per_transport: dict[str, set[int]] = {}
    for i, device in enumerate(config.devices):
        units = per_transport.setdefault(device.transport, set())
        if device.unit in units:
            raise ConfigError(
                f"{source}.devices[{i}]: unit {device.unit} duplicated "
                f"on transport {device.transport}")
        units.add(device.unit)
    config.poll = _parse_poll(mapping.get("poll"), f"{source}.poll")
    if "store" in mapping:
        config.store_path = _str(mapping["store"], f"{source}.store")
    config.api = _parse_api(mapping.get("api"), f"{source}.api")
    config.users = [
        _parse_user(node, f"{source}.users[{i}]")
        for i, node in enumerate(_seq(mapping.get("users"), f"{source}.users"))
    ]
    usernames = [u.username for u in config.users]
    if len(set(usernames)) != len(usernames):
        raise ConfigError(f"{source}.users: usernames must be unique")
    config.sims = [
        _parse_sim(node, f"{source}.sims[{i}]")
        for i, node in enumerate(_seq(mapping.get("sims"), f"{source}.sims"))
    ]
    config.serial = _parse_serial(mapping.get("serial"), f"{source}.serial")
    return config


def load_config(path: str) -> Config:
    """Read and validate one YAML config file."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    return parse_config(raw, source=path)
