"""Command-line entry point.

Subcommands:

    sim           run simulator(s) on TCP listeners
    gateway       poll devices and append to the store
    serve         HTTP API over an existing store
    demo          sim + gateway + api in one process
    query         print latest reading or a time range
    export        dump every row as JSON lines
    hash-password emit a config snippet for a pre-hashed user

Exit codes: 0 success (including a clean Ctrl-C stop), 1 usage or
configuration error, 2 runtime failure (bind error, store fault,
gateway death). Flags override config-file values.
"""

from __future__ import annotations

import argparse
import getpass
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone

from .api import ApiServer, ApiSettings, AuthRecord, hash_password
from .config import Config, ConfigError, SimSettings, load_config
from .demo import DemoOptions, ScheduledFault, run_demo
from .gateway import DeviceConfig, GatewayFatal, PollPolicy, run_loop
from .model import GapEvent, Sample, UNIT_LABELS, KIND_ORDER
from .simulator import AnalyserSim, SimTcpServer
from .store import Store, StoreError, StoredRow

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors by default; this tool reserves
    # 2 for runtime failures
    def error(self, message: str) -> "None":
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="lvmon",
        description="Low-voltage switchboard power monitoring toolkit.")
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="log verbosity (default INFO)")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("sim", help="run analyser simulator(s)")
    p.add_argument("--config", help="YAML config file (sims section)")
    p.add_argument("--listen", default="127.0.0.1:15020",
                   help="HOST:PORT to serve RTU bytes on")
    p.add_argument("--unit", type=int, default=1, help="device address 1..247")
    p.add_argument("--seed", type=int, default=None,
                   help="deterministic reading sequence")
    p.add_argument("--admin-port", type=int, default=None,
                   help="TCP port accepting fault-injection lines")
    p.add_argument("--tick-ms", type=int, default=1000,
                   help="state update period")
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("gateway", help="poll devices into the store")
    p.add_argument("--config", help="YAML config file (devices section)")
    p.add_argument("--store", help="store file path (overrides config)")
    p.add_argument("--connect", help="tcp:HOST:PORT of a single device "
                                     "(replaces configured devices)")
    p.add_argument("--device-name", default="pm01",
                   help="name for the --connect device")
    p.add_argument("--unit", type=int, default=1,
                   help="unit address for the --connect device")
    p.add_argument("--interval-ms", type=int, help="poll interval override")
    p.add_argument("--timeout-ms", type=int, help="request timeout override")
    p.add_argument("--retries", type=int, help="attempts per request override")
    p.set_defaults(func=cmd_gateway)

    p = sub.add_parser("serve", help="HTTP API over an existing store")
    p.add_argument("--config", help="YAML config file (users, devices, api)")
    p.add_argument("--store", help="store file path (overrides config)")
    p.add_argument("--host", help="bind host override")
    p.add_argument("--port", type=int, help="bind port override")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("demo", help="simulator + gateway + API in one process")
    p.add_argument("--store", default="lvmon-demo.store", help="store file path")
    p.add_argument("--fresh", action="store_true",
                   help="delete an existing store file first")
    p.add_argument("--duration", type=float, default=None,
                   help="seconds to run (default: until Ctrl-C)")
    p.add_argument("--seed", type=int, default=42,
                   help="simulator seed (default 42)")
    p.add_argument("--host", default="127.0.0.1", help="API bind host")
    p.add_argument("--port", type=int, default=8420, help="API bind port")
    p.add_argument("--interval-ms", type=int, default=1000, help="poll interval")
    p.add_argument("--fault", action="append", default=[], metavar="KIND@SECONDS",
                   help="schedule a fault, e.g. fuse_blown@30 or voltage_sag@20 "
                        "(repeatable; kinds: fuse_blown, voltage_sag, pump_off, restore)")
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("query", help="read rows back from a store")
    qsub = p.add_subparsers(dest="query_command", required=True,
                            parser_class=_Parser)
    ql = qsub.add_parser("latest", help="newest sample for a device")
    ql.add_argument("--store", required=True)
    ql.add_argument("--device", required=True)
    ql.add_argument("--format", choices=["table", "jsonl"], default="table")
    ql.set_defaults(func=cmd_query_latest)
    qr = qsub.add_parser("range", help="rows in a timestamp range")
    qr.add_argument("--store", required=True)
    qr.add_argument("--device", required=True)
    qr.add_argument("--from", dest="from_ts", type=int, default=0,
                    help="inclusive lower bound, epoch ms")
    qr.add_argument("--to", dest="to_ts", type=int, default=2 ** 62,
                    help="inclusive upper bound, epoch ms")
    qr.add_argument("--limit", type=int, default=1000)
    qr.add_argument("--format", choices=["table", "jsonl"], default="table")
    qr.set_defaults(func=cmd_query_range)

    p = sub.add_parser("export", help="dump rows as JSON lines")
    p.add_argument("--store", required=True)
    p.add_argument("--device", default=None, help="restrict to one device")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("hash-password",
                       help="hash a password for the config users section")
    p.set_defaults(func=cmd_hash_password)
    return parser


def _load_config(args: argparse.Namespace) -> Config:
    path = getattr(args, "config", None)
    return load_config(path) if path else Config()


# -- subcommands ------------------------------------------------------------------


def cmd_sim(args: argparse.Namespace) -> int:
    config = _load_config(args)
    settings = config.sims or [SimSettings(
        unit=args.unit, seed=args.seed, listen=args.listen,
        admin_port=args.admin_port, tick_ms=args.tick_ms)]
    groups: dict[str, list[SimSettings]] = {}
    for item in settings:
        groups.setdefault(item.listen, []).append(item)
    servers: list[SimTcpServer] = []
    try:
        for listen, members in groups.items():
            host, _, port_text = listen.rpartition(":")
            if not host or not port_text.isdigit():
                raise ConfigError(f"bad listen address {listen!r}, expected HOST:PORT")
            sims = [AnalyserSim(unit=m.unit, seed=m.seed) for m in members]
            admin_ports = {m.admin_port for m in members if m.admin_port is not None}
            if len(admin_ports) > 1:
                raise ConfigError(f"conflicting admin ports on listener {listen}")
            server = SimTcpServer(
                sims, host=host, port=int(port_text),
                admin_port=admin_ports.pop() if admin_ports else None,
                tick_period=members[0].tick_ms / 1000.0)
            servers.append(server)
            server.start()
            print(f"sim: unit(s) {sorted(s.unit for s in sims)} "
                  f"listening on {server.address[0]}:{server.address[1]}"
                  + (f", admin on port {server.admin_address[1]}"
                     if server.admin_address else ""))
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        return EXIT_OK
    finally:
        for server in servers:
            server.stop()


def _gateway_pieces(args: argparse.Namespace) -> tuple[list[DeviceConfig], PollPolicy, str]:
    config = _load_config(args)
    devices = config.devices
    if args.connect:
        devices = [DeviceConfig(name=args.device_name, unit=args.unit,
                                transport=args.connect)]
    if not devices:
        raise ConfigError("no devices: give --connect or a config with a devices list")
    policy = config.poll
    overrides = {}
    if args.interval_ms is not None:
        overrides["interval_ms"] = args.interval_ms
    if args.timeout_ms is not None:
        overrides["timeout_ms"] = args.timeout_ms
    if args.retries is not None:
        overrides["retries"] = args.retries
    if overrides:
        policy = PollPolicy(
            interval_ms=overrides.get("interval_ms", policy.interval_ms),
            timeout_ms=overrides.get("timeout_ms", policy.timeout_ms),
            retries=overrides.get("retries", policy.retries))
    store_path = args.store or config.store_path
    if config.serial.baud != 9600 or config.serial.parity != "none":
        log.info("serial settings (baud %d, parity %s) are advisory on tcp transports",
                 config.serial.baud, config.serial.parity)
    return devices, policy, store_path


def cmd_gateway(args: argparse.Namespace) -> int:
    devices, policy, store_path = _gateway_pieces(args)
    with Store.open_writer(store_path) as writer:
        print(f"gateway: polling {len(devices)} device(s) every "
              f"{policy.interval_ms} ms into {store_path}")
        run_loop(devices, policy, writer)
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    config = _load_config(args)
    store_path = args.store or config.store_path
    settings = config.api
    if args.host:
        settings.host = args.host
    if args.port is not None:
        settings.port = args.port
    users = config.users
    if not users:
        log.warning("no users configured; using default credentials admin/admin")
        users = [AuthRecord.from_password("admin", "admin")]
    if not os.path.exists(store_path):
        raise ConfigError(f"store file {store_path} does not exist "
                          "(run the gateway or demo first)")
    reader = Store.open_reader(store_path)
    devices = config.devices or _devices_from_store(reader)
    server = ApiServer(reader, devices, users, settings).start()
    print(f"api: serving http://{server.address[0]}:{server.address[1]} "
          f"over {store_path}")
    try:
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        return EXIT_OK
    finally:
        server.stop()
        reader.close()


def _devices_from_store(reader: Store) -> list[DeviceConfig]:
    # no config: expose whatever the store has seen; unit is unknown,
    # use 0 as the out-of-band marker
    class _Bare:
        def __init__(self, name: str):
            self.name = name
            self.unit = 0
    return [_Bare(name) for name in reader.devices()]  # type: ignore[return-value]


def cmd_demo(args: argparse.Namespace) -> int:
    try:
        faults = [ScheduledFault.parse(text) for text in args.fault]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.fresh and os.path.exists(args.store):
        os.unlink(args.store)
    options = DemoOptions(
        store_path=args.store,
        seed=args.seed,
        poll=PollPolicy(interval_ms=args.interval_ms),
        api=ApiSettings(host=args.host, port=args.port),
        faults=faults,
    )
    print(f"demo: store={args.store} device=pm01 seed={args.seed}")
    stats = run_demo(options, args.duration)
    print(f"demo: done, {stats.samples} samples and {stats.gaps} gaps in {stats.store_path}")
    return EXIT_OK


def _iso(ts_ms: int) -> str:
    return datetime.fromtimestamp(ts_ms / 1000, tz=timezone.utc) \
        .strftime("%Y-%m-%d %H:%M:%S.%f")[:-3] + "Z"


def _row_json(row: StoredRow) -> dict:
    record = row.record
    if isinstance(record, Sample):
        return {"device": record.device, "id": row.id, "ts": record.ts,
                "kind": "sample", "voltage": record.voltage,
                "current": record.current, "frequency": record.frequency,
                "power_factor": record.power_factor,
                "active_power": record.active_power, "energy": record.energy}
    assert isinstance(record, GapEvent)
    out = {"device": record.device, "id": row.id, "ts": record.ts,
           "kind": "gap", "reason": record.reason.value}
    if record.exception_code:
        out["exception_code"] = record.exception_code
    return out


_TABLE_HEADER = ("id", "timestamp (UTC)", "kind",
                 *(f"{k.value} [{UNIT_LABELS[k]}]" if UNIT_LABELS[k] else k.value
                   for k in KIND_ORDER))


def _print_table(rows: list[StoredRow]) -> None:
    table = [_TABLE_HEADER]
    for row in rows:
        record = row.record
        if isinstance(record, Sample):
            table.append((str(row.id), _iso(row.ts), "sample",
                          f"{record.voltage:.2f}", f"{record.current:.2f}",
                          f"{record.frequency:.3f}", f"{record.power_factor:.3f}",
                          f"{record.active_power:.1f}", f"{record.energy:.6f}"))
        else:
            assert isinstance(record, GapEvent)
            note = record.reason.value
            if record.exception_code:
                note += f"(code {record.exception_code:02x})"
            table.append((str(row.id), _iso(row.ts), f"gap:{note}",
                          "-", "-", "-", "-", "-", "-"))
    widths = [max(len(line[col]) for line in table) for col in range(len(table[0]))]
    for line in table:
        print("  ".join(cell.ljust(width) for cell, width in zip(line, widths)))


def _open_reader(path: str) -> Store:
    if not os.path.exists(path):
        raise ConfigError(f"store file {path} does not exist")
    return Store.open_reader(path)


def cmd_query_latest(args: argparse.Namespace) -> int:
    with _open_reader(args.store) as reader:
        row = reader.query_latest(args.device)
        if row is None:
            print("no data")
            return EXIT_OK
        if args.format == "jsonl":
            print(json.dumps(_row_json(row)))
        else:
            _print_table([row])
    return EXIT_OK


def cmd_query_range(args: argparse.Namespace) -> int:
    with _open_reader(args.store) as reader:
        try:
            rows, truncated = reader.query_range(
                args.device, args.from_ts, args.to_ts, args.limit)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not rows:
            print("no data")
            return EXIT_OK
        if args.format == "jsonl":
            for row in rows:
                print(json.dumps(_row_json(row)))
        else:
            _print_table(rows)
        if truncated:
            print(f"(truncated to {args.limit} rows)", file=sys.stderr)
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    with _open_reader(args.store) as reader:
        for row in reader.all_rows(args.device):
            print(json.dumps(_row_json(row)))
    return EXIT_OK


def cmd_hash_password(args: argparse.Namespace) -> int:
    if sys.stdin.isatty():
        password = getpass.getpass("password: ")
        again = getpass.getpass("again: ")
        if password != again:
            print("passwords do not match", file=sys.stderr)
            return EXIT_USAGE
    else:
        password = sys.stdin.readline().rstrip("\n")
    if not password:
        print("empty password", file=sys.stderr)
        return EXIT_USAGE
    salt, digest = hash_password(password)
    print(f"password_hash: {digest.hex()}")
    print(f"salt: {salt.hex()}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"lvmon: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"lvmon: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StoreError, GatewayFatal) as exc:
        print(f"lvmon: fatal: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"lvmon: fatal: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
