"""Byte-stream transports standing in for the RS485 bus.

Two flavours: an in-process bus (queues) for tests and demo mode, and
TCP sockets carrying raw RTU bytes for cross-process runs. Endpoints
expose the same tiny surface either way:

    send(data)            -> deliver bytes to the peer(s)
    recv(timeout) -> bytes  ('' on timeout) or raises TransportClosed
    drain()               -> discard anything already received
    close()

The in-memory bus models multi-drop: one master endpoint, any number of
slave endpoints. A master send is broadcast to every slave; any slave
send lands at the master. No inter-frame timing is modelled; framing is
the receiver's job (CRC scan plus a 50 ms idle-gap flush).
"""

from __future__ import annotations

import queue
import random
import socket
import threading


class TransportClosed(Exception):
    """The peer went away; the link is unusable."""


class Endpoint:
    def send(self, data: bytes) -> None:
        raise NotImplementedError

    def recv(self, timeout: float) -> bytes:
        raise NotImplementedError

    def drain(self) -> None:
        """Throw away any bytes already queued for us."""
        while True:
            try:
                if not self.recv(0.0):
                    return
            except TransportClosed:
                return

    def close(self) -> None:
        pass


class _QueueEndpoint(Endpoint):
    """One side of an in-memory link; `targets` are the peers' rx queues."""

    def __init__(self):
        self.rx: queue.Queue[bytes | None] = queue.Queue()
        self.targets: list[queue.Queue[bytes | None]] = []
        self._closed = False

    def send(self, data: bytes) -> None:
        if self._closed:
            raise TransportClosed("endpoint closed")
        for target in self.targets:
            target.put(bytes(data))

    def recv(self, timeout: float) -> bytes:
        if self._closed:
            raise TransportClosed("endpoint closed")
        try:
            if timeout > 0:
                item = self.rx.get(timeout=timeout)
            else:
                item = self.rx.get_nowait()
        except queue.Empty:
            return b""
        if item is None:
            self._closed = True
            raise TransportClosed("peer closed")
        return item

    def close(self) -> None:
        self._closed = True
        for target in self.targets:
            target.put(None)


class InMemoryBus:
    """Multi-drop in-process bus: one master side, N slave drops."""

    def __init__(self):
        self._master = _QueueEndpoint()
        self._slaves: list[_QueueEndpoint] = []

    def master_endpoint(self) -> Endpoint:
        return self._master

    def slave_endpoint(self) -> Endpoint:
        slave = _QueueEndpoint()
        slave.targets.append(self._master.rx)
        self._master.targets.append(slave.rx)
        self._slaves.append(slave)
        return slave

    def close(self) -> None:
        self._master.close()
        for slave in self._slaves:
            slave.close()


def pipe() -> tuple[Endpoint, Endpoint]:
    """A plain two-ended duplex pipe (single-drop bus)."""
    bus = InMemoryBus()
    return bus.master_endpoint(), bus.slave_endpoint()


class TcpEndpoint(Endpoint):
    """Endpoint over a connected TCP socket carrying raw RTU bytes."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._lock = threading.Lock()

    def send(self, data: bytes) -> None:
        try:
            with self._lock:
                self._sock.sendall(data)
        except OSError as exc:
            raise TransportClosed(str(exc)) from exc

    def recv(self, timeout: float) -> bytes:
        self._sock.settimeout(timeout if timeout > 0 else 0.000001)
        try:
            data = self._sock.recv(4096)
        except socket.timeout:
            return b""
        except OSError as exc:
            raise TransportClosed(str(exc)) from exc
        if data == b"":
            raise TransportClosed("peer closed connection")
        return data

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


def connect_tcp(host: str, port: int, timeout: float = 5.0) -> TcpEndpoint:
    sock = socket.create_connection((host, port), timeout=timeout)
    return TcpEndpoint(sock)


class BitFlipProxy(Endpoint):
    """Wraps an endpoint, flipping one random bit in a fraction of
    received messages. Models a noisy link for corruption-safety runs.
    """

    def __init__(self, inner: Endpoint, probability: float, seed: int | None = None):
        if not 0.0 <= probability <= 1.0:
            raise ValueError("probability must be in [0, 1]")
        self._inner = inner
        self._probability = probability
        self._rng = random.Random(seed)
        self.flipped = 0

    def send(self, data: bytes) -> None:
        self._inner.send(data)

    def recv(self, timeout: float) -> bytes:
        data = self._inner.recv(timeout)
        if data and self._rng.random() < self._probability:
            bit = self._rng.randrange(len(data) * 8)
            corrupted = bytearray(data)
            corrupted[bit // 8] ^= 1 << (bit % 8)
            self.flipped += 1
            return bytes(corrupted)
        return data

    def drain(self) -> None:
        self._inner.drain()

    def close(self) -> None:
        self._inner.close()


def parse_endpoint_descriptor(descriptor: str) -> tuple[str, str, int]:
    """Split a transport descriptor like ``tcp:127.0.0.1:15020``.

    Returns (scheme, host, port). Only the ``tcp`` scheme is accepted
    here; in-memory transports exist as live objects, not descriptors.
    """
    parts = descriptor.split(":")
    if len(parts) != 3 or parts[0] != "tcp":
        raise ValueError(
            f"bad transport descriptor {descriptor!r}, expected tcp:HOST:PORT")
    scheme, host, port_text = parts
    try:
        port = int(port_text)
    except ValueError:
        raise ValueError(f"bad port in transport descriptor {descriptor!r}") from None
    if not 0 <= port <= 65535:
        raise ValueError(f"port out of range in {descriptor!r}")
    return scheme, host, port


def open_endpoint(descriptor: str, timeout: float = 5.0) -> Endpoint:
    """Open a live endpoint from a transport descriptor string."""
    _, host, port = parse_endpoint_descriptor(descriptor)
    return connect_tcp(host, port, timeout=timeout)
