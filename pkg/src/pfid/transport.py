"""Reliable ordered message transports: in-memory queues and TCP sockets.

Every message is one length-prefixed frame (u32 little-endian byte count,
then the payload). The protocol layer treats both transports identically;
traces must come out bit-for-bit the same over either.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
from typing import Callable

__all__ = [
    "TransportError",
    "TransportClosed",
    "InMemoryTransport",
    "SocketTransport",
    "TcpServer",
    "CapturingTransport",
    "connect_tcp",
]

MAX_FRAME_BYTES = 1 << 28  # reject absurd frame lengths before allocating
_LEN = struct.Struct("<I")


class TransportError(Exception):
    pass


class TransportClosed(TransportError):
    """Orderly shutdown of the peer or this endpoint."""


class InMemoryTransport:
    """One endpoint of an in-process duplex channel."""

    _CLOSE = object()

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, timeout: float = 30.0):
        self._inbox = inbox
        self._outbox = outbox
        self._timeout = timeout
        self._closed = False

    @classmethod
    def pair(cls, timeout: float = 30.0) -> tuple["InMemoryTransport", "InMemoryTransport"]:
        a, b = queue.Queue(), queue.Queue()
        return cls(a, b, timeout), cls(b, a, timeout)

    def send_bytes(self, data: bytes) -> None:
        if self._closed:
            raise TransportClosed("transport is closed")
        self._outbox.put(bytes(data))

    def recv_bytes(self) -> bytes:
        if self._closed:
            raise TransportClosed("transport is closed")
        try:
            item = self._inbox.get(timeout=self._timeout)
        except queue.Empty:
            raise TransportError(f"receive timed out after {self._timeout}s") from None
        if item is self._CLOSE:
            raise TransportClosed("peer closed the channel")
        return item

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(self._CLOSE)


class SocketTransport:
    """Length-prefixed frames over a connected TCP socket."""

    def __init__(self, sock: socket.socket):
        self._sock = sock

    def send_bytes(self, data: bytes) -> None:
        try:
            self._sock.sendall(_LEN.pack(len(data)) + data)
        except OSError as e:
            raise TransportError(f"socket send failed: {e}") from e

    def _recv_exact(self, count: int) -> bytes:
        chunks = []
        while count:
            try:
                chunk = self._sock.recv(min(count, 1 << 20))
            except OSError as e:
                raise TransportError(f"socket recv failed: {e}") from e
            if not chunk:
                if chunks:
                    raise TransportError("connection dropped mid-frame")
                raise TransportClosed("peer closed the connection")
            chunks.append(chunk)
            count -= len(chunk)
        return b"".join(chunks)

    def recv_bytes(self) -> bytes:
        (length,) = _LEN.unpack(self._recv_exact(4))
        if length > MAX_FRAME_BYTES:
            raise TransportError(f"frame length {length} exceeds limit {MAX_FRAME_BYTES}")
        return self._recv_exact(length) if length else b""

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class CapturingTransport:
    """Tees every frame into a capture list, in wire order. This is the
    eavesdropper's interception point."""

    def __init__(self, inner, capture: list[bytes]):
        self._inner = inner
        self.capture = capture

    def send_bytes(self, data: bytes) -> None:
        self.capture.append(bytes(data))
        self._inner.send_bytes(data)

    def recv_bytes(self) -> bytes:
        data = self._inner.recv_bytes()
        self.capture.append(bytes(data))
        return data

    def close(self) -> None:
        self._inner.close()


def connect_tcp(host: str, port: int, timeout: float = 30.0) -> SocketTransport:
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as e:
        raise TransportError(f"cannot connect to {host}:{port}: {e}") from e
    return SocketTransport(sock)


class TcpServer:
    """Accept loop running one handler thread per connection."""

    def __init__(self, handler: Callable[[SocketTransport], None], host: str = "127.0.0.1",
                 port: int = 0):
        self._handler = handler
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen()
        self.host, self.port = self._listener.getsockname()
        self._thread: threading.Thread | None = None
        self._stopping = False

    def _loop(self) -> None:
        while True:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return  # listener closed
            t = threading.Thread(
                target=self._handler, args=(SocketTransport(conn),), daemon=True
            )
            t.start()

    def start(self) -> "TcpServer":
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._loop()

    def stop(self) -> None:
        if not self._stopping:
            self._stopping = True
            self._listener.close()
        if self._thread:
            self._thread.join(timeout=5)
