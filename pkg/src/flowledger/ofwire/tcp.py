"""Real-socket transport carrying the same framed byte stream as in-sim pipes.

A SocketConn has the PipeEnd surface (send / on_bytes / on_closed / close), so
anything built against pipes also runs against TCP peers.  Socket reader
threads never touch simulation state: inbound chunks hop onto the scheduler
thread through call_soon_threadsafe, which pairs with the scheduler's paced
(wall-clock slaved) run mode.
"""

from __future__ import annotations

import logging
import socket
import threading
from typing import Callable, Optional

from flowledger.scheduler import Scheduler

log = logging.getLogger(__name__)

RECV_CHUNK = 65536


class SocketConn:
    """One TCP connection, delivered on the scheduler thread."""

    def __init__(self, scheduler: Scheduler, sock: socket.socket,
                 label: str = "") -> None:
        self._scheduler = scheduler
        self._sock = sock
        self.label = label
        self.closed = False
        self._on_bytes: Optional[Callable[[bytes], None]] = None
        self._on_closed: Optional[Callable[[], None]] = None
        self._inbox: list[bytes] = []
        self._close_pending = False
        self._reader = threading.Thread(target=self._read_loop, daemon=True,
                                        name=f"tcpwire-{label or id(self)}")
        self._reader.start()

    @property
    def on_bytes(self) -> Optional[Callable[[bytes], None]]:
        return self._on_bytes

    @on_bytes.setter
    def on_bytes(self, cb: Callable[[bytes], None]) -> None:
        self._on_bytes = cb
        if cb is not None and self._inbox:
            queued, self._inbox = self._inbox, []
            for chunk in queued:
                cb(chunk)
        if self._close_pending:
            self._fire_close()

    @property
    def on_closed(self) -> Optional[Callable[[], None]]:
        return self._on_closed

    @on_closed.setter
    def on_closed(self, cb: Callable[[], None]) -> None:
        self._on_closed = cb
        if self._close_pending and not self._inbox:
            self._fire_close()

    def send(self, data: bytes) -> None:
        if self.closed or not data:
            return
        try:
            self._sock.sendall(data)
        except OSError as exc:
            log.info("%s: send failed: %s", self.label, exc)
            self._mark_closed()

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()

    # -- reader thread side ------------------------------------------------------------

    def _read_loop(self) -> None:
        while True:
            try:
                chunk = self._sock.recv(RECV_CHUNK)
            except OSError:
                break
            if not chunk:
                break
            self._scheduler.call_soon_threadsafe(
                lambda data=chunk: self._receive(data))
        self._scheduler.call_soon_threadsafe(self._mark_closed)

    # -- scheduler thread side ----------------------------------------------------------

    def _receive(self, data: bytes) -> None:
        if self.closed:
            return
        if self._on_bytes is None:
            self._inbox.append(data)
        else:
            self._on_bytes(data)

    def _mark_closed(self) -> None:
        if self.closed:
            return
        self.closed = True
        if self._on_bytes is None and self._inbox:
            self._close_pending = True
            return
        self._fire_close()

    def _fire_close(self) -> None:
        self._close_pending = False
        if self._on_closed is not None:
            self._on_closed()


class TcpServer:
    """Accepts connections and hands each to on_connection, scheduler-side."""

    def __init__(self, scheduler: Scheduler,
                 on_connection: Callable[[SocketConn], None],
                 host: str = "127.0.0.1", port: int = 0) -> None:
        self._scheduler = scheduler
        self._on_connection = on_connection
        self._sock = socket.create_server((host, port))
        self.address: tuple[str, int] = self._sock.getsockname()[:2]
        self.closed = False
        self._acceptor = threading.Thread(target=self._accept_loop, daemon=True,
                                          name=f"tcpwire-accept-{self.address[1]}")
        self._acceptor.start()

    def _accept_loop(self) -> None:
        n = 0
        while True:
            try:
                client, addr = self._sock.accept()
            except OSError:
                return
            n += 1
            client.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = SocketConn(self._scheduler, client,
                              label=f"{addr[0]}:{addr[1]}#{n}")
            self._scheduler.call_soon_threadsafe(
                lambda c=conn: self._on_connection(c))

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        self._sock.close()


def connect_tcp(scheduler: Scheduler, host: str, port: int,
                timeout: float = 5.0, label: str = "") -> SocketConn:
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return SocketConn(scheduler, sock, label=label or f"{host}:{port}")
