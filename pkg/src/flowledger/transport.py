"""In-simulation byte transports.

A pipe is a pair of connected endpoints riding the shared scheduler: bytes
written to one end arrive at the other after the configured delay, in order.
Owners attach on_bytes/on_closed callbacks; chunks delivered before a callback
is attached are buffered and flushed on attachment, so wiring order between
components never races.
"""

from __future__ import annotations

from typing import Callable, Optional

from flowledger.scheduler import Scheduler


class PipeEnd:
    """One side of a bidirectional in-sim byte pipe."""

    def __init__(self, scheduler: Scheduler, delay_us: int = 0, label: str = "") -> None:
        self._scheduler = scheduler
        self._delay_us = delay_us
        self.label = label
        self.peer: Optional["PipeEnd"] = None
        self.closed = False
        self._on_bytes: Optional[Callable[[bytes], None]] = None
        self._on_closed: Optional[Callable[[], None]] = None
        self._inbox: list[bytes] = []
        self._close_pending = False

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
        if self.closed or self.peer is None or not data:
            return
        peer = self.peer
        self._scheduler.after(self._delay_us, lambda: peer._receive(data))

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        peer = self.peer
        if peer is not None:
            self._scheduler.after(self._delay_us, peer._peer_closed)

    def _receive(self, data: bytes) -> None:
        if self.closed:
            return
        if self._on_bytes is None:
            self._inbox.append(data)
        else:
            self._on_bytes(data)

    def _peer_closed(self) -> None:
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


def pipe(scheduler: Scheduler, delay_us: int = 0, label: str = "") -> tuple[PipeEnd, PipeEnd]:
    a = PipeEnd(scheduler, delay_us, label + ".a")
    b = PipeEnd(scheduler, delay_us, label + ".b")
    a.peer = b
    b.peer = a
    return a, b
