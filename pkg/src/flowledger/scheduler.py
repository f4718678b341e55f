"""Deterministic discrete-event scheduler.

All simulated components share one Scheduler instance.  Time is virtual and
counted in integer microseconds so that runs are exactly reproducible: two
events scheduled for the same instant fire in scheduling order (a monotonically
increasing sequence number breaks ties), and no float arithmetic ever enters a
comparison.

The scheduler can also be driven in paced mode, where virtual time is slaved to
the wall clock.  That mode keeps the same single-threaded execution model; an
external thread may only talk to the simulation through ``call_soon_threadsafe``,
which enqueues work on a thread-safe queue that the event loop drains.
"""

from __future__ import annotations

import heapq
import itertools
import queue
import time
from typing import Callable, Optional

US_PER_S = 1_000_000


def s_to_us(seconds: float) -> int:
    """Convert seconds to integer microseconds (round to nearest)."""
    return int(round(seconds * US_PER_S))


class EventHandle:
    """Cancellation token for a scheduled event."""

    __slots__ = ("cancelled",)

    def __init__(self) -> None:
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class Scheduler:
    """Virtual-time event loop with deterministic ordering."""

    def __init__(self) -> None:
        self._now_us = 0
        self._seq = itertools.count()
        self._heap: list[tuple[int, int, EventHandle, Callable[[], None]]] = []
        self._inbox: "queue.Queue[Callable[[], None]]" = queue.Queue()
        self._stopped = False

    @property
    def now_us(self) -> int:
        return self._now_us

    @property
    def now_s(self) -> float:
        return self._now_us / US_PER_S

    def at(self, when_us: int, fn: Callable[[], None]) -> EventHandle:
        """Schedule fn at an absolute virtual time (>= now)."""
        if when_us < self._now_us:
            raise ValueError(f"cannot schedule in the past: {when_us} < {self._now_us}")
        handle = EventHandle()
        heapq.heappush(self._heap, (when_us, next(self._seq), handle, fn))
        return handle

    def after(self, delay_us: int, fn: Callable[[], None]) -> EventHandle:
        """Schedule fn delay_us from now."""
        if delay_us < 0:
            raise ValueError(f"negative delay: {delay_us}")
        return self.at(self._now_us + delay_us, fn)

    def every(self, interval_us: int, fn: Callable[[], None], first_at: Optional[int] = None) -> EventHandle:
        """Schedule fn periodically.  Cancelling the returned handle stops the series."""
        if interval_us <= 0:
            raise ValueError("interval must be positive")
        series = EventHandle()

        def tick() -> None:
            if series.cancelled:
                return
            fn()
            if not series.cancelled:
                heapq.heappush(self._heap, (self._now_us + interval_us, next(self._seq), series, tick))

        start = self._now_us if first_at is None else first_at
        heapq.heappush(self._heap, (start, next(self._seq), series, tick))
        return series

    def stop(self) -> None:
        """Ask a running loop (run / run_paced) to return after the current event."""
        self._stopped = True

    def _pop_due(self, limit_us: int) -> Optional[Callable[[], None]]:
        while self._heap and self._heap[0][0] <= limit_us:
            when_us, _, handle, fn = heapq.heappop(self._heap)
            if handle.cancelled:
                continue
            self._now_us = when_us
            return fn
        return None

    def run_until(self, until_us: int) -> None:
        """Run every event with timestamp <= until_us, then set now to until_us."""
        self._stopped = False
        while not self._stopped:
            fn = self._pop_due(until_us)
            if fn is None:
                break
            fn()
        if self._now_us < until_us:
            self._now_us = until_us

    def run(self, max_events: Optional[int] = None) -> int:
        """Drain the queue (or at most max_events).  Returns events executed."""
        self._stopped = False
        executed = 0
        while not self._stopped:
            if max_events is not None and executed >= max_events:
                break
            fn = self._pop_due(2**63)
            if fn is None:
                break
            fn()
            executed += 1
        return executed

    # -- paced (wall-clock slaved) mode -------------------------------------

    def call_soon_threadsafe(self, fn: Callable[[], None]) -> None:
        """Enqueue fn from another thread; it runs at the loop's current virtual time."""
        self._inbox.put(fn)

    def _drain_inbox(self) -> None:
        while True:
            try:
                fn = self._inbox.get_nowait()
            except queue.Empty:
                return
            fn()

    def run_paced(self, rate: float = 1.0, idle_poll_s: float = 0.01) -> None:
        """Run slaving virtual time to the wall clock (rate x real time).

        Returns when stop() is called.  Thread-safe submissions are drained
        between events, so external callers never touch simulation state
        directly.
        """
        if rate <= 0:
            raise ValueError("rate must be positive")
        self._stopped = False
        wall_start = time.monotonic()
        virt_start = self._now_us
        while not self._stopped:
            self._drain_inbox()
            target_us = virt_start + int((time.monotonic() - wall_start) * rate * US_PER_S)
            fn = self._pop_due(target_us)
            if fn is not None:
                fn()
                continue
            if self._now_us < target_us:
                self._now_us = target_us
            if self._heap:
                next_due = self._heap[0][0]
                wait_s = min(idle_poll_s, max(0.0, (next_due - target_us) / (rate * US_PER_S)))
            else:
                wait_s = idle_poll_s
            if wait_s > 0:
                time.sleep(wait_s)
