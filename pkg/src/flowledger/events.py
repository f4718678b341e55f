"""Sequenced event feed shared by the scenario runner and the HTTP gateway.

Producers append typed events; consumers replay from any sequence number they
have seen, so a reconnecting client can resume without gaps.  The log keeps a
bounded tail: asking for history older than the tail is an explicit error, not
a silent truncation.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

# canonical kinds emitted by the runtime; consumers must tolerate new ones
EVENT_KINDS = (
    "BlockCommitted",
    "IntentTransition",
    "AnomalyRaised",
    "AnomalyCleared",
    "DefenseInstalled",
    "MappingChanged",
    "RegistryChanged",
    "MetricsTick",
)


class SeqTooOld(LookupError):
    """The requested replay position has been trimmed from the buffer."""


@dataclass(frozen=True)
class ApiEvent:
    seq: int
    t_us: int
    kind: str
    payload: dict

    def to_doc(self) -> dict:
        return {"seq": self.seq, "t_us": self.t_us, "kind": self.kind,
                "payload": self.payload}

    def to_json(self) -> str:
        return json.dumps(self.to_doc(), sort_keys=True, separators=(",", ":"))


class EventLog:
    def __init__(self, capacity: int = 10_000) -> None:
        self._events: deque[ApiEvent] = deque(maxlen=capacity)
        self._next_seq = 1
        self._listeners: list[Callable[[ApiEvent], None]] = []

    def append(self, kind: str, payload: dict, t_us: int) -> ApiEvent:
        event = ApiEvent(self._next_seq, t_us, kind, payload)
        self._next_seq += 1
        self._events.append(event)
        for listener in list(self._listeners):
            listener(event)
        return event

    @property
    def head_seq(self) -> int:
        """Sequence number of the newest event, 0 when empty."""
        return self._next_seq - 1

    @property
    def oldest_seq(self) -> int:
        return self._events[0].seq if self._events else self._next_seq

    def __len__(self) -> int:
        return len(self._events)

    def since(self, seq: int, limit: Optional[int] = None) -> list[ApiEvent]:
        """Events with sequence strictly greater than seq, oldest first."""
        if seq < 0:
            raise ValueError("seq must be >= 0")
        if self._events and seq + 1 < self._events[0].seq:
            raise SeqTooOld(
                f"events from {seq + 1} trimmed; oldest retained is "
                f"{self._events[0].seq}")
        out = [e for e in self._events if e.seq > seq]
        return out[:limit] if limit is not None else out

    def subscribe(self, listener: Callable[[ApiEvent], None]) -> Callable[[], None]:
        self._listeners.append(listener)

        def cancel() -> None:
            if listener in self._listeners:
                self._listeners.remove(listener)
        return cancel

    def to_ndjson(self) -> str:
        return "".join(e.to_json() + "\n" for e in self._events)
