"""OpenFlow session state machine and keepalive.

One SessionFsm tracks one control connection.  The machine is pure with
respect to I/O: step() mutates the FSM and returns the actions the owner must
perform (send bytes, deliver a message upward, tear the connection down).
Owners drive it with Received events as messages decode and TimerTick events
at a coarse granularity (100 ms by default via WireSession).

Keepalive: an EchoRequest goes out when the session is established and then
once per interval (5 s).  A tick that finds the previous request unanswered
counts a miss; the third miss disconnects.  A peer that has been silent since
establishment is therefore dropped at exactly 3 x interval.  EchoRequests from
the peer are answered in any state except Disconnected.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

from flowledger.ofwire import messages as m

ECHO_INTERVAL_US = 5_000_000
MAX_MISSED_ECHOES = 3
TICK_US = 100_000


class SessionState(enum.Enum):
    AWAIT_HELLO = "await_hello"
    AWAIT_FEATURES = "await_features"
    ESTABLISHED = "established"
    DISCONNECTED = "disconnected"


class PeerRole(enum.Enum):
    """What sits on the far side of the connection."""

    SWITCH = "switch"
    CONTROLLER = "controller"


@dataclass(frozen=True)
class Received:
    msg: m.OfMessage


@dataclass(frozen=True)
class TimerTick:
    now_us: int


Event = Union[Received, TimerTick]


@dataclass(frozen=True)
class Send:
    msg: m.OfMessage


@dataclass(frozen=True)
class Deliver:
    msg: m.OfMessage


@dataclass(frozen=True)
class Disconnect:
    reason: str


Action = Union[Send, Deliver, Disconnect]


@dataclass
class SessionFsm:
    peer_role: PeerRole
    state: SessionState = SessionState.AWAIT_HELLO
    echo_interval_us: int = ECHO_INTERVAL_US
    max_missed_echoes: int = MAX_MISSED_ECHOES
    hello_sent: bool = False
    next_xid: int = 1
    features_xid: Optional[int] = None
    next_echo_due_us: Optional[int] = None
    awaiting_echo: bool = False
    missed_echoes: int = 0

    def take_xid(self) -> int:
        xid = self.next_xid
        self.next_xid += 1
        return xid


def _to_established(fsm: SessionFsm) -> None:
    fsm.state = SessionState.ESTABLISHED


def _handle_received(fsm: SessionFsm, msg: m.OfMessage) -> list[Action]:
    body = msg.body

    # Echo handling works in every live state, including before the handshake.
    if isinstance(body, m.EchoRequest):
        return [Send(m.echo_reply(msg.xid, body.data))]
    if isinstance(body, m.EchoReply):
        if fsm.awaiting_echo:
            fsm.awaiting_echo = False
            fsm.missed_echoes = 0
        return []

    if fsm.state is SessionState.AWAIT_HELLO:
        if isinstance(body, m.Hello):
            actions: list[Action] = []
            if not fsm.hello_sent:
                actions.append(Send(m.hello(fsm.take_xid())))
                fsm.hello_sent = True
            if fsm.peer_role is PeerRole.SWITCH:
                fsm.features_xid = fsm.take_xid()
                actions.append(Send(m.features_request(fsm.features_xid)))
                fsm.state = SessionState.AWAIT_FEATURES
            else:
                _to_established(fsm)
            return actions
        fsm.state = SessionState.DISCONNECTED
        return [
            Send(m.error_msg(msg.xid, m.OFPET_BAD_REQUEST, m.OFPBRC_BAD_TYPE)),
            Disconnect(f"message type {msg.msg_type} before hello"),
        ]

    if fsm.state is SessionState.AWAIT_FEATURES:
        if isinstance(body, m.FeaturesReply):
            _to_established(fsm)
            return [Deliver(msg)]
        if isinstance(body, m.Hello):
            return []
        return [Deliver(msg)]

    if fsm.state is SessionState.ESTABLISHED:
        if isinstance(body, m.Hello):
            return []
        return [Deliver(msg)]

    return []  # DISCONNECTED: drop silently


def _handle_tick(fsm: SessionFsm, now_us: int) -> list[Action]:
    if fsm.state is not SessionState.ESTABLISHED:
        return []
    if fsm.next_echo_due_us is None:
        fsm.next_echo_due_us = now_us
    if now_us < fsm.next_echo_due_us:
        return []
    if fsm.awaiting_echo:
        fsm.missed_echoes += 1
        if fsm.missed_echoes >= fsm.max_missed_echoes:
            fsm.state = SessionState.DISCONNECTED
            return [Disconnect(f"{fsm.missed_echoes} echo requests unanswered")]
    fsm.awaiting_echo = True
    fsm.next_echo_due_us += fsm.echo_interval_us
    return [Send(m.echo_request(fsm.take_xid()))]


def step(fsm: SessionFsm, event: Event) -> list[Action]:
    """Advance the machine; returns actions for the owner to execute in order."""
    if isinstance(event, Received):
        return _handle_received(fsm, event.msg)
    if isinstance(event, TimerTick):
        return _handle_tick(fsm, event.now_us)
    raise TypeError(f"unknown event: {event!r}")


class WireSession:
    """Glue between a byte transport, a SessionFsm and an owner.

    The owner supplies callbacks; feed() pushes raw received bytes through the
    reassembly buffer and the FSM.  Delivered messages are handed up together
    with their exact wire bytes so relays can forward without re-encoding.
    """

    def __init__(
        self,
        scheduler,
        peer_role: PeerRole,
        send_bytes: Callable[[bytes], None],
        deliver: Callable[[m.OfMessage, bytes], None],
        on_disconnect: Callable[[str], None],
        on_established: Optional[Callable[[], None]] = None,
        send_hello: bool = False,
        tick_us: int = TICK_US,
        echo_interval_us: int = ECHO_INTERVAL_US,
        on_rx: Optional[Callable[[m.OfMessage, bytes], None]] = None,
    ) -> None:
        self.fsm = SessionFsm(peer_role, echo_interval_us=echo_interval_us)
        self._scheduler = scheduler
        self._send_bytes = send_bytes
        self._deliver = deliver
        self._on_disconnect = on_disconnect
        self._on_established = on_established
        self._on_rx = on_rx  # monitoring tap: sees every inbound message pre-FSM
        self._buffer = m.FrameBuffer()
        self.closed = False
        if send_hello:
            self.fsm.hello_sent = True
            self._send_bytes(m.encode(m.hello(self.fsm.take_xid())))
        self._timer = scheduler.every(tick_us, self._tick, first_at=scheduler.now_us + tick_us)

    @property
    def state(self) -> SessionState:
        return self.fsm.state

    def feed(self, chunk: bytes) -> None:
        if self.closed:
            return
        try:
            pairs = self._buffer.feed(chunk)
        except m.MalformedMessage as exc:
            self._send_bytes(m.encode(m.error_msg(0, m.OFPET_BAD_REQUEST, m.OFPBRC_BAD_TYPE)))
            self._teardown(f"undecodable bytes: {exc}")
            return
        for msg, raw in pairs:
            if self.closed:
                return
            if self._on_rx is not None:
                self._on_rx(msg, raw)
            before = self.fsm.state
            actions = step(self.fsm, Received(msg))
            self._run(actions, raw)
            if before is not SessionState.ESTABLISHED and self.fsm.state is SessionState.ESTABLISHED:
                # Anchor the keepalive at establishment: the first probe goes out
                # now, so a peer silent from this moment is dropped at +3x interval.
                self._run(step(self.fsm, TimerTick(self._scheduler.now_us)), b"")
                if self._on_established is not None:
                    self._on_established()

    def send_message(self, msg: m.OfMessage) -> None:
        if not self.closed:
            self._send_bytes(m.encode(msg))

    def send_raw(self, raw: bytes) -> None:
        if not self.closed:
            self._send_bytes(raw)

    def close(self, reason: str = "closed by owner") -> None:
        if not self.closed:
            self.fsm.state = SessionState.DISCONNECTED
            self._teardown(reason)

    def _tick(self) -> None:
        if self.closed:
            return
        self._run(step(self.fsm, TimerTick(self._scheduler.now_us)), b"")

    def _run(self, actions: list[Action], raw: bytes) -> None:
        for action in actions:
            if isinstance(action, Send):
                self._send_bytes(m.encode(action.msg))
            elif isinstance(action, Deliver):
                self._deliver(action.msg, raw)
            elif isinstance(action, Disconnect):
                self._teardown(action.reason)

    def _teardown(self, reason: str) -> None:
        if self.closed:
            return
        self.closed = True
        self.fsm.state = SessionState.DISCONNECTED
        self._timer.cancel()
        self._on_disconnect(reason)
