"""Reactive L2 learning controller with a fixed per-request service cost.

Each table miss costs the controller a unit of serial work, so a flood of
misses queues up and response latency grows with load.  That serial-service
model is what makes saturation visible in the load metric.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

from flowledger.ofwire import messages as m
from flowledger.ofwire.session import PeerRole, WireSession
from flowledger.scheduler import Scheduler
from flowledger.simnet.topology import Frame
from flowledger.transport import PipeEnd

log = logging.getLogger(__name__)

FLOW_PRIORITY = 10
FLOW_IDLE_S = 30


@dataclass
class ControllerStats:
    packet_ins: int = 0
    flow_mods: int = 0
    packet_outs: int = 0
    floods: int = 0
    busy_us: int = 0


class _Conn:
    def __init__(self, owner: "LearningController", conn: PipeEnd) -> None:
        self.owner = owner
        self.conn = conn
        self.dpid: Optional[int] = None
        self.session = WireSession(
            owner.scheduler,
            PeerRole.SWITCH,
            send_bytes=conn.send,
            deliver=self._deliver,
            on_disconnect=self._down,
            on_established=self._up,
        )
        conn.on_bytes = self.session.feed
        conn.on_closed = lambda: self.session.close("peer connection closed")

    def _up(self) -> None:
        log.info("%s: handshake complete (dpid=%s)", self.owner.controller_id, self.dpid)

    def _down(self, reason: str) -> None:
        self.owner._conns.discard(self)

    def _deliver(self, msg: m.OfMessage, raw: bytes) -> None:
        body = msg.body
        if isinstance(body, m.FeaturesReply):
            self.dpid = body.datapath_id
        elif isinstance(body, m.PacketIn):
            self.owner._on_packet_in(self, body)


class LearningController:
    """Learns mac->port per datapath and installs exact forwarding rules."""

    def __init__(self, scheduler: Scheduler, controller_id: str,
                 service_time_us: int = 1000) -> None:
        self.scheduler = scheduler
        self.controller_id = controller_id
        self.service_time_us = service_time_us
        self.stats = ControllerStats()
        self.mac_tables: dict[int, dict[int, int]] = {}  # dpid -> mac -> port
        self._conns: set[_Conn] = set()
        self._busy_until_us = 0

    def accept(self, conn: PipeEnd) -> None:
        self._conns.add(_Conn(self, conn))

    @property
    def queue_delay_us(self) -> int:
        """How far behind real time the service queue currently runs."""
        return max(0, self._busy_until_us - self.scheduler.now_us)

    def _on_packet_in(self, wire: _Conn, body: m.PacketIn) -> None:
        self.stats.packet_ins += 1
        start = max(self.scheduler.now_us, self._busy_until_us)
        self._busy_until_us = start + self.service_time_us
        self.stats.busy_us += self.service_time_us
        done = self._busy_until_us
        self.scheduler.at(done, lambda: self._serve(wire, body))

    def _serve(self, wire: _Conn, body: m.PacketIn) -> None:
        if wire.session.closed or wire.dpid is None:
            return
        try:
            frame = Frame.decode(body.frame)
        except ValueError:
            return
        table = self.mac_tables.setdefault(wire.dpid, {})
        src = m.mac_int(frame.eth_src)
        dst = m.mac_int(frame.eth_dst)
        table[src] = body.in_port

        out_port = table.get(dst)
        if out_port is not None and out_port != body.in_port:
            match = m.Match(in_port=body.in_port, eth_src=src, eth_dst=dst)
            wire.session.send_message(m.flow_mod(
                wire.session.fsm.take_xid(), match, FLOW_PRIORITY,
                (m.Output(out_port),), idle_timeout_s=FLOW_IDLE_S))
            self.stats.flow_mods += 1
            actions: tuple = (m.Output(out_port),)
        else:
            actions = (m.Flood(),)
            self.stats.floods += 1
        wire.session.send_message(m.packet_out(
            wire.session.fsm.take_xid(), body.buffer_id, body.in_port, actions,
            frame=b"" if body.buffer_id else body.frame))
        self.stats.packet_outs += 1
