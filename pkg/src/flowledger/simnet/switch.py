"""Simulated OpenFlow switch: flow table, miss buffering, port shaping.

The switch is deliberately dumb: match, forward, punt misses to its control
channel, and count everything.  All intelligence lives behind the control
connection.  Counters are exact so runs can assert per-switch conservation:
every received frame is either forwarded, dropped for a stated reason, punted
into the pending buffer, or rate-limited away.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

from flowledger.middleware import TrafficSample
from flowledger.ofwire import messages as m
from flowledger.ofwire.session import PeerRole, WireSession
from flowledger.scheduler import US_PER_S, Scheduler
from flowledger.simnet.topology import Frame
from flowledger.transport import PipeEnd

log = logging.getLogger(__name__)

PENDING_CAP = 1024
OFPR_NO_MATCH = 0


@dataclass
class FlowEntry:
    match: m.Match
    priority: int
    actions: tuple
    idle_timeout_s: int
    hard_timeout_s: int
    installed_at_us: int
    order: int  # install sequence, breaks priority ties deterministically
    last_hit_us: int = 0
    packets: int = 0
    n_bytes: int = 0

    def expired(self, now_us: int) -> bool:
        if self.hard_timeout_s and now_us - self.installed_at_us >= self.hard_timeout_s * US_PER_S:
            return True
        ref = self.last_hit_us or self.installed_at_us
        if self.idle_timeout_s and now_us - ref >= self.idle_timeout_s * US_PER_S:
            return True
        return False


def _prefix_hit(rule: tuple[int, int], addr: int) -> bool:
    value, prefix = rule
    if prefix == 0:
        return True
    mask = ~((1 << (32 - prefix)) - 1) & 0xFFFFFFFF
    return (addr & mask) == (value & mask)


def _frame_ints(frame: Frame) -> tuple[int, int, int, int]:
    return (m.mac_int(frame.eth_src), m.mac_int(frame.eth_dst),
            m.ipv4_int(frame.ipv4_src), m.ipv4_int(frame.ipv4_dst))


def _match_ints(match: m.Match, in_port: int, src_mac: int, dst_mac: int,
                src_ip: int, dst_ip: int) -> bool:
    if match.in_port is not None and match.in_port != in_port:
        return False
    if match.eth_src is not None and match.eth_src != src_mac:
        return False
    if match.eth_dst is not None and match.eth_dst != dst_mac:
        return False
    if match.ipv4_src is not None and not _prefix_hit(match.ipv4_src, src_ip):
        return False
    if match.ipv4_dst is not None and not _prefix_hit(match.ipv4_dst, dst_ip):
        return False
    return True


def _match_frame(match: m.Match, in_port: int, frame: Frame) -> bool:
    src_mac, dst_mac, src_ip, dst_ip = _frame_ints(frame)
    return _match_ints(match, in_port, src_mac, dst_mac, src_ip, dst_ip)


class FlowTable:
    """Flow table with hashed fast paths.

    Learning-shaped rules (in_port + both macs, no ip fields) live in a dict
    keyed by that triple; rules pinned to one source address (/32) hash on it;
    the remainder stays in a short linear bucket.  A frame's candidates are
    one exact bucket, one source bucket and the remainder, so lookups stay
    flat even with thousands of learned or per-source drop entries.  Winner
    selection is unchanged: highest (priority, install order) over all
    matching live entries.
    """

    def __init__(self) -> None:
        self._order = 0
        self._exact: dict[tuple[int, int, int], list[FlowEntry]] = {}
        self._by_src: dict[int, list[FlowEntry]] = {}
        self._wild: list[FlowEntry] = []

    def _bucket(self, match: m.Match) -> list[FlowEntry]:
        if (match.in_port is not None and match.eth_src is not None
                and match.eth_dst is not None and match.ipv4_src is None
                and match.ipv4_dst is None):
            key = (match.in_port, match.eth_src, match.eth_dst)
            return self._exact.setdefault(key, [])
        if match.ipv4_src is not None and match.ipv4_src[1] == 32:
            return self._by_src.setdefault(match.ipv4_src[0], [])
        return self._wild

    def install(self, match: m.Match, priority: int, actions: tuple,
                idle_timeout_s: int, hard_timeout_s: int, now_us: int) -> FlowEntry:
        self._order += 1
        entry = FlowEntry(match, priority, tuple(actions), idle_timeout_s,
                          hard_timeout_s, now_us, self._order)
        bucket = self._bucket(match)
        # same (match, priority) overwrites in place
        for i, existing in enumerate(bucket):
            if existing.match == match and existing.priority == priority:
                bucket[i] = entry
                return entry
        bucket.append(entry)
        return entry

    def lookup(self, in_port: int, frame: Frame, now_us: int) -> Optional[FlowEntry]:
        src_mac, dst_mac, src_ip, dst_ip = _frame_ints(frame)
        best: Optional[FlowEntry] = None
        for bucket in (self._exact.get((in_port, src_mac, dst_mac), ()),
                       self._by_src.get(src_ip, ()),
                       self._wild):
            for entry in bucket:
                if entry.expired(now_us):
                    continue
                if not _match_ints(entry.match, in_port, src_mac, dst_mac,
                                   src_ip, dst_ip):
                    continue
                if best is None or (entry.priority, -entry.order) > (best.priority,
                                                                     -best.order):
                    best = entry
        return best

    def all_entries(self) -> list[FlowEntry]:
        out = list(self._wild)
        for bucket in self._exact.values():
            out.extend(bucket)
        for bucket in self._by_src.values():
            out.extend(bucket)
        return out

    def __len__(self) -> int:
        return (len(self._wild) + sum(map(len, self._exact.values()))
                + sum(map(len, self._by_src.values())))

    def sweep(self, now_us: int) -> int:
        removed = 0
        for table in (self._exact, self._by_src):
            dead = []
            for key, bucket in table.items():
                kept = [e for e in bucket if not e.expired(now_us)]
                removed += len(bucket) - len(kept)
                if kept:
                    table[key] = kept
                else:
                    dead.append(key)
            for key in dead:
                del table[key]
        kept = [e for e in self._wild if not e.expired(now_us)]
        removed += len(self._wild) - len(kept)
        self._wild = kept
        return removed


class _Bucket:
    """Deterministic token bucket; refills by elapsed virtual time."""

    def __init__(self, fps: float, now_us: int) -> None:
        self.fps = fps
        self.cap = max(1.0, fps * 0.1)
        self.tokens = self.cap
        self.t_us = now_us

    def allow(self, now_us: int) -> bool:
        self.tokens = min(self.cap, self.tokens + (now_us - self.t_us) / US_PER_S * self.fps)
        self.t_us = now_us
        if self.tokens >= 1.0:
            self.tokens -= 1.0
            return True
        return False


@dataclass
class SwitchStats:
    rx_frames: int = 0
    tx_copies: int = 0
    matched_forwarded: int = 0
    matched_dropped: int = 0
    punted: int = 0
    punted_unbuffered: int = 0
    released_by_packet_out: int = 0
    pending_overflow: int = 0
    rate_limited: int = 0
    no_ports: int = 0
    flow_mods: int = 0
    packet_outs: int = 0


class SimSwitch:
    def __init__(self, scheduler: Scheduler, dpid: int, ports: list[int],
                 send_frame: Callable[[str, int, bytes], None]) -> None:
        self.scheduler = scheduler
        self.dpid = dpid
        self.switch_id = f"s{dpid}"
        self.ports = sorted(ports)
        self._send_frame = send_frame  # (switch_id, out_port, raw)
        self.table = FlowTable()
        self.pending: deque[tuple[int, int, bytes]] = deque()  # (buffer_id, in_port, raw)
        self._next_buffer = 1
        self.stats = SwitchStats()
        self._limits: dict[int, _Bucket] = {}
        self._limit_fps: dict[int, float] = {}
        self.session: Optional[WireSession] = None
        self.established = False
        # interval counters, reset by take_sample
        self._ivl_port_packets: dict[int, int] = {}
        self._ivl_port_bytes: dict[int, int] = {}
        self._ivl_flows: dict[tuple[int, int, int], int] = {}
        self._ivl_tx_packets: dict[int, int] = {}
        self._ivl_tx_bytes: dict[int, int] = {}
        self._last_sample_us = 0

    # -- control channel --------------------------------------------------------------

    def attach_control(self, conn: PipeEnd) -> None:
        self.session = WireSession(
            self.scheduler,
            PeerRole.CONTROLLER,
            send_bytes=conn.send,
            deliver=self._on_control,
            on_disconnect=lambda reason: log.info("%s control down: %s",
                                                  self.switch_id, reason),
            on_established=self._on_established,
            send_hello=True,
        )
        conn.on_bytes = self.session.feed
        conn.on_closed = lambda: self.session.close("control connection closed")

    def _on_established(self) -> None:
        self.established = True

    def _on_control(self, msg: m.OfMessage, raw: bytes) -> None:
        body = msg.body
        if isinstance(body, m.FeaturesRequest):
            self.session.send_message(m.features_reply(msg.xid, self.dpid))
        elif isinstance(body, m.FlowMod):
            self.stats.flow_mods += 1
            self.table.install(body.match, body.priority, body.actions,
                               body.idle_timeout_s, body.hard_timeout_s,
                               self.scheduler.now_us)
        elif isinstance(body, m.PacketOut):
            self.stats.packet_outs += 1
            self._apply_packet_out(body)

    def _apply_packet_out(self, body: m.PacketOut) -> None:
        raw: Optional[bytes] = None
        if body.buffer_id:
            for i, (buffer_id, _in_port, buffered) in enumerate(self.pending):
                if buffer_id == body.buffer_id:
                    raw = buffered
                    del self.pending[i]
                    self.stats.released_by_packet_out += 1
                    break
            if raw is None:
                return  # already evicted from the buffer; nothing to send
        else:
            raw = body.frame
        self._enact(body.actions, body.in_port, raw, released=bool(body.buffer_id))

    # -- data plane -------------------------------------------------------------------

    def set_port_limit(self, port: int, fps: Optional[float]) -> None:
        if fps is None:
            self._limits.pop(port, None)
            self._limit_fps.pop(port, None)
        else:
            self._limits[port] = _Bucket(fps, self.scheduler.now_us)
            self._limit_fps[port] = fps

    def port_limits(self) -> dict[int, float]:
        return dict(self._limit_fps)

    def ingest(self, in_port: int, raw: bytes) -> None:
        now = self.scheduler.now_us
        limiter = self._limits.get(in_port)
        if limiter is not None and not limiter.allow(now):
            self.stats.rate_limited += 1
            return
        self.stats.rx_frames += 1
        frame = Frame.decode(raw)
        self._ivl_port_packets[in_port] = self._ivl_port_packets.get(in_port, 0) + 1
        self._ivl_port_bytes[in_port] = self._ivl_port_bytes.get(in_port, 0) + len(raw)
        key = (in_port, m.ipv4_int(frame.ipv4_src), m.ipv4_int(frame.ipv4_dst))
        self._ivl_flows[key] = self._ivl_flows.get(key, 0) + 1

        entry = self.table.lookup(in_port, frame, now)
        if entry is not None:
            entry.last_hit_us = now
            entry.packets += 1
            entry.n_bytes += len(raw)
            if any(isinstance(a, m.Drop) for a in entry.actions):
                self.stats.matched_dropped += 1
            else:
                self.stats.matched_forwarded += 1
                self._enact(entry.actions, in_port, raw)
            return
        self._punt(in_port, raw)

    def _punt(self, in_port: int, raw: bytes) -> None:
        if self.session is None or self.session.closed:
            # nowhere to punt: count the frame as punted then immediately lost,
            # keeping both conservation identities intact
            self.stats.punted += 1
            self.stats.pending_overflow += 1
            return
        if len(self.pending) >= PENDING_CAP:
            # buffer exhausted: fall back to an unbuffered punt carrying the
            # whole frame, so a data PacketOut can still forward it
            buffer_id = 0
            self.stats.punted_unbuffered += 1
        else:
            buffer_id = self._next_buffer
            self._next_buffer += 1
            self.pending.append((buffer_id, in_port, raw))
        self.stats.punted += 1
        xid = self.session.fsm.take_xid()
        self.session.send_message(m.packet_in(xid, buffer_id, in_port,
                                              OFPR_NO_MATCH, raw))

    def _enact(self, actions: tuple, in_port: int, raw: bytes,
               released: bool = False) -> None:
        sent = 0
        for action in actions:
            if isinstance(action, m.Output):
                self._tx(action.port, raw)
                sent += 1
            elif isinstance(action, m.Flood):
                for port in self.ports:
                    if port != in_port:
                        self._tx(port, raw)
                        sent += 1
            elif isinstance(action, m.Drop):
                pass
        if sent == 0:
            self.stats.no_ports += 1
        self.stats.tx_copies += sent

    def _tx(self, port: int, raw: bytes) -> None:
        self._ivl_tx_packets[port] = self._ivl_tx_packets.get(port, 0) + 1
        self._ivl_tx_bytes[port] = self._ivl_tx_bytes.get(port, 0) + len(raw)
        self._send_frame(self.switch_id, port, raw)

    # -- monitoring -----------------------------------------------------------------

    def take_sample(self, now_us: int) -> TrafficSample:
        sample = TrafficSample(
            switch_id=self.switch_id,
            t_us=now_us,
            interval_us=now_us - self._last_sample_us,
            port_rx_packets=dict(self._ivl_port_packets),
            port_rx_bytes=dict(self._ivl_port_bytes),
            flows=dict(self._ivl_flows),
            port_tx_packets=dict(self._ivl_tx_packets),
            port_tx_bytes=dict(self._ivl_tx_bytes),
        )
        self._ivl_port_packets.clear()
        self._ivl_port_bytes.clear()
        self._ivl_flows.clear()
        self._ivl_tx_packets.clear()
        self._ivl_tx_bytes.clear()
        self._last_sample_us = now_us
        self.table.sweep(now_us)
        return sample

    def conservation(self) -> dict:
        s = self.stats
        return {
            "rx_frames": s.rx_frames,
            "consumed": s.matched_forwarded + s.matched_dropped + s.punted,
            "punted": s.punted,
            "unbuffered": s.punted_unbuffered,
            "released": s.released_by_packet_out,
            "overflow": s.pending_overflow,
            "pending_now": len(self.pending),
            "balanced": (
                s.rx_frames == s.matched_forwarded + s.matched_dropped + s.punted
                and s.punted == s.released_by_packet_out + s.pending_overflow
                + s.punted_unbuffered + len(self.pending)
            ),
        }
