"""Middleware relay tests: transparency, access control, mapping, capture."""

from __future__ import annotations

import pytest

from flowledger.chain.contracts import ElementRole, RegStatus
from flowledger.chain.ledger import TxKind
from flowledger.chain.network import ChainNetwork, ConsensusConfig
from flowledger.middleware import (
    AccessDenied,
    Middleware,
    MiddlewareConfig,
    TrafficSample,
)
from flowledger.ofwire import messages as m
from flowledger.ofwire.session import PeerRole, WireSession
from flowledger.scheduler import Scheduler, s_to_us
from flowledger.transport import PipeEnd, pipe

PIPE_DELAY_US = 200


class ScriptedSwitch:
    """Minimal switch-side endpoint: handshake plus scripted data messages."""

    def __init__(self, scheduler: Scheduler, conn: PipeEnd, dpid: int) -> None:
        self.scheduler = scheduler
        self.conn = conn
        self.dpid = dpid
        self.rx_raw: list[bytes] = []
        self.delivered: list[m.OfMessage] = []
        self.established = False
        self.conn_closed = False
        self.session = WireSession(
            scheduler,
            PeerRole.CONTROLLER,  # our peer acts as the controller
            send_bytes=conn.send,
            deliver=self._deliver,
            on_disconnect=lambda reason: None,
            on_established=self._on_established,
            send_hello=True,
            on_rx=lambda msg, raw: self.rx_raw.append(raw),
        )
        conn.on_bytes = self.session.feed

        def closed() -> None:
            self.conn_closed = True
            self.session.close("peer closed")

        conn.on_closed = closed

    def _on_established(self) -> None:
        self.established = True

    def _deliver(self, msg: m.OfMessage, raw: bytes) -> None:
        self.delivered.append(msg)
        if isinstance(msg.body, m.FeaturesRequest):
            self.session.send_message(m.features_reply(msg.xid, self.dpid))

    def send_packet_in(self, xid: int, in_port: int, frame: bytes) -> None:
        self.session.send_message(m.packet_in(xid, 0, in_port, 0, frame))


class ScriptedController:
    """Controller endpoint accepting one session per dialed connection."""

    def __init__(self, scheduler: Scheduler, name: str = "c") -> None:
        self.scheduler = scheduler
        self.name = name
        self.sessions: list[WireSession] = []
        self.rx_raw: list[list[bytes]] = []
        self.delivered: list[list[m.OfMessage]] = []
        self.closed_conns = 0
        self.on_delivered = None  # optional (session_idx, msg) hook

    def accept(self, conn: PipeEnd) -> None:
        idx = len(self.sessions)
        self.rx_raw.append([])
        self.delivered.append([])

        session = WireSession(
            self.scheduler,
            PeerRole.SWITCH,  # our peer presents a switch identity
            send_bytes=conn.send,
            deliver=lambda msg, raw, i=idx: self._deliver(i, msg),
            on_disconnect=lambda reason: None,
            on_rx=lambda msg, raw, i=idx: self.rx_raw[i].append(raw),
        )
        self.sessions.append(session)
        conn.on_bytes = session.feed

        def closed(i: int = idx) -> None:
            self.closed_conns += 1
            self.sessions[i].close("peer closed")

        conn.on_closed = closed

    def _deliver(self, idx: int, msg: m.OfMessage) -> None:
        self.delivered[idx].append(msg)
        if self.on_delivered is not None:
            self.on_delivered(idx, msg)

    def dialer(self) -> "PipeEnd":
        raise NotImplementedError

    def make_dial(self, delay_us: int = PIPE_DELAY_US):
        def dial() -> PipeEnd:
            a, b = pipe(self.scheduler, delay_us)
            self.accept(b)
            return a

        return dial


def make_stack(open_enrollment: bool = True, capture_policy: str = "none",
               snapshot_interval_us: int = 0, seed: int = 11):
    sched = Scheduler()
    cfg = ConsensusConfig(n=4, mode="pbft", link_delay_us=1_000, batch_wait_us=5_000)
    chain = ChainNetwork(sched, cfg, seed=seed)
    events: list[tuple[str, dict]] = []
    mw = Middleware(
        sched, chain,
        MiddlewareConfig(open_enrollment=open_enrollment, capture_policy=capture_policy,
                         state_snapshot_interval_us=snapshot_interval_us),
        event_sink=lambda kind, payload: events.append((kind, payload)),
    )
    return sched, chain, mw, events


def connect_switch(sched: Scheduler, mw: Middleware, dpid: int) -> ScriptedSwitch:
    a, b = pipe(sched, PIPE_DELAY_US)
    mw.accept_switch(a)
    return ScriptedSwitch(sched, b, dpid)


def settle(sched: Scheduler, seconds: float = 0.5) -> None:
    sched.run_until(sched.now_us + s_to_us(seconds))


# -- transparency ---------------------------------------------------------------------


def run_direct(frames: list[bytes]) -> tuple[list[bytes], list[bytes]]:
    """Switch wired straight to a controller endpoint; returns both rx streams."""
    sched = Scheduler()
    ctrl = ScriptedController(sched)

    def on_delivered(idx: int, msg: m.OfMessage) -> None:
        if isinstance(msg.body, m.PacketIn) and msg.body.in_port == 1:
            ctrl.sessions[idx].send_message(
                m.packet_out(101, msg.body.buffer_id, msg.body.in_port,
                             [m.Flood()], msg.body.frame))
            ctrl.sessions[idx].send_message(
                m.flow_mod(102, m.Match(in_port=1), priority=10,
                           actions=[m.Output(2)]))

    ctrl.on_delivered = on_delivered
    a, b = pipe(sched, PIPE_DELAY_US)
    ctrl.accept(a)
    sw = ScriptedSwitch(sched, b, dpid=7)
    for i, frame in enumerate(frames):
        sched.at(s_to_us(0.5) + i * s_to_us(0.1),
                 lambda f=frame, x=i: sw.send_packet_in(1000 + x, 1 + (x % 2), f))
    sched.run_until(s_to_us(3.0))
    assert sw.established
    return ctrl.rx_raw[0], sw.rx_raw


def run_proxied(frames: list[bytes]) -> tuple[list[bytes], list[bytes], Middleware]:
    """Same script, but with the relay in the middle."""
    sched, chain, mw, _events = make_stack(capture_policy="all")
    ctrl = ScriptedController(sched)

    def on_delivered(idx: int, msg: m.OfMessage) -> None:
        if isinstance(msg.body, m.PacketIn) and msg.body.in_port == 1:
            ctrl.sessions[idx].send_message(
                m.packet_out(101, msg.body.buffer_id, msg.body.in_port,
                             [m.Flood()], msg.body.frame))
            ctrl.sessions[idx].send_message(
                m.flow_mod(102, m.Match(in_port=1), priority=10,
                           actions=[m.Output(2)]))

    ctrl.on_delivered = on_delivered
    mw.attach_controller("c1", ctrl.make_dial())
    sw = connect_switch(sched, mw, dpid=7)
    for i, frame in enumerate(frames):
        sched.at(s_to_us(0.5) + i * s_to_us(0.1),
                 lambda f=frame, x=i: sw.send_packet_in(1000 + x, 1 + (x % 2), f))
    sched.run_until(s_to_us(3.0))
    assert sw.established
    return ctrl.rx_raw[0], sw.rx_raw, mw


def test_transparency_byte_identical_streams():
    frames = [bytes([i]) * 20 for i in range(4)]
    direct_ctrl, direct_sw = run_direct(frames)
    proxied_ctrl, proxied_sw, _mw = run_proxied(frames)
    assert [r.hex() for r in proxied_ctrl] == [r.hex() for r in direct_ctrl]
    assert [r.hex() for r in proxied_sw] == [r.hex() for r in direct_sw]
    # sanity: the streams actually carried the scripted conversation
    kinds = [r[1] for r in direct_ctrl]
    assert kinds.count(m.OFPT_PACKET_IN) == 4
    assert m.OFPT_FEATURES_REPLY in kinds
    sw_kinds = [r[1] for r in direct_sw]
    assert sw_kinds.count(m.OFPT_PACKET_OUT) == 2
    assert sw_kinds.count(m.OFPT_FLOW_MOD) == 2


def test_relay_does_not_reencode_unknown_messages():
    """A message type outside the decoded subset still crosses the relay intact."""
    sched, chain, mw, _events = make_stack()
    ctrl = ScriptedController(sched)
    mw.attach_controller("c1", ctrl.make_dial())
    sw = connect_switch(sched, mw, dpid=3)
    settle(sched, 0.3)
    assert sw.established
    raw = bytes([4, 0x12, 0, 12]) + b"\x00\x00\x00\x2a" + b"\xde\xad\xbe\xef"
    sw.session.send_raw(raw)
    settle(sched, 0.2)
    assert raw in ctrl.rx_raw[0]


# -- access control --------------------------------------------------------------------


def test_open_enrollment_registers_on_chain():
    sched, chain, mw, events = make_stack()
    ctrl = ScriptedController(sched)
    mw.attach_controller("c1", ctrl.make_dial())
    sw = connect_switch(sched, mw, dpid=1)
    settle(sched, 1.0)
    assert sw.established
    registry = chain.state(0).registry
    assert registry.is_registered("c1")
    assert registry.is_registered("s1")
    assert registry.get("s1").role is ElementRole.SWITCH
    assert registry.get("c1").role is ElementRole.CONTROLLER
    assert mw.is_registered("s1") and mw.is_registered("c1")
    kinds = [k for k, _ in events]
    assert kinds.index("registered") < kinds.index("session_up")
    assert "mapping_changed" in kinds


def test_closed_mode_rejects_unregistered():
    sched, chain, mw, events = make_stack(open_enrollment=False)
    ctrl = ScriptedController(sched)
    with pytest.raises(AccessDenied):
        mw.attach_controller("c1", ctrl.make_dial())
    mw.register("c1", ElementRole.CONTROLLER)
    mw.attach_controller("c1", ctrl.make_dial())

    # identity only arrives with the features reply, so the hello exchange
    # completes before the reject lands
    sw = connect_switch(sched, mw, dpid=9)
    settle(sched, 1.0)
    assert sw.conn_closed
    assert sw.session.closed
    errors = [msg for msg in sw.delivered if isinstance(msg.body, m.Error)]
    assert len(errors) == 1
    assert errors[0].body.err_type == m.OFPET_HELLO_FAILED
    assert errors[0].body.code == m.OFPHFC_EPERM
    assert ("rejected", {"element_id": "s9", "reason": "not registered"}) in events
    assert "s9" not in mw.switches and "s9" not in mw.mapping
    assert not chain.state(0).registry.is_registered("s9")


def test_closed_mode_admits_preregistered_switch():
    sched, chain, mw, _events = make_stack(open_enrollment=False)
    mw.register("c1", ElementRole.CONTROLLER)
    mw.register("s5", ElementRole.SWITCH)
    ctrl = ScriptedController(sched)
    mw.attach_controller("c1", ctrl.make_dial())
    sw = connect_switch(sched, mw, dpid=5)
    settle(sched, 1.0)
    assert sw.established
    assert mw.mapping == {"s5": "c1"}
    reg_txs = chain.state(0).kind_counts[TxKind.REGISTER]
    assert reg_txs == 2  # the two explicit registrations, nothing auto-added


def test_evicted_switch_cannot_reconnect_in_closed_mode():
    sched, chain, mw, events = make_stack(open_enrollment=False)
    mw.register("c1", ElementRole.CONTROLLER)
    mw.register("s5", ElementRole.SWITCH)
    ctrl = ScriptedController(sched)
    mw.attach_controller("c1", ctrl.make_dial())
    sw = connect_switch(sched, mw, dpid=5)
    settle(sched, 0.5)
    assert sw.established

    mw.evict("s5", "operator decision")
    settle(sched, 0.5)
    assert sw.conn_closed
    assert "s5" not in mw.mapping
    assert chain.state(0).registry.get("s5").status is RegStatus.EVICTED

    sw2 = connect_switch(sched, mw, dpid=5)
    settle(sched, 0.5)
    assert sw2.conn_closed
    assert "s5" not in mw.switches
    assert ("rejected", {"element_id": "s5", "reason": "not registered"}) in events


# -- mapping ---------------------------------------------------------------------------


def test_least_loaded_mapping_with_lexicographic_tiebreak():
    sched, chain, mw, _events = make_stack()
    c1 = ScriptedController(sched, "c1")
    c2 = ScriptedController(sched, "c2")
    mw.attach_controller("c1", c1.make_dial())
    mw.attach_controller("c2", c2.make_dial())
    for dpid in (1, 2, 3, 4):
        connect_switch(sched, mw, dpid)
        settle(sched, 0.2)
    assert mw.mapping == {"s1": "c1", "s2": "c2", "s3": "c1", "s4": "c2"}
    view = mw.mapping_view()
    assert view["loads"] == {"c1": 2, "c2": 2}
    assert view["unmapped"] == []


def test_switch_without_controller_buffers_then_flushes():
    sched, chain, mw, _events = make_stack()
    sw = connect_switch(sched, mw, dpid=2)
    settle(sched, 0.3)
    assert sw.established  # switch-leg handshake completes without any controller
    assert mw.mapping_view()["unmapped"] == ["s2"]
    for i in range(10):
        sw.send_packet_in(2000 + i, 1, bytes([i]))
    settle(sched, 0.2)
    att = mw.switches["s2"]
    assert len(att.pending) == 10

    ctrl = ScriptedController(sched)
    mw.attach_controller("c1", ctrl.make_dial())
    settle(sched, 0.5)
    got = [msg for msg in ctrl.delivered[0] if isinstance(msg.body, m.PacketIn)]
    assert [msg.body.frame for msg in got] == [bytes([i]) for i in range(10)]
    assert not att.pending


def test_pending_buffer_drops_oldest_beyond_cap():
    sched, chain, mw, _events = make_stack()
    sw = connect_switch(sched, mw, dpid=2)
    settle(sched, 0.3)
    for i in range(300):
        sw.send_packet_in(3000 + i, 1, i.to_bytes(2, "big"))
    settle(sched, 0.3)
    att = mw.switches["s2"]
    assert len(att.pending) == 256
    assert att.pending_drops == 44

    ctrl = ScriptedController(sched)
    mw.attach_controller("c1", ctrl.make_dial())
    settle(sched, 0.5)
    got = [msg.body.frame for msg in ctrl.delivered[0]
           if isinstance(msg.body, m.PacketIn)]
    assert len(got) == 256
    assert got[0] == (44).to_bytes(2, "big")  # oldest survivors only
    assert got[-1] == (299).to_bytes(2, "big")


def test_remap_moves_traffic_to_new_controller():
    sched, chain, mw, events = make_stack()
    c1 = ScriptedController(sched, "c1")
    c2 = ScriptedController(sched, "c2")
    mw.attach_controller("c1", c1.make_dial())
    mw.attach_controller("c2", c2.make_dial())
    sw = connect_switch(sched, mw, dpid=1)
    settle(sched, 0.3)
    assert mw.mapping == {"s1": "c1"}
    sw.send_packet_in(1, 4, b"before")
    settle(sched, 0.2)

    mw.remap("s1", "c2")
    settle(sched, 0.3)
    assert mw.mapping == {"s1": "c2"}
    assert c1.closed_conns == 1
    sw.send_packet_in(2, 4, b"after")
    settle(sched, 0.2)
    c1_frames = [x.body.frame for x in c1.delivered[0] if isinstance(x.body, m.PacketIn)]
    c2_frames = [x.body.frame for x in c2.delivered[0] if isinstance(x.body, m.PacketIn)]
    assert c1_frames == [b"before"]
    assert c2_frames == [b"after"]
    assert ("mapping_changed",
            {"switch_id": "s1", "controller_id": "c2", "reason": "remap"}) in events


def test_remap_completes_within_one_tick():
    """The new upstream is wired synchronously; only pipe latency remains."""
    sched, chain, mw, _events = make_stack()
    c1 = ScriptedController(sched, "c1")
    c2 = ScriptedController(sched, "c2")
    mw.attach_controller("c1", c1.make_dial())
    mw.attach_controller("c2", c2.make_dial())
    connect_switch(sched, mw, dpid=1)
    settle(sched, 0.3)

    t0 = sched.now_us
    mw.remap("s1", "c2")
    assert mw.mapping == {"s1": "c2"}  # visible immediately, same instant
    att = mw.switches["s1"]
    assert att.controller_id == "c2"
    # handshake completes after a few pipe traversals, well under one 100ms tick
    sched.run_until(t0 + s_to_us(0.1))
    assert att.upstream_ready


def test_remap_validates_arguments():
    sched, chain, mw, _events = make_stack()
    ctrl = ScriptedController(sched)
    mw.attach_controller("c1", ctrl.make_dial())
    sw = connect_switch(sched, mw, dpid=1)
    settle(sched, 0.3)
    with pytest.raises(ValueError):
        mw.remap("s99", "c1")
    with pytest.raises(ValueError):
        mw.remap("s1", "c99")


def test_controller_eviction_remaps_orphans():
    sched, chain, mw, events = make_stack()
    c1 = ScriptedController(sched, "c1")
    c2 = ScriptedController(sched, "c2")
    mw.attach_controller("c1", c1.make_dial())
    mw.attach_controller("c2", c2.make_dial())
    for dpid in (1, 2):
        connect_switch(sched, mw, dpid)
        settle(sched, 0.2)
    assert mw.mapping == {"s1": "c1", "s2": "c2"}

    mw.evict("c1", "compromised")
    assert mw.mapping["s1"] == "c2"  # remapped in the same instant
    settle(sched, 0.3)
    assert mw.switches["s1"].upstream_ready
    assert chain.state(0).registry.get("c1").status is RegStatus.EVICTED
    assert ("mapping_changed",
            {"switch_id": "s1", "controller_id": "c2", "reason": "failover"}) in events
    assert mw.check_access_invariant() == []


def test_switch_disconnect_unmaps_and_notifies():
    sched, chain, mw, events = make_stack()
    ctrl = ScriptedController(sched)
    mw.attach_controller("c1", ctrl.make_dial())
    sw = connect_switch(sched, mw, dpid=1)
    settle(sched, 0.3)
    sw.conn.close()
    settle(sched, 0.3)
    assert "s1" not in mw.switches
    assert "s1" not in mw.mapping
    assert any(k == "session_down" and p["element_id"] == "s1" for k, p in events)
    assert ctrl.closed_conns == 1  # upstream leg torn down with the switch


def test_duplicate_datapath_replaces_old_session():
    sched, chain, mw, _events = make_stack()
    ctrl = ScriptedController(sched)
    mw.attach_controller("c1", ctrl.make_dial())
    sw1 = connect_switch(sched, mw, dpid=1)
    settle(sched, 0.3)
    sw2 = connect_switch(sched, mw, dpid=1)
    settle(sched, 0.3)
    assert sw1.conn_closed
    assert sw2.established
    assert mw.mapping == {"s1": "c1"}
    assert mw.switches["s1"].session is sw2.session or mw.switches["s1"] is not None
    assert len(mw.switches) == 1


# -- capture and snapshots --------------------------------------------------------------


def test_capture_policy_none_records_nothing():
    sched, chain, mw, _events = make_stack(capture_policy="none")
    ctrl = ScriptedController(sched)
    mw.attach_controller("c1", ctrl.make_dial())
    sw = connect_switch(sched, mw, dpid=1)
    settle(sched, 0.5)
    sw.send_packet_in(1, 1, b"x")
    settle(sched, 0.5)
    assert mw.stats.captured == 0
    assert mw.stats.submitted == 0
    assert chain.state(0).kind_counts[TxKind.SNAPSHOT] == 0


def test_capture_policy_all_counts_handshake_and_data():
    sched, chain, mw, _events = make_stack(capture_policy="all")
    ctrl = ScriptedController(sched)
    mw.attach_controller("c1", ctrl.make_dial())
    sw = connect_switch(sched, mw, dpid=1)
    settle(sched, 0.5)
    # per-leg handshakes: 4 records on the switch leg (hello in/out, features
    # request out, features reply in) and 4 on the controller leg (hello
    # out/in, features request in, emulated features reply out)
    assert mw.stats.captured == 8
    for i in range(5):
        sw.send_packet_in(100 + i, 1, bytes([i]))
    settle(sched, 0.5)
    assert mw.stats.captured == 13
    assert mw.stats.submitted == 13
    assert mw.stats.committed == 13
    assert chain.state(0).kind_counts[TxKind.SNAPSHOT] == 13
    # snapshot payloads carry attribution and the classification tag
    snap_tags = {}
    for tx, _height in iter_snapshots(chain):
        doc = tx.payload_doc()
        snap_tags.setdefault(doc["tag"], 0)
        snap_tags[doc["tag"]] += 1
        assert doc["switch_id"] == "s1"
    assert snap_tags["traffic"] == 5
    assert snap_tags["port_info"] == 4  # features request/reply on both legs
    assert snap_tags["link_status"] == 4  # the hellos


def iter_snapshots(chain: ChainNetwork):
    for block in chain.state(0).ledger.blocks:
        for tx in block.txs:
            if tx.kind is TxKind.SNAPSHOT:
                yield tx, block.height


def test_capture_policy_control_filters_traffic():
    sched, chain, mw, _events = make_stack(capture_policy="control")
    ctrl = ScriptedController(sched)

    def on_delivered(idx, msg):
        if isinstance(msg.body, m.PacketIn):
            ctrl.sessions[idx].send_message(
                m.flow_mod(9, m.Match(in_port=1), priority=5, actions=[m.Drop()]))

    ctrl.on_delivered = on_delivered
    mw.attach_controller("c1", ctrl.make_dial())
    sw = connect_switch(sched, mw, dpid=1)
    settle(sched, 0.5)
    base = mw.stats.captured
    assert base == 2  # just the two features replies, one per leg
    sw.send_packet_in(1, 1, b"x")
    settle(sched, 0.5)
    assert mw.stats.captured == base + 1  # the flow mod; the packet-in skipped
    tags = [tx.payload_doc()["tag"] for tx, _ in iter_snapshots(chain)]
    assert tags.count("flow_table") == 1
    assert "traffic" not in tags


def test_capture_policy_sampled_takes_every_kth():
    sched, chain, mw, _events = make_stack(capture_policy="none")
    ctrl = ScriptedController(sched)
    mw.attach_controller("c1", ctrl.make_dial())
    sw = connect_switch(sched, mw, dpid=1)
    settle(sched, 0.5)
    skipped_before = mw.stats.policy_skipped
    mw.set_capture_policy("sampled:3")
    for i in range(12):
        sw.send_packet_in(i, 1, bytes([i]))
    settle(sched, 0.5)
    assert mw.stats.captured == 4
    assert mw.stats.policy_skipped - skipped_before == 8
    frames = [bytes.fromhex(tx.payload_doc()["hex"]) for tx, _ in iter_snapshots(chain)]
    got = [m.decode(raw)[0].body.frame for raw in frames]
    assert got == [bytes([2]), bytes([5]), bytes([8]), bytes([11])]


def test_capture_policy_validation():
    sched, chain, mw, events = make_stack()
    with pytest.raises(ValueError):
        mw.set_capture_policy("everything")
    with pytest.raises(ValueError):
        mw.set_capture_policy("sampled:0")
    mw.set_capture_policy("sampled:2")
    assert ("capture_policy_changed", {"policy": "sampled:2"}) in events


def test_snapshot_queue_decouples_forwarding_from_commits():
    """A burst is forwarded at pipe speed; chain commits happen later."""
    sched, chain, mw, _events = make_stack(capture_policy="all")
    ctrl = ScriptedController(sched)
    mw.attach_controller("c1", ctrl.make_dial())
    sw = connect_switch(sched, mw, dpid=1)
    settle(sched, 0.5)
    for i in range(100):
        sw.send_packet_in(i, 2, i.to_bytes(2, "big"))
    # run just long enough for pipe traversal, far less than commit latency
    sched.run_until(sched.now_us + 5 * PIPE_DELAY_US)
    arrived = [x for x in ctrl.delivered[0] if isinstance(x.body, m.PacketIn)]
    assert len(arrived) == 100
    assert mw.stats.submitted == mw.stats.captured
    assert mw.stats.committed < mw.stats.submitted  # commits still in flight
    settle(sched, 2.0)
    assert mw.stats.committed == mw.stats.submitted
    assert chain.state(0).kind_counts[TxKind.SNAPSHOT] == mw.stats.submitted


def test_periodic_state_snapshots_from_samples():
    sched, chain, mw, _events = make_stack(snapshot_interval_us=s_to_us(1))
    seen = []
    mw.sample_sink = seen.append
    for k in range(8):  # one sample each 500ms for 3.5s
        t = s_to_us(0.5) * k
        sched.at(t, lambda t=t: mw.ingest_sample(TrafficSample(
            switch_id="s1", t_us=t, interval_us=s_to_us(0.5),
            port_rx_packets={1: 10 * k}, port_rx_bytes={1: 1000 * k})))
    settle(sched, 6.0)
    assert len(seen) == 8
    rate_snaps = [tx for tx, _ in iter_snapshots(chain)
                  if tx.payload_doc()["tag"] == "transmission_rate"]
    assert len(rate_snaps) == 4  # t=0, 1s, 2s, 3s pass the 1s gate
    doc = rate_snaps[0].payload_doc()
    assert doc["switch_id"] == "s1"
    assert "port_rx_packets" in doc


def test_access_invariant_state():
    sched, chain, mw, _events = make_stack()
    c1 = ScriptedController(sched, "c1")
    mw.attach_controller("c1", c1.make_dial())
    for dpid in (1, 2, 3):
        connect_switch(sched, mw, dpid)
        settle(sched, 0.2)
    assert mw.check_access_invariant() == []
    mw.evict("s2", "test")
    settle(sched, 0.2)
    assert mw.check_access_invariant() == []
    assert sorted(mw.switches) == ["s1", "s3"]
