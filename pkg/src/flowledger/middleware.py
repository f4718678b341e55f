"""Transparent control-channel relay between switches and controllers.

The middleware terminates each switch's control connection (acting as the
controller side of the handshake), opens one upstream connection per mapped
switch toward that switch's controller (presenting the switch's stored
feature set), and forwards everything else byte for byte with xids untouched.
Handshakes and keepalives are per-leg: the middleware answers echo probes
locally and runs its own, exactly like any protocol-aware proxy.

Around the relay sit the security functions: every element must hold a
registered, non-evicted record before its sessions carry traffic (closed mode
rejects strangers; open enrollment registers them on first contact); relayed
messages are captured into snapshot records according to the active policy and
committed to the chain through an async queue that never blocks forwarding;
the switch-to-controller mapping is owned here (least-loaded assignment,
explicit remap, eviction with same-tick remapping of orphaned switches).
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from flowledger.chain.contracts import ElementRole, RegistryState, evict_payload, register_payload
from flowledger.chain.ledger import Transaction, TxKind
from flowledger.chain.network import ChainNetwork
from flowledger.ofwire import messages as m
from flowledger.ofwire.capture import DIR_TO_CONTROLLER, DIR_TO_SWITCH
from flowledger.ofwire.session import PeerRole, WireSession
from flowledger.scheduler import Scheduler
from flowledger.transport import PipeEnd

MIDDLEWARE_ID = "middleware"

CAPTURE_POLICIES = ("all", "control", "none")  # plus "sampled:<k>"

# message type -> snapshot tag, following the block-body vocabulary
_TAGS = {
    m.OFPT_FEATURES_REPLY: "port_info",
    m.OFPT_FEATURES_REQUEST: "port_info",
    m.OFPT_HELLO: "link_status",
    m.OFPT_ERROR: "link_status",
    m.OFPT_PACKET_IN: "traffic",
    m.OFPT_PACKET_OUT: "traffic",
    m.OFPT_FLOW_MOD: "flow_table",
}

# Keepalive probes are per-leg liveness noise, not control-plane state; their
# count depends on wall time, so excluding them keeps snapshot counts exact.
_NEVER_CAPTURED = {m.OFPT_ECHO_REQUEST, m.OFPT_ECHO_REPLY}

_CONTROL_TYPES = {m.OFPT_FLOW_MOD, m.OFPT_FEATURES_REPLY, m.OFPT_ERROR}


class AccessDenied(Exception):
    pass


@dataclass
class MiddlewareConfig:
    open_enrollment: bool = True
    capture_policy: str = "all"
    pending_cap: int = 256
    state_snapshot_interval_us: int = 0  # 0 disables periodic link-state snapshots


@dataclass
class SnapshotQueueStats:
    captured: int = 0
    submitted: int = 0
    committed: int = 0
    policy_skipped: int = 0


@dataclass
class TrafficSample:
    """Per-switch counters for one sampling interval, pushed by the switch."""

    switch_id: str
    t_us: int
    interval_us: int
    port_rx_packets: dict[int, int] = field(default_factory=dict)
    port_rx_bytes: dict[int, int] = field(default_factory=dict)
    flows: dict[tuple[int, int, int], int] = field(default_factory=dict)
    # flows key: (in_port, ipv4_src, ipv4_dst) -> packets in interval
    # tx counters are what the switch put on each link after table drops,
    # so per-link delivery (e.g. toward a protected host) is observable
    port_tx_packets: dict[int, int] = field(default_factory=dict)
    port_tx_bytes: dict[int, int] = field(default_factory=dict)


class _SwitchAttachment:
    def __init__(self, conn: PipeEnd) -> None:
        self.conn = conn
        self.element_id: Optional[str] = None
        self.datapath_id: Optional[int] = None
        self.features: Optional[m.FeaturesReply] = None
        self.session: Optional[WireSession] = None
        self.switch_established = False
        self.upstream: Optional[WireSession] = None
        self.upstream_conn: Optional[PipeEnd] = None
        self.upstream_ready = False
        self.upstream_established = False
        self.controller_id: Optional[str] = None
        self.pending: deque[bytes] = deque()
        self.pending_drops = 0
        self.hold: list[dict] = []  # captures awaiting switch identification
        self.closing = False


class Middleware:
    def __init__(self, scheduler: Scheduler, chain: ChainNetwork,
                 config: Optional[MiddlewareConfig] = None,
                 event_sink: Optional[Callable[[str, dict], None]] = None) -> None:
        self.scheduler = scheduler
        self.chain = chain
        self.config = config or MiddlewareConfig()
        self._validate_policy(self.config.capture_policy)
        self._event_sink = event_sink
        self.registry = RegistryState()  # local mirror, applied optimistically
        self.switches: dict[str, _SwitchAttachment] = {}
        self.controllers: dict[str, Callable[[], PipeEnd]] = {}
        self.mapping: dict[str, str] = {}
        self.stats = SnapshotQueueStats()
        self._snapshot_queue: deque[tuple[dict, Optional[_SwitchAttachment]]] = deque()
        self._drain_scheduled = False
        self._sample_counter = 0
        self._last_state_snapshot: dict[str, int] = {}
        self.on_packet_in: Optional[Callable[[str, Optional[str], int], None]] = None
        self.sample_sink: Optional[Callable[[TrafficSample], None]] = None

    # -- events ----------------------------------------------------------------

    def _emit(self, kind: str, payload: dict) -> None:
        if self._event_sink is not None:
            self._event_sink(kind, payload)

    # -- registration and access control -------------------------------------------

    def register(self, element_id: str, role: ElementRole, pubinfo: str = "") -> bytes:
        doc = register_payload(element_id, role, pubinfo)
        tx_hash = self._submit_registry_tx(doc)
        self._emit("registered", {"element_id": element_id, "role": role.value})
        return tx_hash

    def evict(self, element_id: str, reason: str) -> bytes:
        rec = self.registry.get(element_id)
        if rec is None:
            raise ValueError(f"unknown element: {element_id}")
        doc = evict_payload(element_id, reason)
        tx_hash = self._submit_registry_tx(doc)
        self._emit("evicted", {"element_id": element_id, "reason": reason})
        if rec.role is ElementRole.SWITCH:
            att = self.switches.get(element_id)
            if att is not None:
                self._teardown_switch(att, f"evicted: {reason}")
        else:
            self.controllers.pop(element_id, None)
            for sw_id, cid in list(self.mapping.items()):
                if cid == element_id:
                    att = self.switches.get(sw_id)
                    if att is not None:
                        self._close_upstream(att)
                        self._assign_controller(att, reason="failover")
        return tx_hash

    def _submit_registry_tx(self, doc: dict) -> bytes:
        # Apply to the local mirror first: the middleware is the only registry
        # writer, so access checks may trust the optimistic view while the
        # transaction is still in flight toward commit.
        payload = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
        mirror_tx = Transaction.create(TxKind.REGISTER, payload, MIDDLEWARE_ID, 0,
                                       self.scheduler.now_us)
        self.registry.apply_tx(mirror_tx)
        return self.chain.submit_tx(TxKind.REGISTER, payload, MIDDLEWARE_ID)

    def is_registered(self, element_id: str) -> bool:
        return self.registry.is_registered(element_id)

    # -- controller attachment ---------------------------------------------------------

    def attach_controller(self, controller_id: str, dial: Callable[[], PipeEnd]) -> None:
        """Make a controller reachable.  dial() must open a fresh control
        connection to it (the middleware opens one per mapped switch)."""
        if not self.is_registered(controller_id):
            if not self.config.open_enrollment:
                self._emit("rejected", {"element_id": controller_id, "reason": "not registered"})
                raise AccessDenied(f"controller {controller_id} is not registered")
            self.register(controller_id, ElementRole.CONTROLLER)
        elif self.registry.get(controller_id).role is not ElementRole.CONTROLLER:
            raise AccessDenied(f"{controller_id} is registered as a non-controller")
        self.controllers[controller_id] = dial
        for att in self.switches.values():
            if att.controller_id is None and att.element_id is not None:
                self._assign_controller(att, reason="assigned")

    # -- switch attachment ----------------------------------------------------------------

    def accept_switch(self, conn: PipeEnd) -> None:
        """Take ownership of a freshly dialed switch control connection."""
        att = _SwitchAttachment(conn)

        def send_to_switch(raw: bytes) -> None:
            if not att.switch_established:
                self._capture(DIR_TO_SWITCH, raw[1], raw, att)
            conn.send(raw)

        def on_rx(msg: m.OfMessage, raw: bytes) -> None:
            if not att.switch_established:
                self._capture(DIR_TO_CONTROLLER, msg.header.msg_type, raw, att)

        att.session = WireSession(
            self.scheduler,
            PeerRole.SWITCH,
            send_bytes=send_to_switch,
            deliver=lambda msg, raw: self._from_switch(att, msg, raw),
            on_disconnect=lambda reason: self._on_switch_session_down(att, reason),
            on_established=lambda: self._on_switch_established(att),
            on_rx=on_rx,
        )
        conn.on_bytes = att.session.feed
        conn.on_closed = lambda: att.session.close("connection closed by peer")

    def _on_switch_established(self, att: _SwitchAttachment) -> None:
        att.switch_established = True

    def _from_switch(self, att: _SwitchAttachment, msg: m.OfMessage, raw: bytes) -> None:
        if att.element_id is None:
            if isinstance(msg.body, m.FeaturesReply):
                self._finish_switch_handshake(att, msg.body)
            return  # anything else pre-identification is dropped
        if isinstance(msg.body, m.PacketIn) and self.on_packet_in is not None:
            self.on_packet_in(att.element_id, att.controller_id, self.scheduler.now_us)
        self._capture(DIR_TO_CONTROLLER, msg.header.msg_type, raw, att)
        if att.upstream is not None and att.upstream_ready:
            att.upstream.send_raw(raw)
        else:
            att.pending.append(raw)
            if len(att.pending) > self.config.pending_cap:
                att.pending.popleft()
                att.pending_drops += 1

    def _finish_switch_handshake(self, att: _SwitchAttachment, features: m.FeaturesReply) -> None:
        element_id = f"s{features.datapath_id}"
        if not self.is_registered(element_id):
            if not self.config.open_enrollment:
                self._emit("rejected", {"element_id": element_id, "reason": "not registered"})
                att.session.send_message(
                    m.error_msg(0, m.OFPET_HELLO_FAILED, m.OFPHFC_EPERM))
                att.session.close("not registered")
                return
            self.register(element_id, ElementRole.SWITCH, pubinfo=f"dpid:{features.datapath_id}")
        old = self.switches.get(element_id)
        if old is not None and old is not att:
            self._teardown_switch(old, "replaced by new connection")
        att.element_id = element_id
        att.datapath_id = features.datapath_id
        att.features = features
        self.switches[element_id] = att
        self._flush_hold(att)
        self._emit("session_up", {"element_id": element_id,
                                  "datapath_id": features.datapath_id})
        self._assign_controller(att, reason="assigned")

    def _flush_hold(self, att: _SwitchAttachment) -> None:
        if att.hold:
            for record in att.hold:
                self._snapshot_queue.append((record, att))
            att.hold.clear()
            self._schedule_drain()

    def _on_switch_session_down(self, att: _SwitchAttachment, reason: str) -> None:
        if att.closing:
            return
        att.closing = True
        self._flush_hold(att)  # a rejected peer's captures keep null attribution
        att.conn.close()
        self._close_upstream(att)
        if att.element_id is not None:
            self.switches.pop(att.element_id, None)
            self.mapping.pop(att.element_id, None)
            self._emit("session_down", {"element_id": att.element_id, "reason": reason})

    def _teardown_switch(self, att: _SwitchAttachment, reason: str) -> None:
        if att.session is not None and not att.session.closed:
            att.session.close(reason)  # triggers _on_switch_session_down
        else:
            self._on_switch_session_down(att, reason)

    # -- upstream (controller-side) sessions ----------------------------------------------

    def _assign_controller(self, att: _SwitchAttachment, reason: str) -> None:
        cid = self._pick_controller()
        if cid is None:
            att.controller_id = None
            self.mapping.pop(att.element_id, None)
            self._emit("mapping_changed", {"switch_id": att.element_id,
                                           "controller_id": None, "reason": "no controller"})
            return
        self._open_upstream(att, cid, reason)

    def _pick_controller(self) -> Optional[str]:
        candidates = [cid for cid in self.controllers if self.is_registered(cid)]
        if not candidates:
            return None
        load = {cid: 0 for cid in candidates}
        for mapped in self.mapping.values():
            if mapped in load:
                load[mapped] += 1
        return min(candidates, key=lambda c: (load[c], c))

    def _open_upstream(self, att: _SwitchAttachment, controller_id: str, reason: str) -> None:
        dial = self.controllers.get(controller_id)
        if dial is None:
            return
        conn = dial()
        att.upstream_conn = conn
        att.controller_id = controller_id
        att.upstream_ready = False
        att.upstream_established = False
        self.mapping[att.element_id] = controller_id

        def send_up(raw: bytes) -> None:
            if not att.upstream_established:
                self._capture(DIR_TO_CONTROLLER, raw[1], raw, att)
            conn.send(raw)

        def on_rx(msg: m.OfMessage, raw: bytes) -> None:
            if not att.upstream_established:
                self._capture(DIR_TO_SWITCH, msg.header.msg_type, raw, att)

        def established() -> None:
            att.upstream_established = True

        att.upstream = WireSession(
            self.scheduler,
            PeerRole.CONTROLLER,
            send_bytes=send_up,
            deliver=lambda msg, raw: self._from_controller(att, msg, raw),
            on_disconnect=lambda r: self._on_upstream_down(att, r),
            on_established=established,
            send_hello=True,
            on_rx=on_rx,
        )
        conn.on_bytes = att.upstream.feed
        conn.on_closed = lambda: att.upstream.close("controller closed connection")
        self._emit("mapping_changed", {"switch_id": att.element_id,
                                       "controller_id": controller_id, "reason": reason})

    def _from_controller(self, att: _SwitchAttachment, msg: m.OfMessage, raw: bytes) -> None:
        if isinstance(msg.body, m.FeaturesRequest):
            # Answer discovery with the switch's stored identity; the switch
            # itself already completed its handshake on the other leg.
            f = att.features
            reply = m.features_reply(msg.xid, f.datapath_id, f.n_buffers, f.n_tables,
                                     f.auxiliary_id, f.capabilities, f.reserved)
            self._capture(DIR_TO_SWITCH, m.OFPT_FEATURES_REQUEST, raw, att)
            self._capture(DIR_TO_CONTROLLER, m.OFPT_FEATURES_REPLY, m.encode(reply), att)
            att.upstream.send_message(reply)
            att.upstream_ready = True
            self._flush_pending(att)
            return
        self._capture(DIR_TO_SWITCH, msg.header.msg_type, raw, att)
        if att.session is not None and not att.session.closed:
            att.session.send_raw(raw)

    def _flush_pending(self, att: _SwitchAttachment) -> None:
        while att.pending and att.upstream is not None and att.upstream_ready:
            att.upstream.send_raw(att.pending.popleft())

    def _close_upstream(self, att: _SwitchAttachment) -> None:
        if att.upstream is not None and not att.upstream.closed:
            upstream = att.upstream
            att.upstream = None  # prevent the down-handler from remapping
            upstream.close("remapped")
        att.upstream = None
        if att.upstream_conn is not None:
            att.upstream_conn.close()
            att.upstream_conn = None
        att.upstream_ready = False
        att.upstream_established = False
        att.controller_id = None

    def _on_upstream_down(self, att: _SwitchAttachment, reason: str) -> None:
        if att.upstream is None or att.closing:
            return  # deliberate close during remap/teardown
        att.upstream = None
        if att.upstream_conn is not None:
            att.upstream_conn.close()
            att.upstream_conn = None
        att.upstream_ready = False
        att.upstream_established = False
        att.controller_id = None
        if att.element_id is not None and att.element_id in self.switches:
            self._assign_controller(att, reason="failover")

    # -- mapping control -----------------------------------------------------------

    def remap(self, switch_id: str, controller_id: str) -> None:
        att = self.switches.get(switch_id)
        if att is None:
            raise ValueError(f"unknown switch: {switch_id}")
        if controller_id not in self.controllers or not self.is_registered(controller_id):
            raise ValueError(f"controller {controller_id} is not available")
        if att.controller_id == controller_id:
            return
        self._close_upstream(att)
        self._open_upstream(att, controller_id, reason="remap")

    def mapping_view(self) -> dict:
        loads: dict[str, int] = {cid: 0 for cid in self.controllers}
        for cid in self.mapping.values():
            if cid in loads:
                loads[cid] += 1
        return {
            "mapping": dict(self.mapping),
            "controllers": sorted(self.controllers),
            "loads": loads,
            "unmapped": sorted(sw for sw, att in self.switches.items()
                               if att.controller_id is None),
        }

    # -- defense rule injection -------------------------------------------------------

    def install_flow(self, switch_id: str, flow: m.OfMessage) -> bool:
        """Send a middleware-originated FlowMod down a switch's control channel."""
        att = self.switches.get(switch_id)
        if att is None or att.session is None or att.session.closed:
            return False
        raw = m.encode(flow)
        self._capture(DIR_TO_SWITCH, m.OFPT_FLOW_MOD, raw, att)
        att.session.send_raw(raw)
        return True

    # -- capture and snapshots -----------------------------------------------------------

    @staticmethod
    def _validate_policy(policy: str) -> None:
        if policy in CAPTURE_POLICIES:
            return
        if policy.startswith("sampled:"):
            k = int(policy.split(":", 1)[1])
            if k >= 1:
                return
        raise ValueError(f"unknown capture policy: {policy}")

    def set_capture_policy(self, policy: str) -> None:
        self._validate_policy(policy)
        self.config.capture_policy = policy
        self._emit("capture_policy_changed", {"policy": policy})

    def _policy_admits(self, msg_type: int) -> bool:
        policy = self.config.capture_policy
        if policy == "all":
            return True
        if policy == "none":
            return False
        if policy == "control":
            return msg_type in _CONTROL_TYPES
        k = int(policy.split(":", 1)[1])
        self._sample_counter += 1
        return self._sample_counter % k == 0

    def _capture(self, direction: str, msg_type: int, raw: bytes,
                 att: _SwitchAttachment) -> None:
        if msg_type in _NEVER_CAPTURED:
            return
        if not self._policy_admits(msg_type):
            self.stats.policy_skipped += 1
            return
        self.stats.captured += 1
        record = {
            "tag": _TAGS.get(msg_type, "other"),
            "timestamp_us": self.scheduler.now_us,
            "direction": direction,
            "hex": raw.hex(),
        }
        # Attribution is resolved at drain time; captures that precede the
        # identifying FeaturesReply wait in the attachment until it arrives.
        if att is not None and att.element_id is None:
            att.hold.append(record)
        else:
            self._snapshot_queue.append((record, att))
            self._schedule_drain()

    def _schedule_drain(self) -> None:
        if not self._drain_scheduled:
            self._drain_scheduled = True
            self.scheduler.after(0, self._drain_snapshots)

    def _drain_snapshots(self) -> None:
        self._drain_scheduled = False
        while self._snapshot_queue:
            record, att = self._snapshot_queue.popleft()
            if att is not None:
                record["switch_id"] = att.element_id
                record["controller_id"] = att.controller_id
            self.chain.submit_tx(TxKind.SNAPSHOT, record, MIDDLEWARE_ID,
                                 on_commit=self._on_snapshot_committed)
            self.stats.submitted += 1

    def _on_snapshot_committed(self, tx, block) -> None:
        self.stats.committed += 1

    # -- monitoring samples ------------------------------------------------------------

    def ingest_sample(self, sample: TrafficSample) -> None:
        """Switches push per-interval counters here; they feed the anomaly
        monitor and, if enabled, periodic link-state snapshot txs."""
        if self.sample_sink is not None:
            self.sample_sink(sample)
        interval = self.config.state_snapshot_interval_us
        if interval <= 0:
            return
        last = self._last_state_snapshot.get(sample.switch_id, -interval)
        if sample.t_us - last >= interval:
            self._last_state_snapshot[sample.switch_id] = sample.t_us
            record = {
                "tag": "transmission_rate",
                "timestamp_us": sample.t_us,
                "switch_id": sample.switch_id,
                "interval_us": sample.interval_us,
                "port_rx_packets": {str(k): v for k, v in sample.port_rx_packets.items()},
                "port_rx_bytes": {str(k): v for k, v in sample.port_rx_bytes.items()},
            }
            self._snapshot_queue.append((record, None))
            self.stats.captured += 1
            self._schedule_drain()

    # -- invariants (used by tests) ------------------------------------------------------

    def check_access_invariant(self) -> list[str]:
        """Every open session's element resolves to a registered record."""
        violations = []
        for sw_id, att in self.switches.items():
            if att.session is not None and not att.session.closed:
                if not self.is_registered(sw_id):
                    violations.append(f"switch session {sw_id} without registration")
            if att.controller_id is not None and not self.is_registered(att.controller_id):
                violations.append(f"upstream to unregistered controller {att.controller_id}")
        return violations
