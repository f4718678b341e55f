"""
Registration, closed enrollment, and controller eviction
========================================================

With enrollment closed, only elements whose registration transaction has
committed may attach.  This script registers two controllers and one switch,
shows an unregistered element bouncing off, then evicts the active
controller and watches its switch fail over to the standby.
"""

from flowledger.chain.contracts import ElementRole
from flowledger.chain.network import ChainNetwork, ConsensusConfig
from flowledger.middleware import AccessDenied, Middleware, MiddlewareConfig
from flowledger.ofwire import messages as m
from flowledger.ofwire.session import PeerRole, WireSession
from flowledger.scheduler import Scheduler, s_to_us
from flowledger.transport import pipe

PIPE_DELAY_US = 200


class SwitchEnd:
    """Switch endpoint that answers the relay's FeaturesRequest."""

    def __init__(self, scheduler, conn, dpid):
        self.closed = False
        self.session = WireSession(
            scheduler, PeerRole.CONTROLLER,
            send_bytes=conn.send,
            deliver=self._deliver,
            on_disconnect=lambda reason: None,
            send_hello=True,
        )
        self._dpid = dpid
        conn.on_bytes = self.session.feed

        def on_closed():
            self.closed = True
            self.session.close("peer closed")

        conn.on_closed = on_closed

    def _deliver(self, msg, raw):
        if isinstance(msg.body, m.FeaturesRequest):
            self.session.send_message(m.features_reply(msg.xid, self._dpid))


class ControllerEnd:
    """Controller endpoint; accepts the connections the relay dials."""

    def __init__(self, scheduler):
        self.scheduler = scheduler
        self.sessions = []

    def dial(self):
        a, b = pipe(self.scheduler, PIPE_DELAY_US)
        session = WireSession(self.scheduler, PeerRole.SWITCH,
                              send_bytes=b.send,
                              deliver=lambda msg, raw: None,
                              on_disconnect=lambda reason: None)
        b.on_bytes = session.feed
        b.on_closed = lambda: session.close("peer closed")
        self.sessions.append(session)
        return a


def settle(sched, seconds=0.5):
    sched.run_until(sched.now_us + s_to_us(seconds))


# 1. Stand up the stack with enrollment closed and register the fleet.  The
#    register() calls submit transactions; access flips only once they
#    commit, so we let the chain settle before attaching anyone.
sched = Scheduler()
chain = ChainNetwork(sched, ConsensusConfig(n=4, mode="pbft", link_delay_us=1_000,
                                            batch_wait_us=5_000), seed=11)
events = []
mw = Middleware(sched, chain,
                MiddlewareConfig(open_enrollment=False, capture_policy="none"),
                event_sink=lambda kind, payload: events.append((kind, payload)))

for cid in ("c1", "c2"):
    mw.register(cid, ElementRole.CONTROLLER)
mw.register("s1", ElementRole.SWITCH)
settle(sched)
print(f"registered: c1={mw.is_registered('c1')} c2={mw.is_registered('c2')} "
      f"s1={mw.is_registered('s1')}")

# 2. An unregistered controller is refused before any session exists.
c1, c2 = ControllerEnd(sched), ControllerEnd(sched)
try:
    mw.attach_controller("c9", c1.dial)
    print("c9 attached (unexpected)")
except AccessDenied as exc:
    print(f"attach c9 refused: {exc}")

mw.attach_controller("c1", c1.dial)
mw.attach_controller("c2", c2.dial)

# 3. The registered switch handshakes and is mapped to the least loaded
#    controller; an unregistered switch is turned away during its handshake.
a, b = pipe(sched, PIPE_DELAY_US)
mw.accept_switch(a)
sw = SwitchEnd(sched, b, dpid=1)
settle(sched)

a, b = pipe(sched, PIPE_DELAY_US)
mw.accept_switch(a)
intruder = SwitchEnd(sched, b, dpid=9)
settle(sched)

view = mw.mapping_view()
print(f"mapping after handshakes: {view['mapping']}  loads: {view['loads']}")
print(f"intruder connection closed: {intruder.closed}")
rejected = [payload.get("element_id") for kind, payload in events if kind == "rejected"]
print(f"rejected so far: {rejected}")

# 4. Evict the active controller.  The eviction commits on chain, the
#    upstream session drops, and the switch is remapped to the standby.
mw.evict("c1", "operator action")
settle(sched)
view = mw.mapping_view()
print(f"after evicting c1: registered(c1)={mw.is_registered('c1')} "
      f"mapping: {view['mapping']}")
print(f"c1 upstream sessions closed: {all(s.closed for s in c1.sessions)}")

# 5. The evicted controller cannot come back, and the invariant that every
#    open session maps to a registered element still holds.
try:
    mw.attach_controller("c1", c1.dial)
    print("c1 reattached (unexpected)")
except AccessDenied as exc:
    print(f"reattach c1 refused: {exc}")
print(f"access invariant violations: {mw.check_access_invariant()}")
