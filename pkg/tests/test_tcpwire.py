"""The wire protocol over real TCP sockets, paced against the wall clock."""

from flowledger.chain.network import ChainNetwork
from flowledger.chain.pbft import ConsensusConfig
from flowledger.middleware import Middleware, MiddlewareConfig
from flowledger.ofwire import messages as m
from flowledger.ofwire.tcp import TcpServer, connect_tcp
from flowledger.scheduler import Scheduler, s_to_us
from flowledger.simnet.controller import LearningController
from flowledger.simnet.switch import SimSwitch
from flowledger.simnet.topology import Frame
from flowledger.transport import pipe


def test_switch_enrolls_and_forwards_over_real_sockets():
    sched = Scheduler()
    chain = ChainNetwork(sched, ConsensusConfig(n=4, link_delay_us=1000), seed=5)
    mw = Middleware(sched, chain,
                    MiddlewareConfig(open_enrollment=True, capture_policy="none"))
    ctrl = LearningController(sched, "c1")

    def dial():
        a, b = pipe(sched, 100)
        ctrl.accept(b)
        return a

    mw.attach_controller("c1", dial)

    sent = []
    switch = SimSwitch(sched, 7, [1, 2, 3],
                       lambda sw, port, raw: sent.append((port, raw)))
    server = TcpServer(sched, mw.accept_switch)
    try:
        conn = connect_tcp(sched, *server.address)
        switch.attach_control(conn)

        frame = Frame(m.mac_str(2), m.mac_str(1), "10.0.0.1", "10.0.0.2")
        back = Frame(m.mac_str(1), m.mac_str(2), "10.0.0.2", "10.0.0.1")
        sched.at(s_to_us(0.5), lambda: switch.ingest(1, frame.encode()))
        sched.at(s_to_us(1.0), lambda: switch.ingest(2, back.encode()))
        sched.at(s_to_us(2.0), sched.stop)
        # 2 virtual seconds at 20x: about 100ms of wall clock, with every
        # control message crossing a real socket
        sched.run_paced(rate=20.0)
    finally:
        server.close()

    assert switch.established
    assert mw.mapping == {"s7": "c1"}
    assert ctrl.stats.packet_ins == 2
    # second exchange had the source learned, so an exact rule came back
    assert ctrl.stats.flow_mods == 1
    assert len(switch.table.all_entries()) == 1
    ports = sorted(port for port, _raw in sent)
    assert ports.count(1) == 1  # learned reply forwarded straight to port 1
    assert switch.conservation()["balanced"]
