"""Intent engine tests: translation, escalation ladder, validation, device
intents, path recalculation against a brute-force oracle, audit txs."""

from __future__ import annotations

import networkx as nx
import pytest

from flowledger.actions import Detect, Evict, InstallFlow, RateLimit, Remap
from flowledger.chain.ledger import TxKind
from flowledger.chain.network import ChainNetwork, ConsensusConfig
from flowledger.guard import GuardMonitor
from flowledger.intent import (
    IntentConfig,
    IntentEngine,
    PlanStage,
    Preference,
    UnknownTarget,
    Verb,
    plan_device_removal,
    plan_paths,
    path_flows,
    translate,
)
from flowledger.middleware import TrafficSample
from flowledger.ofwire.messages import ipv4_int
from flowledger.scheduler import Scheduler, s_to_us
from flowledger.simnet.topology import Topology, default_topology

HALF_S = s_to_us(0.5)
VICTIM = "10.0.0.9"
BG_PEER = "10.0.0.15"
KNOWN_HOSTS = frozenset(f"10.0.0.{i}" for i in range(1, 26))
ATTACK_START_S = 4.0


class World:
    """Single-ingress stand-in for the data plane around the victim's switch:
    the flood enters s3 port 3, background service traffic enters port 5, and
    the victim hangs off port 4.  Enacted defenses reshape what gets through;
    ingest-side flow counters still see frames that drop at this switch, the
    access-port tx counter does not."""

    def __init__(self, pool: int | None = 900) -> None:
        self.attack_on = False
        self.attack_fps = 300.0
        self.pool = pool
        self.link_limit: float | None = None
        self.blocked: set[str] = set()
        self.cursor = 0

    def tick_arrivals(self) -> list[str]:
        if not self.attack_on:
            return []
        rate = self.attack_fps
        if self.link_limit is not None:
            rate = min(rate, self.link_limit)
        srcs = []
        for i in range(round(rate / 2)):
            n = (self.cursor + i) % (self.pool or 1 << 30)
            srcs.append(f"172.16.{n // 250}.{n % 250 + 1}")
        self.cursor += len(srcs)
        return srcs


class FakeEnactor:
    def __init__(self, world: World, guard: GuardMonitor,
                 refuse: bool = False) -> None:
        self.world = world
        self.guard = guard
        self.refuse = refuse
        self.log: list = []

    def enact(self, action) -> bool:
        if self.refuse:
            return False
        self.log.append(action)
        if isinstance(action, RateLimit):
            self.world.link_limit = action.limit_fps
        elif isinstance(action, InstallFlow):
            if "ipv4_src" in action.match:
                self.world.blocked.add(action.match["ipv4_src"])
        elif isinstance(action, Detect):
            self.guard.arm_deep_inspection(KNOWN_HOSTS)
        return True


class Rig:
    """Protection-ladder scenario: background 40 fps service traffic to the
    victim, a rotating-source flood from t=4 s, engine driven off the guard."""

    def __init__(self, pool: int | None = 900, refuse: bool = False,
                 intent_cfg: IntentConfig | None = None) -> None:
        self.sched = Scheduler()
        self.chain = ChainNetwork(
            self.sched,
            ConsensusConfig(n=4, mode="pbft", link_delay_us=1_000,
                            batch_wait_us=5_000),
            seed=3,
        )
        self.guard = GuardMonitor()
        self.guard.set_host_location(VICTIM, "s3", 4)
        self.world = World(pool)
        self.enactor = FakeEnactor(self.world, self.guard, refuse)
        self.events: list[tuple[str, dict]] = []
        self.engine = IntentEngine(
            self.sched, self.chain, self.guard, self.enactor,
            config=intent_cfg,
            event_sink=lambda kind, doc: self.events.append((kind, doc)),
        )
        self.sched.every(HALF_S, self._tick, first_at=HALF_S)
        self.sched.at(s_to_us(ATTACK_START_S), self._start_attack)

    def _start_attack(self) -> None:
        self.world.attack_on = True

    def _tick(self) -> None:
        now = self.sched.now_us
        # controller churn: upstream switches keep punting the flood's fresh
        # frames no matter what this switch drops, so the alarm stays up
        total = 50.0 + (self.world.attack_fps if self.world.attack_on else 0.0)
        count = round(total / 2)
        step = HALF_S // max(count, 1)
        for j in range(count):
            self.guard.note_packet_in("s3", "c1", now - HALF_S + 1 + j * step)
        self.guard.ingest_sample(TrafficSample(
            switch_id="s1", t_us=now, interval_us=HALF_S,
            port_rx_packets={1: 25}, port_rx_bytes={1: 2500},
            flows={(1, ipv4_int("10.0.0.1"), ipv4_int("10.0.0.2")): 25}))
        arrivals = self.world.tick_arrivals()
        flows = {(5, ipv4_int(BG_PEER), ipv4_int(VICTIM)): 20}
        delivered = 20
        for src in arrivals:
            key = (3, ipv4_int(src), ipv4_int(VICTIM))
            flows[key] = flows.get(key, 0) + 1
            if src not in self.world.blocked:
                delivered += 1
        self.guard.ingest_sample(TrafficSample(
            switch_id="s3", t_us=now, interval_us=HALF_S,
            port_rx_packets={3: len(arrivals), 5: 20},
            port_rx_bytes={3: len(arrivals) * 100, 5: 2000},
            flows=flows,
            port_tx_packets={4: delivered},
            port_tx_bytes={4: delivered * 100}))
        reports = self.guard.evaluate(now)
        if reports:
            self.engine.on_alarm(reports)

    def run_to(self, t_s: float) -> None:
        self.sched.run_until(s_to_us(t_s))

    def kind_count(self, kind: TxKind) -> int:
        return self.chain.state(0).kind_counts[kind]

    def event_kinds(self) -> list[str]:
        return [k for k, _ in self.events]

    def submit_at(self, t_s: float, verb: Verb, target: str,
                  preference: Preference) -> None:
        self.sched.at(s_to_us(t_s),
                      lambda: self.engine.submit(verb, target, preference))


class FakeViews:
    def __init__(self, topo: Topology, mapping: dict[str, str],
                 controllers: list[str]) -> None:
        self.topo = topo
        self._mapping = dict(mapping)
        self._controllers = list(controllers)

    def mapping(self) -> dict[str, str]:
        return dict(self._mapping)

    def controllers(self) -> list[str]:
        return list(self._controllers)

    def topology(self) -> Topology:
        return self.topo


class DeviceEnactor:
    """Applies evictions and remaps to the fake views; records everything."""

    def __init__(self, views: FakeViews, refuse: bool = False) -> None:
        self.views = views
        self.refuse = refuse
        self.log: list = []

    def enact(self, action) -> bool:
        if self.refuse:
            return False
        self.log.append(action)
        if isinstance(action, Evict):
            if action.element_id in self.views._controllers:
                self.views._controllers.remove(action.element_id)
            self.views._mapping.pop(action.element_id, None)
        elif isinstance(action, Remap):
            self.views._mapping[action.switch_id] = action.controller_id
        return True


class DeviceRig:
    def __init__(self, topo: Topology | None = None,
                 mapping: dict[str, str] | None = None,
                 controllers: tuple[str, ...] = ("c1", "c2"),
                 refuse: bool = False) -> None:
        self.sched = Scheduler()
        self.chain = ChainNetwork(
            self.sched,
            ConsensusConfig(n=4, mode="pbft", link_delay_us=1_000,
                            batch_wait_us=5_000),
            seed=5,
        )
        self.guard = GuardMonitor()
        topo = topo or default_topology()
        if mapping is None:
            mapping = {sw: controllers[0] for sw in topo.switches}
        self.views = FakeViews(topo, mapping, list(controllers))
        self.enactor = DeviceEnactor(self.views, refuse)
        self.events: list[tuple[str, dict]] = []
        self.engine = IntentEngine(
            self.sched, self.chain, self.guard, self.enactor, views=self.views,
            event_sink=lambda kind, doc: self.events.append((kind, doc)),
        )

    def run(self, seconds: float) -> None:
        self.sched.run_until(self.sched.now_us + s_to_us(seconds))

    def kind_count(self, kind: TxKind) -> int:
        return self.chain.state(0).kind_counts[kind]


def ring_topology() -> Topology:
    topo = Topology()
    for i in range(1, 5):
        topo.add_switch(f"s{i}")
    for a, b in [("s1", "s2"), ("s2", "s3"), ("s3", "s4"), ("s1", "s4")]:
        topo.add_link(a, b)
    for i in (1, 2, 3, 4):
        topo.attach_host(f"h{i}", f"10.1.0.{i}",
                         f"0a:00:00:00:00:{i:02x}", f"s{i}")
    return topo


def brute_force_paths(topo: Topology, exclude: frozenset[str] = frozenset()):
    """Independent oracle: enumerate all shortest paths, pick the lowest
    node-id sequence."""
    g = nx.Graph()
    g.add_nodes_from(sw for sw in topo.switches if sw not in exclude)
    for link in topo.links:
        if link.a in g and link.b in g:
            g.add_edge(link.a, link.b)
    out = {}
    for src in topo.hosts.values():
        for dst in topo.hosts.values():
            if src.host_id == dst.host_id:
                continue
            if src.switch_id not in g or dst.switch_id not in g:
                continue
            try:
                best = min(nx.all_shortest_paths(g, src.switch_id,
                                                 dst.switch_id))
            except nx.NetworkXNoPath:
                continue
            out[(src.host_id, dst.host_id)] = tuple(best)
    return out


# -- translation -----------------------------------------------------------------------


def test_translate_is_pure_and_preference_shaped():
    cfg = IntentConfig()
    perf = translate(Preference.MAX_PERFORMANCE, cfg)
    assert [s.stage for s in perf] == [
        PlanStage.LIMIT_LINK, PlanStage.LIMIT_SOURCES, PlanStage.ISOLATE_FLOW]
    assert perf[0].params == {"fraction": 0.05}
    prot = translate(Preference.MAX_PROTECTION, cfg)
    assert [s.stage for s in prot] == [
        PlanStage.LIMIT_LINK, PlanStage.LIMIT_SOURCES, PlanStage.ISOLATE_FLOW]
    assert prot[0].params == {"fraction": 0.8, "detect": True}
    assert prot[1].params == {"cap": 512}
    plain = translate(Preference.NONE, cfg)
    assert [s.stage for s in plain] == [PlanStage.LIMIT_LINK]
    assert translate(Preference.MAX_PROTECTION, cfg) == prot  # pure


# -- protection ladder -------------------------------------------------------------------


def test_performance_profile_fulfills_at_first_stage():
    rig = Rig()
    rig.submit_at(1.0, Verb.PROTECT_SERVICE, VICTIM, Preference.MAX_PERFORMANCE)
    rig.run_to(2.0)
    report = rig.engine.report("intent-1")
    assert report["status"] == "received"
    assert rig.engine.current_stage() is PlanStage.STABLE

    rig.run_to(12.0)
    report = rig.engine.report("intent-1")
    assert report["status"] == "validated"
    assert report["stage"] == "stable"  # resolution returns to stable
    assert len(report["validations"]) == 1
    verdict = report["validations"][0]
    assert verdict["verdict"] == "met"
    assert verdict["baseline_fps"] == pytest.approx(40.0)
    assert verdict["target_fps"] == pytest.approx(60.0)
    assert verdict["measured_fps"] < 60.0

    limits = [a for a in rig.enactor.log if isinstance(a, RateLimit)]
    assert len(limits) == 1
    assert limits[0].switch_id == "s3" and limits[0].port == 3
    assert limits[0].limit_fps == pytest.approx(15.0)  # 5% of the 300 pps flood
    assert not any(isinstance(a, Detect) for a in rig.enactor.log)
    rig.run_to(13.0)
    assert rig.kind_count(TxKind.INTENT) == 4  # received/translated/validated/fulfilled
    assert rig.kind_count(TxKind.POLICY) == 1
    assert rig.kind_count(TxKind.FLOW_TABLE) == 0


def test_protection_profile_escalates_to_exact_isolation():
    rig = Rig(pool=900)
    rig.submit_at(1.0, Verb.PROTECT_SERVICE, VICTIM, Preference.MAX_PROTECTION)
    rig.run_to(22.0)
    report = rig.engine.report("intent-1")
    assert report["status"] == "validated"
    verdicts = [v["verdict"] for v in report["validations"]]
    assert verdicts == ["adjusted", "adjusted", "met"]
    stages = [d["stage"] for k, d in rig.events if k == "stage_provisioned"]
    assert stages == ["limit_link", "limit_sources", "isolate_flow"]

    # the gentle shaping stage also armed deep inspection
    first_policy = next(d for k, d in rig.events if k == "stage_provisioned")
    assert [a["kind"] for a in first_policy["actions"]][0] == "detect"
    limits = [a for a in rig.enactor.log if isinstance(a, RateLimit)]
    assert len(limits) == 1
    assert limits[0].limit_fps == pytest.approx(240.0)  # 80% of 300 pps

    per_src = [a for a in rig.enactor.log if isinstance(a, InstallFlow)
               and set(a.match) == {"ipv4_src"}]
    assert 0 < len(per_src) <= 512
    assert all(a.match["ipv4_src"].startswith("172.16.") for a in per_src)

    exact = [a for a in rig.enactor.log if isinstance(a, InstallFlow)
             and set(a.match) == {"in_port", "ipv4_src", "ipv4_dst"}]
    assert len(exact) == 900  # the whole rotating pool, from the flow ledger
    assert all(a.match["ipv4_dst"] == VICTIM for a in exact)
    assert all(a.priority == 120 for a in exact)
    assert not any(a.match["ipv4_src"] == BG_PEER for a in exact)

    # the victim's link carried only the background service at the end
    final = report["validations"][-1]
    assert final["measured_fps"] == pytest.approx(40.0)
    assert rig.event_kinds().count("stage_escalated") == 2
    assert "intent_fulfilled" in rig.event_kinds()
    rig.run_to(24.0)
    assert rig.kind_count(TxKind.INTENT) == 6  # recv/transl/3 verdicts/fulfilled
    assert rig.kind_count(TxKind.POLICY) == 3
    assert rig.kind_count(TxKind.FLOW_TABLE) == len(per_src) + len(exact)


def test_exhausted_ladder_marks_intent_failed():
    rig = Rig(refuse=True)  # enactor accepts nothing, traffic never improves
    rig.submit_at(1.0, Verb.PROTECT_SERVICE, VICTIM, Preference.MAX_PROTECTION)
    rig.run_to(22.0)
    report = rig.engine.report("intent-1")
    assert report["status"] == "failed"
    assert report["error"] == "validation_not_met"
    verdicts = [v["verdict"] for v in report["validations"]]
    assert verdicts == ["adjusted", "adjusted", "not_met"]
    assert report["enacted"] == []  # refused actions are not recorded as enacted
    assert "intent_failed" in rig.event_kinds()
    rig.run_to(23.0)
    assert rig.kind_count(TxKind.INTENT) == 6
    assert rig.kind_count(TxKind.FLOW_TABLE) == 0


def test_plain_limit_traffic_is_single_stage():
    rig = Rig()
    rig.submit_at(1.0, Verb.LIMIT_TRAFFIC, VICTIM, Preference.NONE)
    rig.run_to(12.0)
    report = rig.engine.report("intent-1")
    assert report["status"] == "failed"  # mild shaping alone cannot meet it
    assert [v["verdict"] for v in report["validations"]] == ["not_met"]
    assert len(report["plan"]) == 1


def test_intent_submitted_during_attack_starts_immediately():
    rig = Rig()
    rig.run_to(7.0)  # alarm already raised by now
    assert rig.guard.alarm is not None
    intent_id = rig.engine.submit(Verb.PROTECT_SERVICE, VICTIM,
                                  Preference.MAX_PERFORMANCE)
    report = rig.engine.report(intent_id)
    assert report["status"] == "provisioned"
    assert report["stage"] == "limit_link"


def test_intent_for_unattacked_service_stays_armed():
    rig = Rig()
    rig.submit_at(1.0, Verb.PROTECT_SERVICE, "10.0.0.7",
                  Preference.MAX_PROTECTION)
    rig.run_to(9.0)
    assert rig.guard.alarm is not None  # the flood targets someone else
    assert rig.engine.report("intent-1")["status"] == "received"


def test_current_stage_tracks_ladder_position():
    rig = Rig(pool=900)
    rig.submit_at(1.0, Verb.PROTECT_SERVICE, VICTIM, Preference.MAX_PROTECTION)
    rig.run_to(3.0)
    assert rig.engine.current_stage() is PlanStage.STABLE
    rig.run_to(6.0)
    assert rig.engine.current_stage() is PlanStage.LIMIT_LINK
    rig.run_to(11.0)
    assert rig.engine.current_stage() is PlanStage.LIMIT_SOURCES
    rig.run_to(16.0)
    assert rig.engine.current_stage() is PlanStage.ISOLATE_FLOW
    rig.run_to(21.0)
    # fulfilled intent stands down even though the guard still sees churn
    assert rig.engine.report("intent-1")["stage"] == "stable"
    assert rig.engine.current_stage() is PlanStage.ATTACK_DETECTED


def test_validation_report_doc_fields():
    rig = Rig()
    rig.submit_at(1.0, Verb.PROTECT_SERVICE, VICTIM, Preference.MAX_PERFORMANCE)
    rig.run_to(12.0)
    v = rig.engine.report("intent-1")["validations"][0]
    assert set(v) == {"intent_id", "stage", "window_start_us", "window_end_us",
                      "verdict", "measured_fps", "baseline_fps", "target_fps",
                      "detail", "adjustments"}
    assert v["window_end_us"] - v["window_start_us"] == s_to_us(5)


# -- device intents ---------------------------------------------------------------------


def test_remove_controller_remaps_survivors():
    mapping = {"s1": "c1", "s2": "c2", "s3": "c1", "s4": "c1",
               "s5": "c1", "s6": "c1"}
    rig = DeviceRig(mapping=mapping)
    intent_id = rig.engine.submit(Verb.REMOVE_DEVICE, "c1")
    report = rig.engine.report(intent_id)
    assert report["status"] == "provisioned"
    evictions = [a for a in rig.enactor.log if isinstance(a, Evict)]
    remaps = [a for a in rig.enactor.log if isinstance(a, Remap)]
    assert [e.element_id for e in evictions] == ["c1"]
    assert sorted(r.switch_id for r in remaps) == ["s1", "s3", "s4", "s5", "s6"]
    assert all(r.controller_id == "c2" for r in remaps)
    # topology unchanged: path recalculation is a fixed point, no flows
    assert not any(isinstance(a, InstallFlow) for a in rig.enactor.log)
    rig.run(6.0)
    report = rig.engine.report(intent_id)
    assert report["status"] == "validated"
    assert set(rig.views.mapping().values()) == {"c2"}
    assert rig.kind_count(TxKind.INTENT) == 4
    assert rig.kind_count(TxKind.POLICY) == 1
    assert rig.kind_count(TxKind.FLOW_TABLE) == 0


def test_remove_only_controller_is_infeasible():
    rig = DeviceRig(controllers=("c1",))
    intent_id = rig.engine.submit(Verb.REMOVE_DEVICE, "c1")
    report = rig.engine.report(intent_id)
    assert report["status"] == "failed"
    assert "only controller" in report["error"]
    assert rig.enactor.log == []
    rig.run(1.0)
    assert rig.kind_count(TxKind.POLICY) == 0
    kinds = [k for k, _ in rig.events]
    assert kinds == ["intent_received", "intent_failed"]


def test_remove_switch_reroutes_around_it():
    topo = ring_topology()
    mapping = {sw: "c1" for sw in topo.switches}
    rig = DeviceRig(topo=topo, mapping=mapping)
    intent_id = rig.engine.submit(Verb.REMOVE_DEVICE, "s2")
    flows = [a for a in rig.enactor.log if isinstance(a, InstallFlow)]
    # h1<->h3 previously crossed s2 (lowest-id tie-break), now detour via s4
    h1_h3 = [f for f in flows if f.match == {"ipv4_src": "10.1.0.1",
                                             "ipv4_dst": "10.1.0.3"}]
    assert [f.switch_id for f in h1_h3] == ["s1", "s4", "s3"]
    assert all(f.forward.startswith("output:") for f in flows)
    assert not any(f.switch_id == "s2" for f in flows)
    rig.run(6.0)
    assert rig.engine.report(intent_id)["status"] == "validated"
    assert "s2" not in rig.views.mapping()


def test_recalculate_paths_is_a_fixed_point_when_nothing_changed():
    rig = DeviceRig()
    intent_id = rig.engine.submit(Verb.RECALCULATE_PATHS, "*")
    assert not any(isinstance(a, InstallFlow) for a in rig.enactor.log)
    rig.run(6.0)
    report = rig.engine.report(intent_id)
    assert report["status"] == "validated"
    assert rig.kind_count(TxKind.FLOW_TABLE) == 0


def test_recalculate_paths_excluding_a_switch_installs_detours():
    topo = ring_topology()
    rig = DeviceRig(topo=topo, mapping={sw: "c1" for sw in topo.switches})
    rig.engine.submit(Verb.RECALCULATE_PATHS, "s2")
    flows = [a for a in rig.enactor.log if isinstance(a, InstallFlow)]
    assert flows and not any(f.switch_id == "s2" for f in flows)
    assert not any(isinstance(a, Evict) for a in rig.enactor.log)
    # only pairs whose path crossed s2 get new rules
    touched = {(f.match["ipv4_src"], f.match["ipv4_dst"]) for f in flows}
    assert ("10.1.0.1", "10.1.0.3") in touched
    assert ("10.1.0.3", "10.1.0.4") not in touched  # s3-s4 path unaffected


def test_recalculated_paths_match_brute_force_oracle():
    for topo in (default_topology(), ring_topology()):
        for exclude in (frozenset(), frozenset({"s2"}), frozenset({"s3"})):
            assert plan_paths(topo, exclude) == brute_force_paths(topo, exclude)
    # purity: same inputs, same plan
    topo = default_topology()
    assert plan_paths(topo, frozenset({"s3"})) == plan_paths(
        topo, frozenset({"s3"}))


def test_path_flows_realize_paths_hop_by_hop():
    topo = ring_topology()
    paths = plan_paths(topo)
    flows = path_flows(topo, paths, previous=None)
    by_pair: dict = {}
    for f in flows:
        key = (f.match["ipv4_src"], f.match["ipv4_dst"])
        by_pair.setdefault(key, []).append(f)
    h1, h3 = topo.hosts["h1"], topo.hosts["h3"]
    hops = by_pair[(h1.ip, h3.ip)]
    assert [f.switch_id for f in hops] == list(paths[("h1", "h3")])
    # last hop exits on the destination's access port
    assert hops[-1].forward == f"output:{h3.port}"


def test_device_actions_refused_fail_validation():
    rig = DeviceRig(refuse=True)
    intent_id = rig.engine.submit(Verb.REMOVE_DEVICE, "c1")
    rig.run(6.0)
    report = rig.engine.report(intent_id)
    assert report["status"] == "failed"
    assert report["partial_failures"]
    assert [v["verdict"] for v in report["validations"]] == ["not_met"]
    assert "partial_failure" in [k for k, _ in rig.events]


def test_unknown_targets_rejected():
    rig = DeviceRig()
    with pytest.raises(UnknownTarget):
        rig.engine.submit(Verb.PROTECT_SERVICE, "10.9.9.9",
                          Preference.MAX_PROTECTION)
    with pytest.raises(UnknownTarget):
        rig.engine.submit(Verb.REMOVE_DEVICE, "s99")
    with pytest.raises(UnknownTarget):
        rig.engine.submit(Verb.RECALCULATE_PATHS, "c1")
    with pytest.raises(UnknownTarget):
        rig.engine.submit(Verb.PROTECT_SERVICE, "")
    # nothing was persisted for any rejected submission
    assert rig.engine.list_intents() == []


def test_invalid_verb_and_preference_rejected():
    rig = Rig()
    with pytest.raises(ValueError):
        rig.engine.submit("defend", VICTIM, Preference.MAX_PERFORMANCE)
    with pytest.raises(ValueError):
        rig.engine.submit(Verb.PROTECT_SERVICE, VICTIM, "max_speed")
    with pytest.raises(KeyError):
        rig.engine.report("intent-99")


def test_plan_device_removal_is_pure():
    mapping = {"s1": "c1", "s2": "c2"}
    first = plan_device_removal("c1", mapping, ["c1", "c2"])
    second = plan_device_removal("c1", mapping, ["c1", "c2"])
    assert first == second
    assert [type(a).__name__ for a in first] == ["Evict", "Remap"]
