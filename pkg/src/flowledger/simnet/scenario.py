"""Scenario runner: one deterministic process hosting the whole deployment.

A scenario file names a topology, background traffic, attacks, intents and a
defense mode; the runner builds the consensus network, the relay middleware,
the learning controllers, the simulated switches and the anomaly monitor,
wires them together exactly as a desk deployment would be cabled, and drives
everything off one virtual clock.  Identical spec and seed produce identical
traces byte for byte.

The master tick (every sample interval) does, in order: collect per-switch
counters, evaluate the anomaly monitor, hand any raised reports to the active
defense driver, then record a metrics row and event.  Keeping that order fixed
inside a single callback is what makes runs reproducible.
"""

from __future__ import annotations

import io
import json
from collections import deque
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

from flowledger.actions import (
    Action,
    Detect,
    Evict,
    InstallFlow,
    RateLimit,
    Remap,
    action_to_doc,
)
from flowledger.chain.ledger import export_chain
from flowledger.chain.network import ChainNetwork
from flowledger.chain.pbft import ConsensusConfig
from flowledger.events import EventLog
from flowledger.guard import AutoBlocker, GuardConfig, GuardMonitor
from flowledger.intent import IntentConfig, IntentEngine, UnknownTarget, _STAGE_NAMES
from flowledger.middleware import Middleware, MiddlewareConfig
from flowledger.scheduler import US_PER_S, Scheduler, s_to_us
from flowledger.simnet.attack import FloodSource
from flowledger.simnet.controller import LearningController
from flowledger.simnet.switch import SimSwitch
from flowledger.simnet.topology import Frame, Topology, default_topology
from flowledger.transport import pipe

SCENARIO_FORMAT = "flowledger-scenario/1"
LINK_HOP_US = 20  # data-plane per-hop latency
CONTROL_DELAY_US = 200  # control-channel pipe latency
DEFENSE_MODES = ("none", "auto_block", "intent_ladder")


@dataclass(frozen=True)
class PairSpec:
    """Steady background conversation between two hosts."""

    src: str
    dst: str
    fps: float
    bidirectional: bool = True

    def to_doc(self) -> dict:
        return {"src": self.src, "dst": self.dst, "fps": self.fps,
                "bidirectional": self.bidirectional}


@dataclass(frozen=True)
class AttackSpec:
    at_s: float
    victim: str  # host id
    rate_fps: float
    pool: Optional[int] = None  # spoofed-source rotation size; None = unbounded
    attackers: Optional[tuple[str, ...]] = None  # None = hosts on the farthest switch
    stop_s: Optional[float] = None

    def to_doc(self) -> dict:
        return {"at_s": self.at_s, "victim": self.victim,
                "rate_fps": self.rate_fps, "pool": self.pool,
                "attackers": list(self.attackers) if self.attackers else None,
                "stop_s": self.stop_s}


@dataclass(frozen=True)
class IntentSpec:
    at_s: float
    verb: str
    target: str
    preference: str = "none"

    def to_doc(self) -> dict:
        return {"at_s": self.at_s, "verb": self.verb, "target": self.target,
                "preference": self.preference}


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    duration_s: float
    seed: int = 0
    topology: str = "default"  # or an inline topology document
    topology_doc: Optional[dict] = None
    controllers: tuple[str, ...] = ("c1",)
    consensus: dict = field(default_factory=dict)
    capture_policy: str = "none"
    open_enrollment: bool = True
    sample_interval_ms: int = 500
    background: tuple[PairSpec, ...] = ()
    attacks: tuple[AttackSpec, ...] = ()
    defense: str = "none"
    intents: tuple[IntentSpec, ...] = ()
    guard: dict = field(default_factory=dict)
    intent_config: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.defense not in DEFENSE_MODES:
            raise ValueError(f"unknown defense mode: {self.defense}")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")

    def to_doc(self) -> dict:
        return {
            "format": SCENARIO_FORMAT,
            "name": self.name,
            "duration_s": self.duration_s,
            "seed": self.seed,
            "topology": self.topology_doc if self.topology_doc else self.topology,
            "controllers": list(self.controllers),
            "consensus": dict(self.consensus),
            "capture_policy": self.capture_policy,
            "open_enrollment": self.open_enrollment,
            "sample_interval_ms": self.sample_interval_ms,
            "background": [p.to_doc() for p in self.background],
            "attacks": [a.to_doc() for a in self.attacks],
            "defense": self.defense,
            "intents": [i.to_doc() for i in self.intents],
            "guard": dict(self.guard),
            "intent_config": dict(self.intent_config),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_doc(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_doc(cls, doc: dict) -> "ScenarioSpec":
        fmt = doc.get("format")
        if fmt != SCENARIO_FORMAT:
            raise ValueError(f"unsupported scenario format: {fmt!r}")
        topo = doc.get("topology", "default")
        topo_name, topo_doc = (topo, None) if isinstance(topo, str) else ("inline", topo)
        return cls(
            name=doc["name"],
            duration_s=float(doc["duration_s"]),
            seed=int(doc.get("seed", 0)),
            topology=topo_name,
            topology_doc=topo_doc,
            controllers=tuple(doc.get("controllers", ["c1"])),
            consensus=dict(doc.get("consensus", {})),
            capture_policy=doc.get("capture_policy", "none"),
            open_enrollment=bool(doc.get("open_enrollment", True)),
            sample_interval_ms=int(doc.get("sample_interval_ms", 500)),
            background=tuple(PairSpec(p["src"], p["dst"], float(p["fps"]),
                                      bool(p.get("bidirectional", True)))
                             for p in doc.get("background", [])),
            attacks=tuple(AttackSpec(
                at_s=float(a["at_s"]), victim=a["victim"],
                rate_fps=float(a["rate_fps"]),
                pool=a.get("pool"),
                attackers=tuple(a["attackers"]) if a.get("attackers") else None,
                stop_s=a.get("stop_s"),
            ) for a in doc.get("attacks", [])),
            defense=doc.get("defense", "none"),
            intents=tuple(IntentSpec(float(i["at_s"]), i["verb"], i["target"],
                                     i.get("preference", "none"))
                          for i in doc.get("intents", [])),
            guard=dict(doc.get("guard", {})),
            intent_config=dict(doc.get("intent_config", {})),
        )

    @classmethod
    def loads(cls, text: str) -> "ScenarioSpec":
        return cls.from_doc(json.loads(text))

    @classmethod
    def load(cls, path: str) -> "ScenarioSpec":
        return cls.loads(Path(path).read_text())


def topology_from_doc(doc: dict) -> Topology:
    topo = Topology()
    for sw in doc["switches"]:
        topo.add_switch(sw)
    for a, b in doc["links"]:
        topo.add_link(a, b)
    for h in doc["hosts"]:
        topo.attach_host(h["host_id"], h["ip"], h["mac"], h["switch"])
    return topo


def build_topology(spec: ScenarioSpec) -> Topology:
    if spec.topology_doc is not None:
        return topology_from_doc(spec.topology_doc)
    if spec.topology == "default":
        return default_topology()
    raise ValueError(f"unknown topology: {spec.topology}")


def farthest_switch(topo: Topology, from_switch: str) -> str:
    """Switch at maximum hop distance (lowest id on ties)."""
    dist = {from_switch: 0}
    queue = deque([from_switch])
    while queue:
        node = queue.popleft()
        for peer in topo.neighbors(node):
            if peer in topo.ports and peer not in dist and peer in topo.switches:
                dist[peer] = dist[node] + 1
                queue.append(peer)
    best = max(dist.values())
    return min(sw for sw, d in dist.items() if d == best)


def consensus_config(doc: dict) -> ConsensusConfig:
    kwargs = {}
    if "n" in doc:
        kwargs["n"] = int(doc["n"])
    if "mode" in doc:
        kwargs["mode"] = doc["mode"]
    if "link_delay_ms" in doc:
        kwargs["link_delay_us"] = int(float(doc["link_delay_ms"]) * 1000)
    for key in ("jitter_frac", "proc_cost_us", "batch_max", "batch_wait_us"):
        if key in doc:
            kwargs[key] = doc[key]
    return ConsensusConfig(**kwargs)


class _Views:
    """Live network views the intent engine plans against."""

    def __init__(self, runtime: "ScenarioRuntime") -> None:
        self._rt = runtime

    def mapping(self) -> dict[str, str]:
        return dict(self._rt.middleware.mapping)

    def controllers(self) -> list[str]:
        return sorted(self._rt.middleware.controllers)

    def topology(self) -> Topology:
        return self._rt.topology


class _TrafficPair:
    def __init__(self, rt: "ScenarioRuntime", src_id: str, dst_id: str,
                 fps: float, first_at_us: int) -> None:
        self.rt = rt
        self.src = rt.topology.hosts[src_id]
        self.dst = rt.topology.hosts[dst_id]
        self.sent = 0
        period = max(1, round(US_PER_S / fps))
        rt.scheduler.every(period, self._emit, first_at=first_at_us)

    def _emit(self) -> None:
        frame = Frame(eth_dst=self.dst.mac, eth_src=self.src.mac,
                      ipv4_src=self.src.ip, ipv4_dst=self.dst.ip,
                      seq=self.sent & 0xFFFF)
        self.sent += 1
        self.rt.inject(self.src, frame.encode())


class ScenarioRuntime:
    """Everything a running scenario owns; also the action enactor."""

    def __init__(self, spec: ScenarioSpec) -> None:
        self.spec = spec
        self.scheduler = Scheduler()
        self.topology = build_topology(spec)
        self.events = EventLog(capacity=50_000)
        self.rows: list[dict] = []
        self.host_rx: dict[str, int] = {h: 0 for h in self.topology.hosts}
        self._xid = 0x5000
        self.ran = False

        self.chain = ChainNetwork(self.scheduler, consensus_config(spec.consensus),
                                  seed=spec.seed)
        self.chain.block_sink = self._on_block

        self.middleware = Middleware(
            self.scheduler, self.chain,
            MiddlewareConfig(open_enrollment=spec.open_enrollment,
                             capture_policy=spec.capture_policy),
            event_sink=self._on_middleware_event)

        self.guard = GuardMonitor(replace(GuardConfig(), **spec.guard),
                                  event_sink=self._on_guard_event)
        self.middleware.on_packet_in = self.guard.note_packet_in
        self.middleware.sample_sink = self.guard.ingest_sample
        for host in self.topology.hosts.values():
            self.guard.set_host_location(host.ip, host.switch_id, host.port)

        # data plane
        self.switches: dict[str, SimSwitch] = {}
        for sw in self.topology.switches:
            dpid = int(sw.lstrip("s"))
            ports = sorted(self.topology.ports[sw])
            self.switches[sw] = SimSwitch(self.scheduler, dpid, ports, self._wire)

        # control plane
        self.controllers: dict[str, LearningController] = {}
        for cid in spec.controllers:
            ctrl = LearningController(self.scheduler, cid)
            self.controllers[cid] = ctrl
            self.middleware.attach_controller(cid, self._dialer(ctrl))
        for sw in self.topology.switches:
            a, b = pipe(self.scheduler, CONTROL_DELAY_US, label=f"{sw}-mw")
            self.switches[sw].attach_control(a)
            self.middleware.accept_switch(b)

        self.engine = IntentEngine(
            self.scheduler, self.chain, self.guard, self,
            views=_Views(self), config=IntentConfig(**spec.intent_config),
            event_sink=self._on_intent_event)
        self.blocker: Optional[AutoBlocker] = None
        if spec.defense == "auto_block":
            self.blocker = AutoBlocker(self.guard, self.enact)

        # traffic
        self.pairs: list[_TrafficPair] = []
        for i, p in enumerate(spec.background):
            start = s_to_us(0.2) + i * 1731
            self.pairs.append(_TrafficPair(self, p.src, p.dst, p.fps, start))
            if p.bidirectional:
                self.pairs.append(_TrafficPair(self, p.dst, p.src, p.fps,
                                               start + 577))
        self.floods: list[FloodSource] = []
        self.victim_ips: list[str] = []
        for a in spec.attacks:
            self._arm_attack(a)
        for ispec in spec.intents:
            self.scheduler.at(s_to_us(ispec.at_s),
                              lambda s=ispec: self._submit_intent(s))

        interval = s_to_us(spec.sample_interval_ms / 1000.0)
        self.scheduler.every(interval, self._tick, first_at=interval)

    # -- construction helpers ---------------------------------------------------------

    def _dialer(self, ctrl: LearningController):
        def dial():
            a, b = pipe(self.scheduler, CONTROL_DELAY_US,
                        label=f"mw-{ctrl.controller_id}")
            ctrl.accept(b)
            return a
        return dial

    def _arm_attack(self, a: AttackSpec) -> None:
        victim = self.topology.hosts[a.victim]
        if a.attackers is not None:
            attackers = [self.topology.hosts[h] for h in a.attackers]
        else:
            sw = farthest_switch(self.topology, victim.switch_id)
            victims = {atk.victim for atk in self.spec.attacks}
            attackers = [h for h in sorted(self.topology.hosts.values(),
                                           key=lambda h: h.host_id)
                         if h.switch_id == sw and h.host_id not in victims]
        flood = FloodSource(self.scheduler, attackers, victim, a.rate_fps,
                            emit=lambda host, raw: self.inject(host, raw),
                            pool=a.pool)
        self.floods.append(flood)
        self.victim_ips.append(victim.ip)
        self.scheduler.at(s_to_us(a.at_s), flood.start)
        if a.stop_s is not None:
            self.scheduler.at(s_to_us(a.stop_s), flood.stop)

    def _submit_intent(self, ispec: IntentSpec) -> None:
        try:
            intent_id = self.engine.submit(ispec.verb, ispec.target,
                                           ispec.preference)
        except (UnknownTarget, ValueError) as exc:
            self._emit("IntentTransition", {
                "transition": "intent_rejected", "verb": ispec.verb,
                "target": ispec.target, "error": str(exc)})
            return
        if ispec.target not in self.victim_ips:
            self.victim_ips.append(ispec.target)
        del intent_id

    # -- event plumbing ----------------------------------------------------------------

    def _emit(self, kind: str, payload: dict) -> None:
        self.events.append(kind, payload, self.scheduler.now_us)

    def _on_block(self, block) -> None:
        self._emit("BlockCommitted", {
            "height": block.height,
            "block_hash": block.block_hash.hex(),
            "n_txs": len(block.txs),
        })

    def _on_guard_event(self, kind: str, payload: dict) -> None:
        if kind == "alarm_raised":
            self._emit("AnomalyRaised", payload)
        elif kind == "alarm_cleared":
            self._emit("AnomalyCleared", payload)

    def _on_middleware_event(self, kind: str, payload: dict) -> None:
        if kind == "mapping_changed":
            self._emit("MappingChanged", payload)
        else:
            self._emit("RegistryChanged", {"change": kind, **payload})

    def _on_intent_event(self, kind: str, payload: dict) -> None:
        self._emit("IntentTransition", {"transition": kind, **payload})

    # -- data plane wiring --------------------------------------------------------------

    def inject(self, host, raw: bytes) -> None:
        """A host puts a frame on its access link."""
        self.switches[host.switch_id].ingest(host.port, raw)

    def _wire(self, switch_id: str, out_port: int, raw: bytes) -> None:
        peer = self.topology.peer(switch_id, out_port)
        if peer is None:
            return
        peer_id, peer_port = peer
        if peer_id in self.switches:
            target = self.switches[peer_id]
            self.scheduler.after(LINK_HOP_US,
                                 lambda: target.ingest(peer_port, raw))
        else:
            self.host_rx[peer_id] = self.host_rx.get(peer_id, 0) + 1

    # -- action enactment (used by the intent engine and the auto blocker) ---------------

    def enact(self, action: Action) -> bool:
        ok = self._enact(action)
        if ok:
            self._emit("DefenseInstalled", action_to_doc(action))
        return ok

    def _enact(self, action: Action) -> bool:
        if isinstance(action, InstallFlow):
            self._xid += 1
            return self.middleware.install_flow(action.switch_id,
                                                action.to_flow_mod(self._xid))
        if isinstance(action, RateLimit):
            sw = self.switches.get(action.switch_id)
            if sw is None:
                return False
            sw.set_port_limit(action.port, action.limit_fps)
            return True
        if isinstance(action, Detect):
            self.guard.arm_deep_inspection(
                frozenset(h.ip for h in self.topology.hosts.values()))
            return True
        if isinstance(action, Evict):
            try:
                self.middleware.evict(action.element_id, action.reason)
                return True
            except ValueError:
                return False
        if isinstance(action, Remap):
            try:
                self.middleware.remap(action.switch_id, action.controller_id)
                return True
            except ValueError:
                return False
        return False

    # -- master tick ---------------------------------------------------------------------

    def _tick(self) -> None:
        now = self.scheduler.now_us
        for sw_id in self.topology.switches:
            sample = self.switches[sw_id].take_sample(now)
            self.middleware.ingest_sample(sample)
        reports = self.guard.evaluate(now)
        if self.blocker is not None:
            self.blocker.on_reports(reports)
        if reports:
            self.engine.on_alarm(reports)
        self._record(now)

    def _record(self, now: int) -> None:
        victim_fps = {ip: round(self.guard.victim_traffic_fps(ip, now), 3)
                      for ip in self.victim_ips}
        stage = self.engine.current_stage()
        row = {
            "t_s": round(now / US_PER_S, 3),
            "packet_in_fps": round(self.guard.packet_in_fps(now), 3),
            "controller_load": round(self.guard.controller_load(now), 4),
            "baseline_fps": round(self.guard.baseline_fps, 3),
            "threshold_fps": round(self.guard.threshold_fps, 3),
            "alarm": int(self.guard.alarm is not None),
            "stage": _STAGE_NAMES[stage],
            "chain_height": self.chain.head().height,
            "flow_mods": sum(sw.stats.flow_mods for sw in self.switches.values()),
            "victim_fps": max(victim_fps.values(), default=0.0),
        }
        self.rows.append(row)
        self._emit("MetricsTick", {**row, "victims": victim_fps})

    # -- running and outputs --------------------------------------------------------------

    def run(self) -> "ScenarioRuntime":
        self.scheduler.run_until(s_to_us(self.spec.duration_s))
        self.ran = True
        return self

    TRACE_COLUMNS = ("t_s", "packet_in_fps", "controller_load", "baseline_fps",
                     "threshold_fps", "alarm", "stage", "chain_height",
                     "flow_mods", "victim_fps")

    def trace_csv(self) -> str:
        out = io.StringIO()
        out.write(",".join(self.TRACE_COLUMNS) + "\n")
        for row in self.rows:
            out.write(",".join(str(row[c]) for c in self.TRACE_COLUMNS) + "\n")
        return out.getvalue()

    def summary(self) -> dict:
        conservation = {sw_id: sw.conservation()["balanced"]
                        for sw_id, sw in self.switches.items()}
        first_defense = next((e.t_us / US_PER_S for e in self.events.since(0)
                              if e.kind == "DefenseInstalled"), None)
        peak = max((r["packet_in_fps"] for r in self.rows), default=0.0)
        return {
            "name": self.spec.name,
            "seed": self.spec.seed,
            "duration_s": self.spec.duration_s,
            "defense": self.spec.defense,
            "peak_packet_in_fps": peak,
            "first_defense_s": first_defense,
            "final_stage": self.rows[-1]["stage"] if self.rows else "stable",
            "final_alarm": bool(self.rows and self.rows[-1]["alarm"]),
            "chain_height": self.chain.head().height,
            "flow_mods": sum(sw.stats.flow_mods for sw in self.switches.values()),
            "flood_frames": sum(f.stats.emitted for f in self.floods),
            "host_rx": dict(sorted(self.host_rx.items())),
            "conservation_ok": all(conservation.values()),
            "intents": [i["intent_id"] for i in self.engine.list_intents()],
        }

    def write_outputs(self, out_dir: str) -> dict[str, str]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "trace": str(out / "trace.csv"),
            "events": str(out / "events.ndjson"),
            "chain": str(out / "chain.ndjson"),
            "summary": str(out / "summary.json"),
        }
        (out / "trace.csv").write_text(self.trace_csv())
        (out / "events.ndjson").write_text(self.events.to_ndjson())
        with open(paths["chain"], "w") as fh:
            export_chain(self.chain.state(0).ledger, fh)
        (out / "summary.json").write_text(
            json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return paths


def run_scenario(spec: ScenarioSpec,
                 out_dir: Optional[str] = None) -> ScenarioRuntime:
    runtime = ScenarioRuntime(spec).run()
    if out_dir is not None:
        runtime.write_outputs(out_dir)
    return runtime


# -- bundled scenarios ---------------------------------------------------------------------


def _bundle_root():
    return resources.files("flowledger") / "scenarios"


def scenario_names() -> list[str]:
    return sorted(p.name[:-5] for p in _bundle_root().iterdir()
                  if p.name.endswith(".json"))


def load_scenario(name_or_path: str) -> ScenarioSpec:
    """A bundled scenario name, or a path to a scenario file."""
    candidate = _bundle_root() / f"{name_or_path}.json"
    if candidate.is_file():
        return ScenarioSpec.loads(candidate.read_text())
    if Path(name_or_path).is_file():
        return ScenarioSpec.load(name_or_path)
    raise FileNotFoundError(
        f"no scenario named {name_or_path!r}; bundled: {', '.join(scenario_names())}")
