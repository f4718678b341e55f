"""Intent engine: declarative operator goals driven to closure.

An operator states what they want ("protect this service, prefer performance";
"remove that device"), not which rules to install.  The engine translates the
intent into a policy, provisions the policy's actions through an enactor,
then validates the outcome after a settling window.  Protection intents that
fail validation escalate one defense stage at a time; the final stage failing
marks the intent failed rather than silently weakening the check.

Every lifecycle step leaves a transaction on the chain: the intent itself, its
translation, each provisioned policy, each installed flow rule, and each
validation verdict, so the closed loop is auditable after the fact.
"""

from __future__ import annotations

import enum
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Protocol

from flowledger.actions import (
    Action,
    Detect,
    Evict,
    InstallFlow,
    Remap,
    action_to_doc,
)
from flowledger.chain.ledger import TxKind
from flowledger.chain.network import ChainNetwork
from flowledger.guard import (
    AttackReport,
    GuardMonitor,
    defense_isolate,
    defense_limit_link,
    defense_limit_sources,
)
from flowledger.scheduler import Scheduler, s_to_us
from flowledger.simnet.topology import Topology

log = logging.getLogger(__name__)

SUBMITTER = "intent-engine"
PATH_PRIORITY = 50  # explicit path rules beat learned entries, lose to drops
ANY_TARGET = "*"


class Verb(str, enum.Enum):
    PROTECT_SERVICE = "protect_service"
    LIMIT_TRAFFIC = "limit_traffic"
    REMOVE_DEVICE = "remove_device"
    RECALCULATE_PATHS = "recalculate_paths"


_PROTECTION_VERBS = frozenset({Verb.PROTECT_SERVICE, Verb.LIMIT_TRAFFIC})


class Preference(str, enum.Enum):
    MAX_PERFORMANCE = "max_performance"
    MAX_PROTECTION = "max_protection"
    NONE = "none"


class IntentStatus(str, enum.Enum):
    RECEIVED = "received"
    TRANSLATED = "translated"
    PROVISIONED = "provisioned"
    VALIDATED = "validated"
    FAILED = "failed"


class Verdict(str, enum.Enum):
    MET = "met"
    NOT_MET = "not_met"
    ADJUSTED = "adjusted"  # not met, but another stage was available


class PlanStage(enum.IntEnum):
    STABLE = 1
    ATTACK_DETECTED = 2
    LIMIT_LINK = 3
    LIMIT_SOURCES = 4
    ISOLATE_FLOW = 5


_STAGE_NAMES = {
    PlanStage.STABLE: "stable",
    PlanStage.ATTACK_DETECTED: "attack_detected",
    PlanStage.LIMIT_LINK: "limit_link",
    PlanStage.LIMIT_SOURCES: "limit_sources",
    PlanStage.ISOLATE_FLOW: "isolate_flow",
}


class UnknownTarget(ValueError):
    """The intent names an element or service address nobody knows about."""


class NoFeasiblePolicy(RuntimeError):
    """No policy can satisfy the intent, e.g. removing the only controller."""


class Views(Protocol):
    """Read-only snapshots of the running network the engine plans against."""

    def mapping(self) -> dict[str, str]: ...
    def controllers(self) -> list[str]: ...
    def topology(self) -> Topology: ...


@dataclass(frozen=True)
class Intent:
    intent_id: str
    verb: Verb
    target: str  # element id, or a service (host) address
    preference: Preference
    submitted_at_us: int

    def to_doc(self) -> dict:
        return {
            "intent_id": self.intent_id,
            "verb": self.verb.value,
            "target": self.target,
            "preference": self.preference.value,
            "submitted_at_us": self.submitted_at_us,
        }


@dataclass(frozen=True)
class PlanStep:
    stage: PlanStage
    params: dict = field(default_factory=dict)
    # device intents carry concrete actions from translation; protection
    # stages synthesize theirs at provision time from the live attack report
    actions: Optional[tuple] = None

    def to_doc(self) -> dict:
        doc = {"stage": _STAGE_NAMES[self.stage], "params": dict(self.params)}
        if self.actions is not None:
            doc["actions"] = [action_to_doc(a) for a in self.actions]
        return doc


@dataclass
class ValidationReport:
    intent_id: str
    stage: PlanStage
    window_start_us: int
    window_end_us: int
    verdict: Verdict
    measured_fps: Optional[float] = None
    baseline_fps: Optional[float] = None
    target_fps: Optional[float] = None
    detail: str = ""
    adjustments: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.verdict is Verdict.MET

    def to_doc(self) -> dict:
        def r3(v):
            return None if v is None else round(v, 3)
        return {
            "intent_id": self.intent_id,
            "stage": _STAGE_NAMES[self.stage],
            "window_start_us": self.window_start_us,
            "window_end_us": self.window_end_us,
            "verdict": self.verdict.value,
            "measured_fps": r3(self.measured_fps),
            "baseline_fps": r3(self.baseline_fps),
            "target_fps": r3(self.target_fps),
            "detail": self.detail,
            "adjustments": list(self.adjustments),
        }


@dataclass
class IntentConfig:
    validate_after_us: int = s_to_us(5)  # settling window per stage
    validation_samples: int = 10  # victim-traffic probes across the window
    validation_warmup: int = 2  # leading probes skipped: they still see pre-fix traffic
    target_factor: float = 1.5  # success: at most this multiple of baseline
    target_floor_fps: float = 20.0  # ... but quiet links pass on a flat floor
    mild_fraction: float = 0.8  # protection ladder's low-collateral first limit
    aggressive_fraction: float = 0.05  # performance profile's hard first limit
    srcs_cap: int = 512  # per-source drop rule budget for the middle stage


# -- pure planning --------------------------------------------------------------------


def translate(preference: Preference, cfg: IntentConfig) -> list[PlanStep]:
    """Preference to escalation schedule; pure.

    Performance profile opens with a hard limit so one rule usually suffices;
    the protection profile opens gently, then spends rules on finding and
    isolating the attackers.  Either escalates while stages remain.
    """
    if preference is Preference.MAX_PERFORMANCE:
        first = PlanStep(PlanStage.LIMIT_LINK,
                         {"fraction": cfg.aggressive_fraction})
    elif preference is Preference.MAX_PROTECTION:
        # deep inspection runs from the first stage, so the isolation stage
        # has a full ledger of offending flows to draw from
        first = PlanStep(PlanStage.LIMIT_LINK,
                         {"fraction": cfg.mild_fraction, "detect": True})
    else:
        return [PlanStep(PlanStage.LIMIT_LINK, {"fraction": cfg.mild_fraction})]
    return [
        first,
        PlanStep(PlanStage.LIMIT_SOURCES, {"cap": cfg.srcs_cap}),
        PlanStep(PlanStage.ISOLATE_FLOW, {}),
    ]


def plan_device_removal(target: str, mapping: dict[str, str],
                        controllers: list[str]) -> list[Action]:
    """Eviction plan for a controller or switch; pure given the views.

    Removing a controller remaps every switch it served onto the first
    surviving controller (deterministic pick); removing the only controller
    is infeasible.  Switch removal is a bare eviction, path repair is the
    caller's (path planner's) job.
    """
    if target in controllers or target in mapping.values():
        survivors = sorted(c for c in controllers if c != target)
        if not survivors:
            raise NoFeasiblePolicy(f"{target} is the only controller")
        actions: list[Action] = [Evict(target, reason="intent")]
        for switch_id in sorted(s for s, c in mapping.items() if c == target):
            actions.append(Remap(switch_id, survivors[0]))
        return actions
    return [Evict(target, reason="intent")]


def switch_path(topo: Topology, src: str, dst: str,
                exclude: frozenset[str] = frozenset()) -> Optional[list[str]]:
    """Shortest switch-only path, ties broken by lowest node id sequence."""
    alive = set(topo.switches) - set(exclude)
    if src not in alive or dst not in alive:
        return None
    if src == dst:
        return [src]
    parent: dict[str, str] = {src: src}
    queue = deque([src])
    while queue:
        node = queue.popleft()
        # sorted expansion makes parent chains lexicographically smallest
        for peer in sorted(p for p, _pp in topo.ports[node].values()
                           if p in alive and p not in parent):
            parent[peer] = node
            if peer == dst:
                path = [dst]
                while path[-1] != src:
                    path.append(parent[path[-1]])
                return path[::-1]
            queue.append(peer)
    return None


def plan_paths(topo: Topology, exclude: frozenset[str] = frozenset()
               ) -> dict[tuple[str, str], tuple[str, ...]]:
    """Switch path for every ordered reachable host pair; pure."""
    hosts = sorted(topo.hosts.values(), key=lambda h: h.host_id)
    paths: dict[tuple[str, str], tuple[str, ...]] = {}
    cache: dict[tuple[str, str], Optional[list[str]]] = {}
    for src in hosts:
        for dst in hosts:
            if dst.host_id == src.host_id:
                continue
            key = (src.switch_id, dst.switch_id)
            if key not in cache:
                cache[key] = switch_path(topo, key[0], key[1], exclude)
            if cache[key] is not None:
                paths[(src.host_id, dst.host_id)] = tuple(cache[key])
    return paths


def _port_toward(topo: Topology, node: str, peer: str) -> int:
    for port, (p, _pp) in sorted(topo.ports[node].items()):
        if p == peer:
            return port
    raise KeyError(f"{node} has no port toward {peer}")


def path_flows(topo: Topology,
               paths: dict[tuple[str, str], tuple[str, ...]],
               previous: Optional[dict[tuple[str, str], tuple[str, ...]]],
               ) -> list[InstallFlow]:
    """Flow rules realizing every path that differs from the previous plan.

    An unchanged pair contributes nothing, so recalculating over an unchanged
    topology is a fixed point with an empty diff.
    """
    flows: list[InstallFlow] = []
    for pair in sorted(paths):
        if previous is not None and previous.get(pair) == paths[pair]:
            continue
        src = topo.hosts[pair[0]]
        dst = topo.hosts[pair[1]]
        hops = paths[pair]
        for i, sw in enumerate(hops):
            if i + 1 < len(hops):
                out_port = _port_toward(topo, sw, hops[i + 1])
            else:
                out_port = dst.port
            flows.append(InstallFlow(
                switch_id=sw,
                match={"ipv4_src": src.ip, "ipv4_dst": dst.ip},
                priority=PATH_PRIORITY,
                forward=f"output:{out_port}",
            ))
    return flows


# -- engine ----------------------------------------------------------------------------


class Enactor(Protocol):
    def enact(self, action: Action) -> bool: ...


@dataclass
class _IntentState:
    intent: Intent
    status: IntentStatus
    plan: list[PlanStep] = field(default_factory=list)
    stage_idx: int = -1
    attack: Optional[AttackReport] = None
    validations: list[ValidationReport] = field(default_factory=list)
    enacted: list[Action] = field(default_factory=list)
    partial_failures: list[dict] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    samples: list[float] = field(default_factory=list)
    window_start_us: int = 0
    error: Optional[str] = None
    # path-plan updates to adopt once the stage provisions
    pending_paths: Optional[dict] = None
    pending_excluded: Optional[frozenset[str]] = None
    timer: Optional[object] = None


class IntentEngine:
    def __init__(self, scheduler: Scheduler, chain: ChainNetwork, guard: GuardMonitor,
                 enactor: Enactor, views: Optional[Views] = None,
                 config: Optional[IntentConfig] = None, event_sink=None) -> None:
        self.scheduler = scheduler
        self.chain = chain
        self.guard = guard
        self.enactor = enactor
        self.views = views
        self.cfg = config or IntentConfig()
        self._event_sink = event_sink
        self._intents: dict[str, _IntentState] = {}
        self._order: list[str] = []
        self._counter = 0
        # adopted path plan and exclusions, diffed against on recalculation
        self._paths: Optional[dict[tuple[str, str], tuple[str, ...]]] = None
        self._excluded: frozenset[str] = frozenset()

    # -- public api ------------------------------------------------------------------

    def submit(self, verb: Verb, target: str,
               preference: Preference = Preference.NONE) -> str:
        verb = Verb(verb)
        preference = Preference(preference)
        self._check_target(verb, target)
        self._counter += 1
        intent_id = f"intent-{self._counter}"
        intent = Intent(intent_id, verb, target, preference, self.scheduler.now_us)
        state = _IntentState(intent, IntentStatus.RECEIVED)
        self._intents[intent_id] = state
        self._order.append(intent_id)
        self._log(state, "received", intent.to_doc())
        self._tx(TxKind.INTENT, {"phase": "received", **intent.to_doc()})
        self._emit("intent_received", intent.to_doc())
        if verb in _PROTECTION_VERBS:
            report = self._matching_report(target, self.guard.alarm_reports)
            if report is not None:
                self._begin_protection(state, report)
        else:
            self._begin_device(state)
        return intent_id

    def on_alarm(self, reports: list[AttackReport]) -> None:
        """Wire the monitor's raised-alarm reports in; armed intents engage."""
        for intent_id in list(self._order):
            state = self._intents[intent_id]
            if (state.status is IntentStatus.RECEIVED
                    and state.intent.verb in _PROTECTION_VERBS):
                report = self._matching_report(state.intent.target, reports)
                if report is not None:
                    self._begin_protection(state, report)

    def report(self, intent_id: str) -> dict:
        state = self._intents.get(intent_id)
        if state is None:
            raise KeyError(intent_id)
        return {
            **state.intent.to_doc(),
            "status": state.status.value,
            "stage": _STAGE_NAMES[self.stage_of(state)],
            "error": state.error,
            "plan": [step.to_doc() for step in state.plan],
            "validations": [v.to_doc() for v in state.validations],
            "enacted": [action_to_doc(a) for a in state.enacted],
            "partial_failures": list(state.partial_failures),
            "attack": None if state.attack is None else state.attack.to_doc(),
            "history": list(state.history),
        }

    def list_intents(self) -> list[dict]:
        return [self.report(intent_id) for intent_id in self._order]

    def stage_of(self, state: _IntentState) -> PlanStage:
        if state.status in (IntentStatus.VALIDATED, IntentStatus.FAILED):
            return PlanStage.STABLE  # resolution returns to stable
        if 0 <= state.stage_idx < len(state.plan):
            return state.plan[state.stage_idx].stage
        if state.attack is not None:
            return PlanStage.ATTACK_DETECTED
        return PlanStage.STABLE

    def current_stage(self) -> PlanStage:
        best = PlanStage.STABLE
        for state in self._intents.values():
            if state.status not in (IntentStatus.VALIDATED, IntentStatus.FAILED):
                best = max(best, self.stage_of(state))
        if best is PlanStage.STABLE and self.guard.alarm is not None:
            best = PlanStage.ATTACK_DETECTED
        return best

    # -- submission checks ------------------------------------------------------------

    def _check_target(self, verb: Verb, target: str) -> None:
        if not target:
            raise UnknownTarget("empty target")
        if self.views is None:
            if verb not in _PROTECTION_VERBS:
                raise UnknownTarget(f"{target}: no topology view to plan against")
            return
        topo = self.views.topology()
        if verb in _PROTECTION_VERBS:
            if topo.host_by_ip(target) is None:
                raise UnknownTarget(target)
        elif verb is Verb.REMOVE_DEVICE:
            mapping = self.views.mapping()
            known = (set(self.views.controllers()) | set(mapping)
                     | set(mapping.values()) | set(topo.switches))
            if target not in known:
                raise UnknownTarget(target)
        elif verb is Verb.RECALCULATE_PATHS:
            if target != ANY_TARGET and target not in topo.switches:
                raise UnknownTarget(target)

    @staticmethod
    def _matching_report(target: str,
                         reports: list[AttackReport]) -> Optional[AttackReport]:
        for report in reports:
            if report.victim_ip == target:
                return report
        return None

    # -- protection lifecycle -----------------------------------------------------------

    def _begin_protection(self, state: _IntentState, report: AttackReport) -> None:
        state.attack = report
        state.status = IntentStatus.TRANSLATED
        state.plan = translate(state.intent.preference, self.cfg)
        doc = {
            "phase": "translated",
            "intent_id": state.intent.intent_id,
            "plan": [step.to_doc() for step in state.plan],
            "attack": report.to_doc(),
        }
        self._log(state, "translated", doc)
        self._tx(TxKind.INTENT, doc)
        self._emit("intent_translated", doc)
        self._provision(state)

    def _begin_device(self, state: _IntentState) -> None:
        try:
            step = self._plan_device(state)
        except NoFeasiblePolicy as exc:
            state.status = IntentStatus.FAILED
            state.error = str(exc)
            doc = {"phase": "failed", "intent_id": state.intent.intent_id,
                   "error": "no_feasible_policy", "detail": str(exc)}
            self._log(state, "failed", doc)
            self._tx(TxKind.INTENT, doc)
            self._emit("intent_failed", doc)
            return
        state.plan = [step]
        state.status = IntentStatus.TRANSLATED
        doc = {
            "phase": "translated",
            "intent_id": state.intent.intent_id,
            "plan": [step.to_doc()],
        }
        self._log(state, "translated", doc)
        self._tx(TxKind.INTENT, doc)
        self._emit("intent_translated", doc)
        self._provision(state)

    def _plan_device(self, state: _IntentState) -> PlanStep:
        intent = state.intent
        topo = self.views.topology()
        previous = self._paths if self._paths is not None \
            else plan_paths(topo, self._excluded)
        excluded = set(self._excluded)
        actions: list[Action] = []
        if intent.verb is Verb.REMOVE_DEVICE:
            actions.extend(plan_device_removal(
                intent.target, self.views.mapping(), self.views.controllers()))
            if intent.target in topo.switches:
                excluded.add(intent.target)
        elif intent.target != ANY_TARGET:
            excluded.add(intent.target)
        new_paths = plan_paths(topo, frozenset(excluded))
        actions.extend(path_flows(topo, new_paths, previous))
        state.pending_paths = new_paths
        state.pending_excluded = frozenset(excluded)
        return PlanStep(PlanStage.STABLE, {"excluded": sorted(excluded)},
                        tuple(actions))

    def _provision(self, state: _IntentState) -> None:
        state.stage_idx += 1
        step = state.plan[state.stage_idx]
        if step.actions is not None:
            actions = list(step.actions)
        else:
            reports = self.guard.refresh_alarm(self.scheduler.now_us)
            report = self._matching_report(state.intent.target, reports)
            if report is not None:
                state.attack = report
            actions = self._synthesize(step, state.attack)
        doc = {
            "intent_id": state.intent.intent_id,
            "stage": _STAGE_NAMES[step.stage],
            "params": dict(step.params),
            "actions": [action_to_doc(a) for a in actions],
        }
        self._tx(TxKind.POLICY, doc)
        for index, action in enumerate(actions):
            if self.enactor.enact(action):
                state.enacted.append(action)
                if isinstance(action, InstallFlow):
                    self._tx(TxKind.FLOW_TABLE, action_to_doc(action))
            else:
                failure = {"stage": _STAGE_NAMES[step.stage], "index": index,
                           "action": action_to_doc(action)}
                state.partial_failures.append(failure)
                self._emit("partial_failure",
                           {"intent_id": state.intent.intent_id, **failure})
        if state.pending_paths is not None:
            self._paths = state.pending_paths
            self._excluded = state.pending_excluded or self._excluded
            state.pending_paths = None
            state.pending_excluded = None
        state.status = IntentStatus.PROVISIONED
        state.window_start_us = self.scheduler.now_us
        state.samples = []
        self._log(state, "provisioned", doc)
        self._emit("stage_provisioned", doc)
        log.info("%s: provisioned %s with %d action(s)",
                 state.intent.intent_id, _STAGE_NAMES[step.stage], len(actions))
        if state.intent.verb in _PROTECTION_VERBS:
            interval = max(1, self.cfg.validate_after_us
                           // max(1, self.cfg.validation_samples))
            for k in range(self.cfg.validation_warmup + 1,
                           self.cfg.validation_samples + 1):
                self.scheduler.after(
                    k * interval,
                    lambda s=state, idx=state.stage_idx: self._sample(s, idx))
        state.timer = self.scheduler.after(
            self.cfg.validate_after_us, lambda: self._validate(state))

    def _synthesize(self, step: PlanStep, report: Optional[AttackReport]) -> list:
        if report is None:
            return []
        if step.stage is PlanStage.LIMIT_LINK:
            actions = defense_limit_link(report, step.params["fraction"])
            if step.params.get("detect"):
                actions = [Detect("*")] + actions
            return actions
        if step.stage is PlanStage.LIMIT_SOURCES:
            return defense_limit_sources(report, step.params["cap"],
                                         self.guard.known_hosts)
        if step.stage is PlanStage.ISOLATE_FLOW:
            flows = (self.guard.offender_flows(report.victim_ip)
                     if report.victim_ip else [])
            return defense_isolate(report, flows, self.guard.known_hosts)
        return []

    def _sample(self, state: _IntentState, stage_idx: int) -> None:
        if state.status is IntentStatus.PROVISIONED and state.stage_idx == stage_idx:
            state.samples.append(self.guard.victim_traffic_fps(
                state.intent.target, self.scheduler.now_us))

    def _validate(self, state: _IntentState) -> None:
        now = self.scheduler.now_us
        step = state.plan[state.stage_idx]
        if state.intent.verb in _PROTECTION_VERBS:
            samples = state.samples or [
                self.guard.victim_traffic_fps(state.intent.target, now)]
            measured = sum(samples) / len(samples)
            baseline = state.attack.victim_baseline_fps if state.attack else 0.0
            target_fps = max(self.cfg.target_factor * baseline,
                             self.cfg.target_floor_fps)
            ok = measured <= target_fps
            detail = f"victim traffic over {len(samples)} probe(s)"
        else:
            measured = baseline = target_fps = None
            ok, detail = self._device_outcome(state)
        can_escalate = state.stage_idx + 1 < len(state.plan)
        verdict = Verdict.MET if ok else (
            Verdict.ADJUSTED if can_escalate else Verdict.NOT_MET)
        report = ValidationReport(
            state.intent.intent_id, step.stage, state.window_start_us, now,
            verdict, measured, baseline, target_fps, detail)
        if verdict is Verdict.ADJUSTED:
            report.adjustments = [
                _STAGE_NAMES[state.plan[state.stage_idx + 1].stage]]
        state.validations.append(report)
        self._log(state, "validated", report.to_doc())
        self._tx(TxKind.INTENT, {"phase": "validated", **report.to_doc()})
        self._emit("intent_validated", report.to_doc())
        if ok:
            state.status = IntentStatus.VALIDATED
            doc = {"phase": "fulfilled", "intent_id": state.intent.intent_id,
                   "stage": _STAGE_NAMES[step.stage], "t_us": now}
            self._log(state, "fulfilled", doc)
            self._tx(TxKind.INTENT, doc)
            self._emit("intent_fulfilled", doc)
        elif can_escalate:
            self._emit("stage_escalated", {
                "intent_id": state.intent.intent_id,
                "from": _STAGE_NAMES[step.stage],
                "to": _STAGE_NAMES[state.plan[state.stage_idx + 1].stage],
            })
            self._provision(state)
        else:
            state.status = IntentStatus.FAILED
            state.error = "validation_not_met"
            doc = {"phase": "failed", "intent_id": state.intent.intent_id,
                   "stage": _STAGE_NAMES[step.stage], "t_us": now,
                   "measured_fps": None if measured is None else round(measured, 3)}
            self._log(state, "failed", doc)
            self._tx(TxKind.INTENT, doc)
            self._emit("intent_failed", doc)

    def _device_outcome(self, state: _IntentState) -> tuple[bool, str]:
        if state.partial_failures:
            return False, f"{len(state.partial_failures)} action(s) failed"
        if state.intent.verb is Verb.REMOVE_DEVICE and self.views is not None:
            mapping = self.views.mapping()
            present = (state.intent.target in self.views.controllers()
                       or state.intent.target in mapping
                       or state.intent.target in mapping.values())
            if present:
                return False, "target still present in the running mapping"
        return True, "all actions applied"

    # -- plumbing -------------------------------------------------------------------

    def _tx(self, kind: TxKind, doc: dict) -> None:
        self.chain.submit_tx(kind, doc, SUBMITTER)

    def _emit(self, kind: str, payload: dict) -> None:
        if self._event_sink is not None:
            self._event_sink(kind, payload)

    def _log(self, state: _IntentState, phase: str, doc: dict) -> None:
        state.history.append(
            {"phase": phase, "t_us": self.scheduler.now_us, "doc": doc})
