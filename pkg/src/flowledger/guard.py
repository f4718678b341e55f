"""Anomaly monitor for the control plane: baseline, trigger, attribution.

Detection runs on the controller-bound packet-in rate, because a flood of
unknown flows manifests as table misses long before any single link saturates.
Attribution runs on the per-switch flow samples pushed through the relay's
monitoring path: destinations carrying a dominant share of traffic are the
victims, the ports feeding them are the ingress set, and source dispersal
separates a spoofed flood from a noisy-but-legitimate sender.

The monitor only observes and synthesizes candidate countermeasures; deciding
when to enact them (and how far to escalate) belongs to the intent engine or
to the standalone auto-blocker.
"""

from __future__ import annotations

import io
import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

from flowledger.actions import Detect, InstallFlow, RateLimit
from flowledger.middleware import TrafficSample
from flowledger.ofwire.messages import ipv4_str
from flowledger.scheduler import US_PER_S

log = logging.getLogger(__name__)


@dataclass
class GuardConfig:
    window_us: int = US_PER_S  # 1 s evaluation window
    k_factor: float = 5.0  # trigger at k x baseline ...
    min_trigger_fps: float = 20.0  # ... but never below this floor
    warmup_evals: int = 4  # learn-only evaluations: 2 s of baseline first
    sustain_evals: int = 2  # consecutive over-threshold evaluations (0.5 s apart)
    clear_evals: int = 2  # consecutive under-threshold evaluations to stand down
    baseline_windows: int = 10  # trailing clean windows averaged into the baseline
    victim_share: float = 0.25  # a victim destination must carry this share
    dispersal_ratio: float = 0.5  # distinct sources > ratio x victim packets
    service_cost_s: float = 0.001  # controller work per packet-in, for load
    offender_cap: int = 65536  # max accumulated offender flow keys


@dataclass
class AttackReport:
    t_us: int
    packet_in_fps: float
    baseline_fps: float
    threshold_fps: float
    victim_ip: Optional[str]
    victim_share: float
    victim_baseline_fps: float
    ingress_links: list[tuple[str, int, float]]  # (switch, port, pps) ranked
    top_sources: list[tuple[str, float]]
    distinct_sources: int
    dispersed: bool

    @property
    def ingress_switch(self) -> Optional[str]:
        return self.ingress_links[0][0] if self.ingress_links else None

    @property
    def ingress_port(self) -> Optional[int]:
        return self.ingress_links[0][1] if self.ingress_links else None

    @property
    def ingress_pps(self) -> float:
        return self.ingress_links[0][2] if self.ingress_links else 0.0

    def to_doc(self) -> dict:
        return {
            "t_us": self.t_us,
            "packet_in_fps": round(self.packet_in_fps, 3),
            "baseline_fps": round(self.baseline_fps, 3),
            "threshold_fps": round(self.threshold_fps, 3),
            "victim_ip": self.victim_ip,
            "victim_share": round(self.victim_share, 4),
            "victim_baseline_fps": round(self.victim_baseline_fps, 3),
            "ingress_links": [[sw, port, round(pps, 3)]
                              for sw, port, pps in self.ingress_links[:8]],
            "top_sources": [[ip, round(pps, 3)] for ip, pps in self.top_sources[:16]],
            "distinct_sources": self.distinct_sources,
            "dispersed": self.dispersed,
        }


@dataclass
class TraceRow:
    t_s: float
    packet_in_rate: float
    controller_load: float
    link_id: str
    byte_rate: float


class MetricsTrace:
    """Time series of control-plane health, exportable as CSV.

    Annotations (attack start, defense installs, stage changes) ride alongside
    the rows rather than inside the CSV, keeping the column schema stable.
    """

    HEADER = "t_s,packet_in_rate,controller_load,link_id,byte_rate"

    def __init__(self) -> None:
        self.rows: list[TraceRow] = []
        self.annotations: list[tuple[float, str, str]] = []  # (t_s, kind, text)

    def add(self, row: TraceRow) -> None:
        self.rows.append(row)

    def annotate(self, t_s: float, kind: str, text: str) -> None:
        self.annotations.append((t_s, kind, text))

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(self.HEADER + "\n")
        for r in self.rows:
            out.write(f"{r.t_s:.3f},{r.packet_in_rate:.3f},{r.controller_load:.4f},"
                      f"{r.link_id},{r.byte_rate:.1f}\n")
        return out.getvalue()

    def write_csv(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())


class GuardMonitor:
    def __init__(self, config: Optional[GuardConfig] = None,
                 event_sink=None) -> None:
        self.cfg = config or GuardConfig()
        self._event_sink = event_sink
        self._packet_ins: deque[tuple[int, Optional[str]]] = deque()
        self._samples: dict[str, deque[TrafficSample]] = {}
        self._clean_rates: deque[float] = deque(maxlen=self.cfg.baseline_windows)
        self._evals = 0
        self._over = 0
        self._under = 0
        self.alarm: Optional[AttackReport] = None
        self.alarm_reports: list[AttackReport] = []
        self.known_hosts: Optional[frozenset[str]] = None
        self._deep_inspection = False
        # victim ip -> (switch, in_port, src int) -> packets, gathered while the
        # alarm is up and deep inspection armed; feeds exact flow isolation
        self._offenders: dict[str, dict[tuple[str, int, int], int]] = {}
        # victim ip -> pre-attack rate, frozen at first attribution so later
        # refreshes do not inherit an attack-polluted baseline
        self._victim_base: dict[str, float] = {}
        self._host_ports: dict[str, tuple[str, int]] = {}  # ip -> (switch, port)
        self.stale_samples = 0
        self.trace = MetricsTrace()

    # -- ingestion -------------------------------------------------------------------

    def note_packet_in(self, switch_id: str, controller_id: Optional[str],
                       t_us: int) -> None:
        self._packet_ins.append((t_us, controller_id))

    def ingest_sample(self, sample: TrafficSample) -> None:
        per_switch = self._samples.setdefault(sample.switch_id, deque(maxlen=8))
        if per_switch and sample.t_us < per_switch[-1].t_us:
            self.stale_samples += 1
            return
        per_switch.append(sample)
        if self._deep_inspection and self.alarm is not None:
            self._accumulate_offenders(sample)

    def set_host_location(self, ip: str, switch_id: str, port: int) -> None:
        """Host attachment map; lets victim-directed traffic be measured at the
        victim's own access switch instead of double-counted across hops."""
        self._host_ports[ip] = (switch_id, port)

    def arm_deep_inspection(self, known_hosts: frozenset[str]) -> None:
        self._deep_inspection = True
        self.known_hosts = known_hosts

    def _accumulate_offenders(self, sample: TrafficSample) -> None:
        victims = {r.victim_ip for r in self.alarm_reports if r.victim_ip}
        if not victims:
            return
        for (in_port, src, dst), pkts in sample.flows.items():
            dst_ip = ipv4_str(dst)
            if dst_ip not in victims:
                continue
            ledger = self._offenders.setdefault(dst_ip, {})
            if len(ledger) >= self.cfg.offender_cap:
                continue
            key = (sample.switch_id, in_port, src)
            ledger[key] = ledger.get(key, 0) + pkts

    def offender_flows(self, victim_ip: str) -> list[tuple[str, int, str, int]]:
        """(switch, in_port, src ip, packets) accumulated since deep inspection
        was armed, heaviest first."""
        ledger = self._offenders.get(victim_ip, {})
        ranked = sorted(ledger.items(), key=lambda kv: (-kv[1], kv[0]))
        return [(sw, port, ipv4_str(src), pkts) for (sw, port, src), pkts in ranked]

    # -- windowed views ----------------------------------------------------------------

    def _prune(self, now_us: int) -> None:
        horizon = now_us - self.cfg.window_us
        while self._packet_ins and self._packet_ins[0][0] <= horizon:
            self._packet_ins.popleft()

    def packet_in_fps(self, now_us: int) -> float:
        self._prune(now_us)
        return len(self._packet_ins) / (self.cfg.window_us / US_PER_S)

    def controller_load(self, now_us: int) -> float:
        """Utilization of the busiest controller over the window, capped at 1."""
        self._prune(now_us)
        per: dict[Optional[str], int] = {}
        for _t, cid in self._packet_ins:
            per[cid] = per.get(cid, 0) + 1
        if not per:
            return 0.0
        window_s = self.cfg.window_us / US_PER_S
        return min(1.0, max(per.values()) / window_s * self.cfg.service_cost_s)

    @property
    def baseline_fps(self) -> float:
        if not self._clean_rates:
            return 0.0
        return sum(self._clean_rates) / len(self._clean_rates)

    @property
    def threshold_fps(self) -> float:
        return max(self.cfg.k_factor * self.baseline_fps, self.cfg.min_trigger_fps)

    def _window_flows(self, now_us: int) -> list[tuple[str, int, int, int, int]]:
        """(switch, in_port, src, dst, packets) for samples inside the window."""
        horizon = now_us - self.cfg.window_us
        rows = []
        for switch_id, samples in self._samples.items():
            for s in samples:
                if s.t_us <= horizon or s.t_us > now_us:
                    continue
                for (in_port, src, dst), pkts in s.flows.items():
                    rows.append((switch_id, in_port, src, dst, pkts))
        return rows

    def _busiest_link(self, now_us: int) -> tuple[str, float]:
        horizon = now_us - self.cfg.window_us
        totals: dict[str, int] = {}
        for switch_id, samples in self._samples.items():
            for s in samples:
                if s.t_us <= horizon or s.t_us > now_us:
                    continue
                for port, nbytes in s.port_rx_bytes.items():
                    key = f"{switch_id}:{port}"
                    totals[key] = totals.get(key, 0) + nbytes
        if not totals:
            return "-", 0.0
        link = max(totals, key=lambda k: (totals[k], k))
        return link, totals[link] / (self.cfg.window_us / US_PER_S)

    @staticmethod
    def _victim_pkts(sample: TrafficSample, victim_ip: str,
                     access_port: Optional[int]) -> int:
        """Victim-bound frames in one sample: what the switch put on the
        victim's access link when it reports tx counters (drops already
        applied), else the victim-directed ingest flows."""
        if access_port is not None and sample.port_tx_packets:
            return sample.port_tx_packets.get(access_port, 0)
        return sum(n for (_p, _src, dst), n in sample.flows.items()
                   if ipv4_str(dst) == victim_ip)

    def victim_traffic_fps(self, victim_ip: str, now_us: int) -> float:
        """Traffic rate on the victim's access link, measured at the victim's
        home switch when the attachment is known, else the max over switches.
        Rates divide by the span the window's samples actually cover, so a
        probe landing just before a sample arrives is not undercounted."""
        home = self._host_ports.get(victim_ip)
        horizon = now_us - self.cfg.window_us
        best = 0.0
        for switch_id, samples in self._samples.items():
            if home is not None and switch_id != home[0]:
                continue
            access_port = home[1] if home is not None else None
            pkts = 0
            span = 0
            for s in samples:
                if s.t_us <= horizon:
                    continue
                span += s.interval_us
                pkts += self._victim_pkts(s, victim_ip, access_port)
            if span > 0:
                best = max(best, pkts / (span / US_PER_S))
        return best

    def _victim_baseline(self, victim_ip: str, now_us: int) -> float:
        """Victim-directed rate from samples at least two windows old, i.e.
        from before the flood crossed the trigger."""
        home = self._host_ports.get(victim_ip)
        horizon = now_us - 2 * self.cfg.window_us
        per_switch: dict[str, tuple[int, int]] = {}  # switch -> (pkts, span_us)
        for switch_id, samples in self._samples.items():
            access_port = home[1] if home is not None and home[0] == switch_id \
                else None
            pkts = 0
            span = 0
            for s in samples:
                if s.t_us > horizon:
                    continue
                span += s.interval_us
                pkts += self._victim_pkts(s, victim_ip, access_port)
            if span > 0:
                per_switch[switch_id] = (pkts, span)
        if home is not None and home[0] in per_switch:
            pkts, span = per_switch[home[0]]
            return pkts / (span / US_PER_S)
        rates = [pkts / (span / US_PER_S) for pkts, span in per_switch.values()]
        return max(rates) if rates else 0.0

    # -- evaluation -----------------------------------------------------------------

    def evaluate(self, now_us: int) -> list[AttackReport]:
        """Called once per sampling interval; returns the attributed reports
        when a new alarm is raised (transitions only), else an empty list."""
        rate = self.packet_in_fps(now_us)
        threshold = self.threshold_fps
        link_id, byte_rate = self._busiest_link(now_us)
        self.trace.add(TraceRow(now_us / US_PER_S, rate, self.controller_load(now_us),
                                link_id, byte_rate))

        self._evals += 1
        if self._evals <= self.cfg.warmup_evals:
            # the monitor must see normal operation before it can call anything
            # abnormal; warmup windows define the first baseline
            self._clean_rates.append(rate)
            return []

        if rate > threshold:
            self._over += 1
            self._under = 0
        else:
            self._under += 1
            self._over = 0
            # only clean windows feed the baseline, so attacks cannot drag it up
            if self.alarm is None:
                self._clean_rates.append(rate)

        if self.alarm is None:
            if self._over >= self.cfg.sustain_evals:
                reports = self._attribute(now_us, rate, threshold)
                self.alarm_reports = reports
                self.alarm = reports[0]
                log.info("alarm raised: %.1f f/s against threshold %.1f",
                         rate, threshold)
                if self._event_sink is not None:
                    for r in reports:
                        self._event_sink("alarm_raised", r.to_doc())
                return reports
        else:
            if self._under >= self.cfg.clear_evals:
                log.info("alarm cleared: %.1f f/s", rate)
                if self._event_sink is not None:
                    self._event_sink("alarm_cleared", {"t_us": now_us,
                                                       "packet_in_fps": round(rate, 3)})
                self.alarm = None
                self.alarm_reports = []
                self._offenders.clear()
                self._victim_base.clear()
        return []

    def refresh_alarm(self, now_us: int) -> list[AttackReport]:
        """Re-attribute the ongoing alarm against current traffic (used when the
        escalation ladder needs fresh ingress/source data mid-attack)."""
        if self.alarm is None:
            return []
        rate = self.packet_in_fps(now_us)
        self.alarm_reports = self._attribute(now_us, rate, self.threshold_fps)
        self.alarm = self.alarm_reports[0]
        return self.alarm_reports

    def _attribute(self, now_us: int, rate: float,
                   threshold: float) -> list[AttackReport]:
        """One report per dominant destination; if no destination clears the
        share bar the single report carries victim None (rate anomaly only)."""
        window_s = self.cfg.window_us / US_PER_S
        flows = self._window_flows(now_us)
        by_dst: dict[int, int] = {}
        total = 0
        for _sw, _port, _src, dst, pkts in flows:
            by_dst[dst] = by_dst.get(dst, 0) + pkts
            total += pkts

        victims = []
        if total > 0:
            ranked_dsts = sorted(by_dst.items(), key=lambda kv: (-kv[1], kv[0]))
            victims = [(dst, pkts) for dst, pkts in ranked_dsts
                       if pkts / total >= self.cfg.victim_share]

        if not victims:
            return [AttackReport(
                t_us=now_us, packet_in_fps=rate, baseline_fps=self.baseline_fps,
                threshold_fps=threshold, victim_ip=None, victim_share=0.0,
                victim_baseline_fps=0.0, ingress_links=[], top_sources=[],
                distinct_sources=0, dispersed=False,
            )]

        reports = []
        for victim, victim_pkts in victims:
            by_ingress: dict[tuple[str, int], int] = {}
            by_src: dict[int, int] = {}
            for sw, port, src, dst, pkts in flows:
                if dst != victim:
                    continue
                by_ingress[(sw, port)] = by_ingress.get((sw, port), 0) + pkts
                by_src[src] = by_src.get(src, 0) + pkts
            links = sorted(by_ingress.items(), key=lambda kv: (-kv[1], kv[0]))
            ranked = sorted(by_src.items(), key=lambda kv: (-kv[1], kv[0]))
            victim_ip = ipv4_str(victim)
            if victim_ip not in self._victim_base:
                self._victim_base[victim_ip] = self._victim_baseline(
                    victim_ip, now_us)
            reports.append(AttackReport(
                t_us=now_us,
                packet_in_fps=rate,
                baseline_fps=self.baseline_fps,
                threshold_fps=threshold,
                victim_ip=victim_ip,
                victim_share=victim_pkts / total,
                victim_baseline_fps=self._victim_base[victim_ip],
                ingress_links=[(sw, port, pkts / window_s)
                               for (sw, port), pkts in links],
                top_sources=[(ipv4_str(src), pkts / window_s)
                             for src, pkts in ranked[:1024]],
                distinct_sources=len(by_src),
                dispersed=len(by_src) > self.cfg.dispersal_ratio * victim_pkts,
            ))
        return reports


# -- countermeasure synthesis ------------------------------------------------------------

def defense_limit_link(report: AttackReport, fraction: float) -> list:
    """Shape the heaviest ingress link down to a fraction of its observed rate."""
    if report.ingress_switch is None:
        return []
    limit = max(1.0, report.ingress_pps * fraction)
    return [RateLimit(report.ingress_switch, report.ingress_port, limit)]


def defense_limit_sources(report: AttackReport, cap: int = 512,
                          known_hosts: Optional[frozenset[str]] = None) -> list:
    """Drop the top attacking source addresses, one rule each, and arm deep
    inspection so a further escalation can enumerate exact flows.  Sources in
    the known-host inventory are spared when one is given (a busy legitimate
    peer outranks any single spoofed address).  Bounded by cap: a rotating
    spoofed flood deliberately exhausts this stage."""
    if report.victim_ip is None:
        return []
    sources = report.top_sources
    if known_hosts is not None:
        sources = [(ip, pps) for ip, pps in sources if ip not in known_hosts]
    actions: list = [Detect("*")]
    for ip, _pps in sources[:cap]:
        actions.append(InstallFlow(
            switch_id=report.ingress_switch,
            match={"ipv4_src": ip},
            priority=100,
            forward="drop",
            idle_timeout_s=30,
        ))
    return actions


def defense_isolate(report: AttackReport,
                    offender_flows: list[tuple[str, int, str, int]],
                    known_hosts: Optional[frozenset[str]] = None,
                    cap: int = 2048) -> list:
    """Exact isolation: one drop rule per offending flow key (in_port + source
    + victim), installed where the flow was seen.  Sources absent from the
    host inventory are spoofed and always isolated; if everything looks like a
    real host, isolate the enumerated flows anyway (a real-source flood)."""
    if report.victim_ip is None:
        return []
    flows = offender_flows
    if known_hosts is not None:
        spoofed = [f for f in flows if f[2] not in known_hosts]
        if spoofed:
            flows = spoofed
    actions = []
    seen = set()
    for sw, in_port, src_ip, _pkts in flows[:cap]:
        key = (sw, in_port, src_ip)
        if key in seen:
            continue
        seen.add(key)
        actions.append(InstallFlow(
            switch_id=sw,
            match={"in_port": in_port, "ipv4_src": src_ip,
                   "ipv4_dst": report.victim_ip},
            priority=120,
            forward="drop",
            idle_timeout_s=30,
        ))
    return actions


def defense_block_ingress(report: AttackReport,
                          min_share: float = 0.05) -> list:
    """Victim-directed blocks on every port materially feeding the flood; the
    fast standalone countermeasure when no escalation ladder is driving."""
    if report.victim_ip is None or not report.ingress_links:
        return []
    total = sum(pps for _sw, _port, pps in report.ingress_links)
    actions = []
    for sw, port, pps in report.ingress_links:
        if pps < max(1.0, min_share * total):
            continue
        actions.append(InstallFlow(
            switch_id=sw,
            match={"in_port": port, "ipv4_dst": report.victim_ip},
            priority=120,
            forward="drop",
            idle_timeout_s=30,
        ))
    return actions


class AutoBlocker:
    """Standalone closed loop: alarm in, ingress blocks out.

    Fires once per victim per alarm episode; the escalation ladder is the
    intent engine's richer alternative, not layered on top of this."""

    def __init__(self, guard: GuardMonitor, enact: Callable[[object], bool],
                 on_installed=None) -> None:
        self.guard = guard
        self._enact = enact
        self._on_installed = on_installed
        self._defended: set[str] = set()
        self.installed: list[InstallFlow] = []

    def on_reports(self, reports: list[AttackReport]) -> None:
        if self.guard.alarm is None:
            self._defended.clear()
            return
        for report in reports:
            victim = report.victim_ip
            if victim is None or victim in self._defended:
                continue
            actions = defense_block_ingress(report)
            applied = [a for a in actions if self._enact(a)]
            if applied:
                self._defended.add(victim)
                self.installed.extend(applied)
                if self._on_installed is not None:
                    self._on_installed(report, applied)
