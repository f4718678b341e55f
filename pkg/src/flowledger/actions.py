"""Action vocabulary shared by the anomaly monitor, intent engine and runtime.

The monitor synthesizes these, the intent engine provisions them, the runtime
enacts them, and the chain stores them (as JSON docs inside policy/intent
transactions), so the vocabulary lives in one neutral module.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

from flowledger.ofwire import messages as m


def _mac_field(value):
    # Rule docs carry macs as "aa:bb:.." strings; the codec wants integers.
    if isinstance(value, str):
        return m.mac_int(value)
    return value


def _ip_field(value):
    # Dotted-quad string means an exact host match; tuples pass through.
    if isinstance(value, str):
        return (m.ipv4_int(value), 32)
    if isinstance(value, (tuple, list)) and isinstance(value[0], str):
        return (m.ipv4_int(value[0]), value[1])
    return tuple(value) if isinstance(value, list) else value


@dataclass(frozen=True)
class InstallFlow:
    """Install a flow rule on a switch (typically a drop for attack traffic)."""

    switch_id: str
    match: dict  # subset match fields: in_port, eth_src, eth_dst, ipv4_src, ipv4_dst
    priority: int
    forward: str  # "drop" | "flood" | "output:<port>"
    idle_timeout_s: int = 0
    hard_timeout_s: int = 0

    kind = "install_flow"

    def to_of_match(self) -> m.Match:
        f = self.match
        return m.Match(
            in_port=f.get("in_port"),
            eth_src=_mac_field(f.get("eth_src")),
            eth_dst=_mac_field(f.get("eth_dst")),
            ipv4_src=_ip_field(f.get("ipv4_src")),
            ipv4_dst=_ip_field(f.get("ipv4_dst")),
        )

    def to_of_actions(self) -> tuple:
        if self.forward == "drop":
            return (m.Drop(),)
        if self.forward == "flood":
            return (m.Flood(),)
        if self.forward.startswith("output:"):
            return (m.Output(int(self.forward.split(":", 1)[1])),)
        raise ValueError(f"unknown forward spec: {self.forward}")

    def to_flow_mod(self, xid: int) -> m.OfMessage:
        return m.flow_mod(xid, self.to_of_match(), self.priority, self.to_of_actions(),
                          self.idle_timeout_s, self.hard_timeout_s)


@dataclass(frozen=True)
class RateLimit:
    """Cap the packet rate entering a switch port (link-level shaping)."""

    switch_id: str
    port: int
    limit_fps: float

    kind = "rate_limit"


@dataclass(frozen=True)
class Detect:
    """Arm deep inspection on a switch so sources can be checked against the
    known-host inventory."""

    switch_id: str  # "*" arms every switch
    enabled: bool = True

    kind = "detect"


@dataclass(frozen=True)
class Remap:
    switch_id: str
    controller_id: str

    kind = "remap"


@dataclass(frozen=True)
class Evict:
    element_id: str
    reason: str

    kind = "evict"


Action = Union[InstallFlow, RateLimit, Detect, Remap, Evict]

_KINDS = {cls.kind: cls for cls in (InstallFlow, RateLimit, Detect, Remap, Evict)}


def action_to_doc(action: Action) -> dict:
    doc = {"kind": action.kind}
    for name in action.__dataclass_fields__:
        doc[name] = getattr(action, name)
    return doc


def action_from_doc(doc: dict) -> Action:
    kind = doc.get("kind")
    cls = _KINDS.get(kind)
    if cls is None:
        raise ValueError(f"unknown action kind: {kind}")
    fields = {k: v for k, v in doc.items() if k != "kind"}
    return cls(**fields)
