"""Deterministic network simulation: switches, hosts, controllers, attacks."""

from flowledger.simnet.topology import (
    Frame,
    Host,
    Link,
    Topology,
    default_topology,
)

__all__ = ["Frame", "Host", "Link", "Topology", "default_topology"]
