"""Network shape and the data-plane frame codec.

Frames carry just enough addressing for L2 learning and L3 match rules:
destination and source mac, source and destination address, and a sequence
number for loss accounting.  22 bytes on the wire.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from flowledger.ofwire.messages import ipv4_int, ipv4_str, mac_int, mac_str

FRAME = struct.Struct("!6s6sIIH")  # eth_dst, eth_src, ipv4_src, ipv4_dst, seq
FRAME_SIZE = FRAME.size  # 22


def _mac_bytes(mac: str) -> bytes:
    return mac_int(mac).to_bytes(6, "big")


@dataclass(frozen=True)
class Frame:
    eth_dst: str
    eth_src: str
    ipv4_src: str
    ipv4_dst: str
    seq: int = 0

    def encode(self) -> bytes:
        return FRAME.pack(_mac_bytes(self.eth_dst), _mac_bytes(self.eth_src),
                          ipv4_int(self.ipv4_src), ipv4_int(self.ipv4_dst),
                          self.seq & 0xFFFF)

    @classmethod
    def decode(cls, raw: bytes) -> "Frame":
        if len(raw) < FRAME_SIZE:
            raise ValueError(f"frame too short: {len(raw)} bytes")
        dst, src, ip_src, ip_dst, seq = FRAME.unpack(raw[:FRAME_SIZE])
        return cls(mac_str(int.from_bytes(dst, "big")),
                   mac_str(int.from_bytes(src, "big")),
                   ipv4_str(ip_src), ipv4_str(ip_dst), seq)


@dataclass(frozen=True)
class Host:
    host_id: str
    ip: str
    mac: str
    switch_id: str
    port: int  # the switch port this host hangs off


@dataclass(frozen=True)
class Link:
    link_id: str
    a: str
    a_port: int
    b: str
    b_port: int


class Topology:
    """Switches, hosts and links with stable deterministic port numbering."""

    def __init__(self) -> None:
        self.switches: list[str] = []
        self.hosts: dict[str, Host] = {}
        self.links: list[Link] = []
        self._next_port: dict[str, int] = {}
        # node -> {port: (peer, peer_port)}
        self.ports: dict[str, dict[int, tuple[str, int]]] = {}

    def add_switch(self, switch_id: str) -> None:
        if switch_id in self._next_port:
            raise ValueError(f"duplicate switch: {switch_id}")
        self.switches.append(switch_id)
        self._next_port[switch_id] = 1
        self.ports[switch_id] = {}

    def _take_port(self, node: str) -> int:
        port = self._next_port[node]
        self._next_port[node] = port + 1
        return port

    def add_link(self, a: str, b: str) -> Link:
        a_port = self._take_port(a)
        b_port = self._take_port(b)
        link = Link(f"{a}-{b}", a, a_port, b, b_port)
        self.links.append(link)
        self.ports[a][a_port] = (b, b_port)
        self.ports[b][b_port] = (a, a_port)
        return link

    def attach_host(self, host_id: str, ip: str, mac: str, switch_id: str) -> Host:
        port = self._take_port(switch_id)
        host = Host(host_id, ip, mac, switch_id, port)
        self.hosts[host_id] = host
        self.ports[switch_id][port] = (host_id, 0)
        self.ports.setdefault(host_id, {})[0] = (switch_id, port)
        return host

    def host_by_ip(self, ip: str) -> Optional[Host]:
        for host in self.hosts.values():
            if host.ip == ip:
                return host
        return None

    def peer(self, node: str, port: int) -> Optional[tuple[str, int]]:
        return self.ports.get(node, {}).get(port)

    def neighbors(self, node: str) -> list[str]:
        return sorted(peer for peer, _port in self.ports.get(node, {}).values())

    def shortest_path(self, src: str, dst: str) -> Optional[list[str]]:
        """BFS path; equal-length alternatives resolve to the lexicographically
        smallest neighbor expansion, so results are stable across runs."""
        if src == dst:
            return [src]
        if src not in self.ports or dst not in self.ports:
            return None
        parent: dict[str, str] = {src: src}
        queue = deque([src])
        while queue:
            node = queue.popleft()
            for neighbor in self.neighbors(node):
                if neighbor in parent:
                    continue
                parent[neighbor] = node
                if neighbor == dst:
                    path = [dst]
                    while path[-1] != src:
                        path.append(parent[path[-1]])
                    return path[::-1]
                queue.append(neighbor)
        return None

    def view(self) -> dict:
        return {
            "switches": list(self.switches),
            "hosts": [
                {"host_id": h.host_id, "ip": h.ip, "mac": h.mac,
                 "switch_id": h.switch_id, "port": h.port}
                for h in self.hosts.values()
            ],
            "links": [
                {"link_id": l.link_id, "a": l.a, "a_port": l.a_port,
                 "b": l.b, "b_port": l.b_port}
                for l in self.links
            ],
        }


DEFAULT_SWITCH_LINKS = [("s1", "s2"), ("s1", "s3"), ("s2", "s4"),
                        ("s2", "s5"), ("s3", "s6")]
DEFAULT_HOST_COUNT = 25


def default_topology() -> Topology:
    """Six switches in a tree, 25 hosts attached round-robin.

    h_i gets address 10.0.0.i and mac ..:00:ii, and hangs off switch
    s((i-1) % 6 + 1), so s3 serves h3, h9, h15, h21 and s6 serves h6, h12,
    h18, h24.
    """
    topo = Topology()
    for i in range(1, 7):
        topo.add_switch(f"s{i}")
    for a, b in DEFAULT_SWITCH_LINKS:
        topo.add_link(a, b)
    for i in range(1, DEFAULT_HOST_COUNT + 1):
        switch = f"s{(i - 1) % 6 + 1}"
        topo.attach_host(f"h{i}", f"10.0.0.{i}", mac_str(i), switch)
    return topo
