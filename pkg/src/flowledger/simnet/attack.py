"""Flood-traffic generator for exercising the detection and defense loop.

Sources are spoofed deterministically so identical scenarios replay exactly:
the n-th spoofed address is a pure function of n, not of an RNG stream.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

from flowledger.ofwire.messages import mac_str
from flowledger.scheduler import US_PER_S, Scheduler
from flowledger.simnet.topology import Frame, Host


def spoofed_ip(n: int) -> str:
    """Deterministic spoofed-source sequence: 172.16.0.1, 172.16.0.2, ..."""
    return f"172.16.{(n // 250) % 250}.{n % 250 + 1}"


def spoofed_mac(n: int) -> str:
    """Locally administered unicast macs, one per emitted frame."""
    return mac_str(0x02BD_0000_0000 | (n & 0xFF_FFFF_FFFF))


@dataclass
class FloodStats:
    emitted: int = 0
    distinct_sources: int = 0


class FloodSource:
    """Emits frames at a fixed aggregate rate toward one victim.

    attackers: compromised hosts the frames physically enter through (their
    real access ports).  pool: size of the spoofed source-address rotation,
    or None to never repeat an address.  The source mac is forged fresh on
    every frame regardless of the pool, so learned forwarding entries never
    start matching the flood and the controller keeps paying for each miss.
    """

    def __init__(self, scheduler: Scheduler, attackers: list[Host], victim: Host,
                 rate_fps: float, emit: Callable[[Host, bytes], None],
                 pool: Optional[int] = None) -> None:
        if not attackers:
            raise ValueError("flood needs at least one attacking host")
        if rate_fps <= 0:
            raise ValueError("rate_fps must be positive")
        self.scheduler = scheduler
        self.attackers = attackers
        self.victim = victim
        self.period_us = max(1, round(US_PER_S / rate_fps))
        self.emit = emit
        self.pool = pool
        self.stats = FloodStats()
        self._n = 0
        self._seq = 0
        self._handle = None
        self.running = False

    def start(self) -> None:
        if self.running:
            return
        self.running = True
        self._handle = self.scheduler.after(self.period_us, self._fire)

    def stop(self) -> None:
        self.running = False
        if self._handle is not None:
            self._handle.cancel()
            self._handle = None

    def _fire(self) -> None:
        if not self.running:
            return
        attacker = self.attackers[self._n % len(self.attackers)]
        src_n = self._n % self.pool if self.pool else self._n
        self.stats.distinct_sources = (min(self._n + 1, self.pool)
                                       if self.pool else self._n + 1)
        frame = Frame(
            eth_dst=self.victim.mac,
            eth_src=spoofed_mac(self._n),
            ipv4_src=spoofed_ip(src_n),
            ipv4_dst=self.victim.ip,
            seq=self._seq & 0xFFFF,
        )
        self._n += 1
        self._seq += 1
        self.stats.emitted += 1
        self.emit(attacker, frame.encode())
        self._handle = self.scheduler.after(self.period_us, self._fire)
