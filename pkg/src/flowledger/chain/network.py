"""Simulated consensus network: replicas on a jittered, serialized message bus.

Every link imposes the configured delay plus seeded multiplicative jitter, and
every replica processes inbound messages one at a time at a fixed per-message
cost.  The serialization is what makes commit latency grow with the replica
count: a primary collecting 2f+1 votes works through a queue that scales with
n.  Faults are injected here, not in the replicas: crashed nodes neither send
nor receive, and an equivocating primary's PrePrepares are forked so half the
peers see a conflicting digest.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

from flowledger.chain.ledger import Block, Transaction, TxKind
from flowledger.chain.pbft import (
    Announce,
    ConsensusConfig,
    Message,
    Outbound,
    PrePrepare,
    Replica,
)
from flowledger.scheduler import Scheduler


@dataclass
class FaultPlan:
    crash_at: dict[int, int] = field(default_factory=dict)      # node -> time_us
    recover_at: dict[int, int] = field(default_factory=dict)    # node -> time_us
    equivocate: frozenset[int] = frozenset()                    # byzantine proposers


ReceiptCallback = Callable[[Transaction, Block], None]


class ChainNetwork:
    """n replicas, a client entry point, fault injection and latency metrics."""

    def __init__(self, scheduler: Scheduler, cfg: ConsensusConfig, seed: int = 0,
                 genesis_block: Optional[Block] = None,
                 fault_plan: Optional[FaultPlan] = None,
                 pulse_us: int = 10_000) -> None:
        self.scheduler = scheduler
        self.cfg = cfg
        self.rng = random.Random(seed)
        self.fault_plan = fault_plan or FaultPlan()
        self.replicas = [Replica(i, cfg, genesis_block) for i in range(cfg.n)]
        self.crashed: set[int] = set()
        self._busy_until = [0] * cfg.n
        self._next_seq: dict[str, int] = {}
        self._receipts: dict[bytes, list[ReceiptCallback]] = {}
        self._receipt_fired: set[bytes] = set()
        self.delivered_messages = 0
        # fires once per committed block (observed at node 0)
        self.block_sink: Optional[Callable[[Block], None]] = None
        # metrics per height
        self.propose_t: dict[int, int] = {}
        self.proposer: dict[int, int] = {}
        self.commit_t: dict[int, dict[int, int]] = {}
        for replica in self.replicas:
            replica.on_committed = self._make_commit_hook(replica.node_id)
            replica.on_proposed = self._make_propose_hook(replica.node_id)
        for node, t_us in self.fault_plan.crash_at.items():
            scheduler.at(t_us, lambda n=node: self.crash(n))
        for node, t_us in self.fault_plan.recover_at.items():
            scheduler.at(t_us, lambda n=node: self.recover(n))
        scheduler.every(pulse_us, self._pulse, first_at=scheduler.now_us + pulse_us)

    # -- hooks -------------------------------------------------------------------

    def _make_commit_hook(self, node_id: int):
        def hook(block: Block) -> None:
            now = self.scheduler.now_us
            self.commit_t.setdefault(block.height, {})[node_id] = now
            if node_id == 0 and self.block_sink is not None:
                self.block_sink(block)
            for tx in block.txs:
                if tx.tx_hash in self._receipt_fired:
                    continue
                callbacks = self._receipts.pop(tx.tx_hash, None)
                if callbacks:
                    self._receipt_fired.add(tx.tx_hash)
                    for cb in callbacks:
                        cb(tx, block)
        return hook

    def _make_propose_hook(self, node_id: int):
        def hook(height: int, block: Block) -> None:
            self.propose_t.setdefault(height, self.scheduler.now_us)
            self.proposer.setdefault(height, node_id)
        return hook

    # -- client API -----------------------------------------------------------------

    def next_seq(self, submitter: str) -> int:
        seq = self._next_seq.get(submitter, 0)
        self._next_seq[submitter] = seq + 1
        return seq

    def submit_tx(self, kind: TxKind, payload: Union[dict, list, bytes], submitter: str,
                  on_commit: Optional[ReceiptCallback] = None) -> bytes:
        """Create, announce and (eventually) commit a transaction; returns its hash."""
        if not isinstance(payload, bytes):
            payload = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
        tx = Transaction.create(kind, payload, submitter, self.next_seq(submitter),
                                self.scheduler.now_us)
        if on_commit is not None:
            self._receipts.setdefault(tx.tx_hash, []).append(on_commit)
        for replica in self.replicas:
            self._send(None, replica.node_id, Announce(tx))
        return tx.tx_hash

    def state(self, node: int = 0):
        return self.replicas[node].state

    def head(self, node: int = 0) -> Block:
        return self.replicas[node].state.ledger.head

    def alive(self, node: int) -> bool:
        return node not in self.crashed

    # -- faults ------------------------------------------------------------------------

    def crash(self, node: int) -> None:
        self.crashed.add(node)

    def recover(self, node: int) -> None:
        """Bring a node back; it catches up from f+1 matching sync replies."""
        self.crashed.discard(node)
        self._busy_until[node] = self.scheduler.now_us
        self._dispatch(node, self.replicas[node].request_sync())

    # -- transport ---------------------------------------------------------------------

    def _jittered_delay(self) -> int:
        j = self.cfg.jitter_frac
        return max(1, int(self.cfg.link_delay_us * (1 + self.rng.uniform(-j, j))))

    def _send(self, src: Optional[int], dst: int, msg: Message) -> None:
        if src is not None and src in self.crashed:
            return
        arrival = self.scheduler.now_us + self._jittered_delay()
        self.scheduler.at(arrival, lambda: self._arrive(dst, msg))

    def _arrive(self, dst: int, msg: Message) -> None:
        if dst in self.crashed:
            return
        start = max(self.scheduler.now_us, self._busy_until[dst])
        done = start + self.cfg.proc_cost_us
        self._busy_until[dst] = done
        self.scheduler.at(done, lambda: self._process(dst, msg))

    def _process(self, dst: int, msg: Message) -> None:
        if dst in self.crashed:
            return
        self.delivered_messages += 1
        out = self.replicas[dst].handle(msg, self.scheduler.now_us)
        self._dispatch(dst, out)

    def _dispatch(self, src: int, outbound: list[Outbound]) -> None:
        if src in self.crashed or not outbound:
            return
        if src in self.fault_plan.equivocate:
            outbound = self._fork_preprepares(outbound)
        for dst, msg in outbound:
            self._send(src, dst, msg)

    def _fork_preprepares(self, outbound: list[Outbound]) -> list[Outbound]:
        """Byzantine proposer: half the recipients get a conflicting block."""
        forked: list[Outbound] = []
        alt_cache: dict[bytes, Block] = {}
        idx = 0
        for dst, msg in outbound:
            if isinstance(msg, PrePrepare):
                if idx % 2 == 1:
                    alt = alt_cache.get(msg.block.block_hash)
                    if alt is None:
                        b = msg.block
                        alt = Block.create(b.height, b.prev_hash, b.timestamp_us + 1,
                                           b.header_meta, b.txs)
                        alt_cache[b.block_hash] = alt
                    msg = PrePrepare(msg.view, msg.height, alt, msg.sender)
                idx += 1
            forked.append((dst, msg))
        return forked

    def _pulse(self) -> None:
        now = self.scheduler.now_us
        for replica in self.replicas:
            if replica.node_id in self.crashed:
                continue
            out = replica.maybe_propose(now) + replica.check_timeout(now)
            self._dispatch(replica.node_id, out)

    # -- latency metrics ------------------------------------------------------------------

    def commit_latency_us(self, height: int) -> Optional[int]:
        """Propose-to-commit time: at the proposer for classic mode, at the
        slowest node (committee commit plus dissemination) for committee mode."""
        t0 = self.propose_t.get(height)
        commits = self.commit_t.get(height)
        if t0 is None or not commits:
            return None
        if self.cfg.mode == "pbft":
            primary = self.proposer[height]
            t1 = commits.get(primary)
        else:
            expected = self.cfg.n - len(self.crashed)
            if len(commits) < expected:
                return None
            t1 = max(commits.values())
        if t1 is None:
            return None
        return t1 - t0
