"""Three-phase BFT replication with an optional rotating committee.

Classic mode runs PrePrepare/Prepare/Commit among all n = 3f+1 replicas with
2f+1 quorums; the primary's PrePrepare doubles as its Prepare vote.  Committee
mode (the reduced variant) runs the same three phases inside a deterministic
committee of size max(4, ceil(0.6 n)) rotated by block height, then the
committee primary pushes the committed block to every non-member in one
dissemination round.

View changes are deliberately simple: a replica that sees announced-but-idle
transactions for longer than the timeout (10x link delay, floored at 1 s)
votes to move to the next view; 2f+1 votes rotate the primary, which then
re-proposes the best prepared block it learned about, or rebuilds a batch from
the announced pool.  Equivocation by a faulty primary splits the prepare vote
so no quorum forms, and the view change recovers liveness; honest replicas
never commit two digests at one height (SafetyViolation guards the invariant).

Replicas are transport-free: handle()/maybe_propose()/check_timeout() return
(destination, message) pairs for the surrounding network to deliver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

from flowledger.chain.contracts import ChainState, build_header_meta
from flowledger.chain.ledger import Block, LedgerError, Transaction


class SafetyViolation(Exception):
    """Two conflicting digests reached commit at the same height."""


@dataclass(frozen=True)
class ConsensusConfig:
    n: int = 4
    mode: str = "pbft"  # "pbft" | "rpbft"
    link_delay_us: int = 10_000
    jitter_frac: float = 0.03
    proc_cost_us: int = 300
    batch_max: int = 64
    batch_wait_us: int = 50_000

    def __post_init__(self) -> None:
        if self.n < 4:
            raise ValueError("need n >= 4 (3f+1 with f >= 1)")
        if self.mode not in ("pbft", "rpbft"):
            raise ValueError(f"unknown mode: {self.mode}")

    @property
    def f(self) -> int:
        return (self.n - 1) // 3

    @property
    def committee_size(self) -> int:
        if self.mode == "pbft":
            return self.n
        return max(4, math.ceil(0.6 * self.n))

    @property
    def view_timeout_us(self) -> int:
        return max(10 * self.link_delay_us, 1_000_000)

    def committee(self, height: int) -> tuple[int, ...]:
        """Deterministic member rotation by height."""
        c = self.committee_size
        if c >= self.n:
            return tuple(range(self.n))
        return tuple((height + i) % self.n for i in range(c))


# -- protocol messages -----------------------------------------------------------

@dataclass(frozen=True)
class Announce:
    tx: Transaction


@dataclass(frozen=True)
class PrePrepare:
    view: int
    height: int
    block: Block
    sender: int


@dataclass(frozen=True)
class Prepare:
    view: int
    height: int
    digest: bytes
    sender: int


@dataclass(frozen=True)
class Commit:
    view: int
    height: int
    digest: bytes
    sender: int


@dataclass(frozen=True)
class ViewChange:
    new_view: int
    sender: int
    prepared_block: Optional[Block] = None
    prepared_view: int = -1


@dataclass(frozen=True)
class BlockPush:
    block: Block
    sender: int


@dataclass(frozen=True)
class SyncReq:
    from_height: int
    sender: int


@dataclass(frozen=True)
class SyncResp:
    blocks: tuple[Block, ...]
    sender: int


Message = Union[Announce, PrePrepare, Prepare, Commit, ViewChange, BlockPush, SyncReq, SyncResp]
Outbound = tuple[int, Message]  # destination node id, message


class Replica:
    """One consensus node: a ChainState plus the three-phase vote ledgers."""

    def __init__(self, node_id: int, cfg: ConsensusConfig,
                 genesis_block: Optional[Block] = None) -> None:
        self.node_id = node_id
        self.cfg = cfg
        self.state = ChainState(genesis_block)
        self.view = 0
        self.pending: dict[bytes, Transaction] = {}
        self.preprepared: dict[tuple[int, int], Block] = {}
        self.prepare_votes: dict[tuple[int, int, bytes], set[int]] = {}
        self.commit_votes: dict[tuple[int, int, bytes], set[int]] = {}
        self.sent_prepare: set[tuple[int, int]] = set()
        self.sent_commit: set[tuple[int, int]] = set()
        self.committed_digest: dict[int, bytes] = {}
        self.vc_votes: dict[int, set[int]] = {}
        self.vc_sent: set[int] = set()
        self.best_prepared: dict[int, tuple[int, Block]] = {}  # height -> (view, block)
        self.progress_deadline_us: Optional[int] = None
        self.pending_since_us: Optional[int] = None
        self.equivocation_seen = 0
        self.push_buffer: dict[int, Block] = {}
        self.sync_tally: dict[int, dict[bytes, tuple[int, Block]]] = {}
        self._sync_requested: set[int] = set()
        self.on_committed: Optional[Callable[[Block], None]] = None
        self.on_proposed: Optional[Callable[[int, Block], None]] = None

    # -- role helpers ------------------------------------------------------------

    @property
    def consensus_height(self) -> int:
        return self.state.height + 1

    def members(self, height: int) -> tuple[int, ...]:
        return self.cfg.committee(height)

    def is_member(self, height: int) -> bool:
        return self.node_id in self.members(height)

    def primary_of(self, height: int, view: int) -> int:
        members = self.members(height)
        return members[view % len(members)]

    def is_primary(self, height: int) -> bool:
        return self.primary_of(height, self.view) == self.node_id

    @property
    def quorum(self) -> int:
        members = self.members(self.consensus_height)
        f = (len(members) - 1) // 3
        return 2 * f + 1

    def _others(self, height: int) -> list[int]:
        return [i for i in self.members(height) if i != self.node_id]

    def _non_members(self, height: int) -> list[int]:
        members = set(self.members(height))
        return [i for i in range(self.cfg.n) if i not in members]

    # -- proposal -----------------------------------------------------------------

    def maybe_propose(self, now_us: int) -> list[Outbound]:
        h = self.consensus_height
        if not self.pending or not self.is_member(h) or not self.is_primary(h):
            return []
        if (self.view, h) in self.preprepared:
            return []  # round already in flight
        batch_ready = (len(self.pending) >= self.cfg.batch_max
                       or self.pending_since_us is None
                       or now_us - self.pending_since_us >= self.cfg.batch_wait_us)
        if not batch_ready:
            return []
        block = self._build_block(h, now_us)
        if not block.txs:
            return []  # only gapped sequences so far; wait for the missing announces
        return self._propose(h, now_us, block)

    def _build_block(self, height: int, now_us: int) -> Block:
        # Take each submitter's contiguous seq run from its committed tail; a
        # gap (announce still in flight) defers that submitter's later txs,
        # keeping per-submitter FIFO intact end to end.
        by_submitter: dict[str, list[Transaction]] = {}
        for tx in self.pending.values():
            by_submitter.setdefault(tx.submitter, []).append(tx)
        chosen: list[Transaction] = []
        for submitter in sorted(by_submitter):
            next_seq = self.state.ledger.last_seq(submitter) + 1
            for tx in sorted(by_submitter[submitter], key=lambda t: t.seq):
                if tx.seq != next_seq:
                    break
                chosen.append(tx)
                next_seq += 1
        txs = tuple(chosen[: self.cfg.batch_max])
        meta = build_header_meta(self.state.registry)
        return Block.create(height, self.state.ledger.head.block_hash, now_us, meta, txs)

    def _propose(self, height: int, now_us: int, block: Block) -> list[Outbound]:
        key = (self.view, height)
        digest = block.block_hash
        self.preprepared[key] = block
        # The primary's PrePrepare counts as its Prepare vote.
        self.prepare_votes.setdefault((self.view, height, digest), set()).add(self.node_id)
        self.sent_prepare.add(key)
        if self.on_proposed is not None:
            self.on_proposed(height, block)
        out: list[Outbound] = [(dst, PrePrepare(self.view, height, block, self.node_id))
                               for dst in self._others(height)]
        return out + self._try_advance(self.view, height)

    def _valid_proposal(self, block: Block) -> bool:
        if block.height != self.consensus_height:
            return False
        if block.prev_hash != self.state.ledger.head.block_hash:
            return False
        try:
            block.verify()
        except LedgerError:
            return False
        seen: dict[str, int] = {}
        for tx in block.txs:
            last = seen.get(tx.submitter, self.state.ledger.last_seq(tx.submitter))
            if tx.seq <= last:
                return False
            seen[tx.submitter] = tx.seq
        return bool(block.txs)

    # -- message handling -------------------------------------------------------------

    def handle(self, msg: Message, now_us: int) -> list[Outbound]:
        if isinstance(msg, Announce):
            return self._on_announce(msg, now_us)
        if isinstance(msg, PrePrepare):
            return self._on_preprepare(msg)
        if isinstance(msg, Prepare):
            return self._on_prepare(msg)
        if isinstance(msg, Commit):
            return self._on_commit(msg)
        if isinstance(msg, ViewChange):
            return self._on_view_change(msg, now_us)
        if isinstance(msg, BlockPush):
            return self._on_block_push(msg)
        if isinstance(msg, SyncReq):
            return self._on_sync_req(msg)
        if isinstance(msg, SyncResp):
            return self._on_sync_resp(msg)
        raise TypeError(f"unknown message: {msg!r}")

    def _on_announce(self, msg: Announce, now_us: int) -> list[Outbound]:
        tx = msg.tx
        if tx.seq <= self.state.ledger.last_seq(tx.submitter):
            return []
        if not self.pending:
            self.pending_since_us = now_us
        self.pending[tx.tx_hash] = tx
        if self.progress_deadline_us is None and self.is_member(self.consensus_height):
            self.progress_deadline_us = now_us + self.cfg.view_timeout_us
        return []

    def _on_preprepare(self, msg: PrePrepare) -> list[Outbound]:
        h = self.consensus_height
        if msg.view != self.view or msg.height != h or not self.is_member(h):
            return []
        if msg.sender != self.primary_of(h, self.view):
            return []
        key = (self.view, h)
        existing = self.preprepared.get(key)
        if existing is not None:
            if existing.block_hash != msg.block.block_hash:
                self.equivocation_seen += 1
            return self._try_advance(self.view, h)
        if not self._valid_proposal(msg.block):
            return []
        self.preprepared[key] = msg.block
        digest = msg.block.block_hash
        self.prepare_votes.setdefault((self.view, h, digest), set()).add(msg.sender)
        out: list[Outbound] = []
        if key not in self.sent_prepare:
            self.sent_prepare.add(key)
            self.prepare_votes[(self.view, h, digest)].add(self.node_id)
            out += [(dst, Prepare(self.view, h, digest, self.node_id))
                    for dst in self._others(h)]
        return out + self._try_advance(self.view, h)

    def _on_prepare(self, msg: Prepare) -> list[Outbound]:
        if msg.view != self.view or msg.height != self.consensus_height:
            return []
        self.prepare_votes.setdefault((msg.view, msg.height, msg.digest), set()).add(msg.sender)
        return self._try_advance(msg.view, msg.height)

    def _on_commit(self, msg: Commit) -> list[Outbound]:
        if msg.height != self.consensus_height:
            return []
        votes = self.commit_votes.setdefault((msg.view, msg.height, msg.digest), set())
        votes.add(msg.sender)
        out = self._try_advance(msg.view, msg.height)
        # A commit quorum on a digest we never pre-prepared means the round went
        # past us (an equivocating primary fed us the other fork, or we lagged);
        # fetch the committed block from f+1 agreeing peers.
        if (len(votes) >= self.quorum and msg.height == self.consensus_height
                and msg.height not in self._sync_requested):
            mine = self.preprepared.get((msg.view, msg.height))
            if mine is None or mine.block_hash != msg.digest:
                self._sync_requested.add(msg.height)
                out += self.request_sync()
        return out

    def _try_advance(self, view: int, height: int) -> list[Outbound]:
        key = (view, height)
        block = self.preprepared.get(key)
        if block is None or height != self.consensus_height:
            return []
        digest = block.block_hash
        out: list[Outbound] = []
        prepares = self.prepare_votes.get((view, height, digest), set())
        if len(prepares) >= self.quorum and key not in self.sent_commit:
            self.sent_commit.add(key)
            # Track the prepared block so a view change can re-propose it.
            best = self.best_prepared.get(height)
            if best is None or view > best[0]:
                self.best_prepared[height] = (view, block)
            self.commit_votes.setdefault((view, height, digest), set()).add(self.node_id)
            out += [(dst, Commit(view, height, digest, self.node_id))
                    for dst in self._others(height)]
        commits = self.commit_votes.get((view, height, digest), set())
        if len(commits) >= self.quorum:
            out += self._commit_block(height, block)
        return out

    def _commit_block(self, height: int, block: Block) -> list[Outbound]:
        digest = block.block_hash
        seen = self.committed_digest.get(height)
        if seen is not None:
            if seen != digest:
                raise SafetyViolation(
                    f"node {self.node_id}: conflicting commit at height {height}")
            return []
        if height != self.state.height + 1:
            return []
        self.committed_digest[height] = digest
        self.state.apply_block(block)
        self._gc_round_state(height)
        if self.on_committed is not None:
            self.on_committed(block)
        out: list[Outbound] = []
        if self.cfg.mode == "rpbft" and self.primary_of(height, self.view) == self.node_id:
            out += [(dst, BlockPush(block, self.node_id)) for dst in self._non_members(height)]
        out += self._drain_push_buffer()
        return out

    def _gc_round_state(self, height: int) -> None:
        for tx in self.state.ledger.get_block(height).txs:
            self.pending.pop(tx.tx_hash, None)
        stale = [h for h, tx in self.pending.items()
                 if tx.seq <= self.state.ledger.last_seq(tx.submitter)]
        for h in stale:
            del self.pending[h]
        self.preprepared = {k: v for k, v in self.preprepared.items() if k[1] > height}
        self.prepare_votes = {k: v for k, v in self.prepare_votes.items() if k[1] > height}
        self.commit_votes = {k: v for k, v in self.commit_votes.items() if k[1] > height}
        self.sent_prepare = {k for k in self.sent_prepare if k[1] > height}
        self.sent_commit = {k for k in self.sent_commit if k[1] > height}
        self.best_prepared.pop(height, None)
        self._sync_requested = {h for h in self._sync_requested if h > height}
        # The view is sticky across heights: a primary demoted by a view change
        # stays demoted until a future timeout rotates again.
        self.vc_votes = {v: s for v, s in self.vc_votes.items() if v > self.view}
        self.vc_sent = {v for v in self.vc_sent if v > self.view}
        self.progress_deadline_us = None
        self.pending_since_us = None if not self.pending else self.pending_since_us

    # -- view change --------------------------------------------------------------------

    def check_timeout(self, now_us: int) -> list[Outbound]:
        if not self.pending:
            self.progress_deadline_us = None
            return []
        if self.progress_deadline_us is None:
            if self.is_member(self.consensus_height):
                self.progress_deadline_us = now_us + self.cfg.view_timeout_us
            return []
        if now_us < self.progress_deadline_us:
            return []
        self.progress_deadline_us = now_us + self.cfg.view_timeout_us
        return self._send_view_change(self.view + 1, now_us)

    def _send_view_change(self, new_view: int, now_us: int) -> list[Outbound]:
        if new_view in self.vc_sent:
            return []
        self.vc_sent.add(new_view)
        h = self.consensus_height
        best = self.best_prepared.get(h)
        prepared_block = best[1] if best else None
        prepared_view = best[0] if best else -1
        self.vc_votes.setdefault(new_view, set()).add(self.node_id)
        vc = ViewChange(new_view, self.node_id, prepared_block, prepared_view)
        out: list[Outbound] = [(dst, vc) for dst in self._others(h)]
        return out + self._maybe_enter_view(new_view, now_us)

    def _on_view_change(self, msg: ViewChange, now_us: int) -> list[Outbound]:
        if msg.new_view <= self.view:
            return []
        h = self.consensus_height
        if not self.is_member(h):
            return []
        votes = self.vc_votes.setdefault(msg.new_view, set())
        votes.add(msg.sender)
        if msg.prepared_block is not None:
            best = self.best_prepared.get(h)
            if best is None or msg.prepared_view > best[0]:
                self.best_prepared[h] = (msg.prepared_view, msg.prepared_block)
        out: list[Outbound] = []
        f = (len(self.members(h)) - 1) // 3
        if len(votes) >= f + 1 and msg.new_view not in self.vc_sent:
            out += self._send_view_change(msg.new_view, now_us)  # join the change
        return out + self._maybe_enter_view(msg.new_view, now_us)

    def _maybe_enter_view(self, new_view: int, now_us: int) -> list[Outbound]:
        if new_view <= self.view:
            return []
        votes = self.vc_votes.get(new_view, set())
        if len(votes) < self.quorum:
            return []
        self.view = new_view
        h = self.consensus_height
        self.progress_deadline_us = now_us + self.cfg.view_timeout_us
        if self.primary_of(h, new_view) != self.node_id or not self.pending:
            return []
        best = self.best_prepared.get(h)
        if best is not None and self._valid_proposal(best[1]):
            block = best[1]
        else:
            block = self._build_block(h, now_us)
        if not block.txs:
            return []
        return self._propose(h, now_us, block)

    # -- dissemination and catch-up ----------------------------------------------------

    def _on_block_push(self, msg: BlockPush) -> list[Outbound]:
        self.push_buffer[msg.block.height] = msg.block
        return self._drain_push_buffer()

    def _drain_push_buffer(self) -> list[Outbound]:
        while True:
            nxt = self.push_buffer.pop(self.state.height + 1, None)
            if nxt is None:
                return []
            if nxt.prev_hash != self.state.ledger.head.block_hash:
                return []
            try:
                nxt.verify()
            except LedgerError:
                return []
            height = nxt.height
            self.committed_digest[height] = nxt.block_hash
            self.state.apply_block(nxt)
            self._gc_round_state(height)
            if self.on_committed is not None:
                self.on_committed(nxt)

    def _on_sync_req(self, msg: SyncReq) -> list[Outbound]:
        if msg.from_height > self.state.height:
            return []
        blocks = tuple(self.state.ledger.blocks[msg.from_height:])
        return [(msg.sender, SyncResp(blocks, self.node_id))]

    def _on_sync_resp(self, msg: SyncResp) -> list[Outbound]:
        """Adopt a block once f+1 senders agree on its bytes."""
        f = self.cfg.f
        for block in msg.blocks:
            if block.height <= self.state.height:
                continue
            tally = self.sync_tally.setdefault(block.height, {})
            count, _ = tally.get(block.block_hash, (0, block))
            tally[block.block_hash] = (count + 1, block)
        out: list[Outbound] = []
        advanced = True
        while advanced:
            advanced = False
            tally = self.sync_tally.get(self.state.height + 1)
            if not tally:
                break
            for digest, (count, block) in tally.items():
                if count >= f + 1 and block.prev_hash == self.state.ledger.head.block_hash:
                    block.verify()
                    self.committed_digest[block.height] = digest
                    self.state.apply_block(block)
                    self._gc_round_state(block.height)
                    if self.on_committed is not None:
                        self.on_committed(block)
                    self.sync_tally.pop(block.height, None)
                    advanced = True
                    break
        return out

    def request_sync(self) -> list[Outbound]:
        req = SyncReq(self.state.height + 1, self.node_id)
        return [(i, req) for i in range(self.cfg.n) if i != self.node_id]
