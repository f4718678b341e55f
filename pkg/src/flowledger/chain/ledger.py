"""Hash-chained block ledger.

Transactions hash their identity fields with length-prefixed sha256:

    tx_hash = sha256(len16(kind) || kind || len32(payload) || payload
                     || len16(submitter) || submitter || seq_u64)

Blocks hash the full serialized content, so every exported byte is covered:

    block_hash = sha256(height_u64 || prev_hash || timestamp_us_u64
                        || len32(meta_json) || meta_json
                        || len32(body_json) || body_json)

where meta_json / body_json are canonical JSON (sorted keys, no spaces) of the
header metadata and the transaction records.  A chain export is NDJSON, one
block per line; verification replays both hash computations from the raw
fields, so flipping any byte of any field in the export is detected.
"""

from __future__ import annotations

import enum
import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import IO, Iterator, Optional

HASH_LEN = 32
ZERO_HASH = b"\x00" * HASH_LEN


class LedgerError(Exception):
    pass


class InvalidLink(LedgerError):
    """Block height or prev_hash does not extend the head."""


class BadHash(LedgerError):
    """A stored tx_hash or block_hash does not match the recomputed digest."""


class NonMonotonicSeq(LedgerError):
    """A submitter's sequence number did not strictly increase."""


class TxKind(str, enum.Enum):
    REGISTER = "register"
    SNAPSHOT = "snapshot"
    INTENT = "intent"
    POLICY = "policy"
    FLOW_TABLE = "flow_table"


def _canonical_json(doc) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def tx_digest(kind: str, payload: bytes, submitter: str, seq: int) -> bytes:
    kind_b = kind.encode()
    sub_b = submitter.encode()
    h = hashlib.sha256()
    h.update(struct.pack("!H", len(kind_b)) + kind_b)
    h.update(struct.pack("!I", len(payload)) + payload)
    h.update(struct.pack("!H", len(sub_b)) + sub_b)
    h.update(struct.pack("!Q", seq))
    return h.digest()


@dataclass(frozen=True)
class Transaction:
    kind: TxKind
    payload: bytes
    submitter: str
    seq: int
    timestamp_us: int
    tx_hash: bytes

    @classmethod
    def create(cls, kind: TxKind, payload: bytes, submitter: str, seq: int,
               timestamp_us: int) -> "Transaction":
        return cls(kind, payload, submitter, seq, timestamp_us,
                   tx_digest(kind.value, payload, submitter, seq))

    def verify(self) -> None:
        if tx_digest(self.kind.value, self.payload, self.submitter, self.seq) != self.tx_hash:
            raise BadHash(f"tx {self.tx_hash.hex()[:12]} content does not match its hash")

    def payload_doc(self):
        return json.loads(self.payload.decode())

    def to_record(self) -> dict:
        return {
            "kind": self.kind.value,
            "payload_hex": self.payload.hex(),
            "submitter": self.submitter,
            "seq": self.seq,
            "timestamp_us": self.timestamp_us,
            "tx_hash": self.tx_hash.hex(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Transaction":
        return cls(TxKind(rec["kind"]), bytes.fromhex(rec["payload_hex"]), rec["submitter"],
                   int(rec["seq"]), int(rec["timestamp_us"]), bytes.fromhex(rec["tx_hash"]))


def block_digest(height: int, prev_hash: bytes, timestamp_us: int, header_meta: dict,
                 tx_records: list[dict]) -> bytes:
    meta_json = _canonical_json(header_meta)
    body_json = _canonical_json(tx_records)
    h = hashlib.sha256()
    h.update(struct.pack("!Q", height))
    h.update(prev_hash)
    h.update(struct.pack("!Q", timestamp_us))
    h.update(struct.pack("!I", len(meta_json)) + meta_json)
    h.update(struct.pack("!I", len(body_json)) + body_json)
    return h.digest()


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    timestamp_us: int
    header_meta: dict
    txs: tuple[Transaction, ...]
    block_hash: bytes

    @classmethod
    def create(cls, height: int, prev_hash: bytes, timestamp_us: int, header_meta: dict,
               txs: tuple[Transaction, ...]) -> "Block":
        digest = block_digest(height, prev_hash, timestamp_us, header_meta,
                              [t.to_record() for t in txs])
        return cls(height, prev_hash, timestamp_us, header_meta, txs, digest)

    def verify(self) -> None:
        for tx in self.txs:
            tx.verify()
        recomputed = block_digest(self.height, self.prev_hash, self.timestamp_us,
                                  self.header_meta, [t.to_record() for t in self.txs])
        if recomputed != self.block_hash:
            raise BadHash(f"block {self.height} content does not match its hash")

    def to_record(self) -> dict:
        return {
            "height": self.height,
            "prev_hash": self.prev_hash.hex(),
            "timestamp_us": self.timestamp_us,
            "header_meta": self.header_meta,
            "txs": [t.to_record() for t in self.txs],
            "block_hash": self.block_hash.hex(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Block":
        return cls(
            int(rec["height"]),
            bytes.fromhex(rec["prev_hash"]),
            int(rec["timestamp_us"]),
            rec["header_meta"],
            tuple(Transaction.from_record(t) for t in rec["txs"]),
            bytes.fromhex(rec["block_hash"]),
        )


def genesis(header_meta: Optional[dict] = None) -> Block:
    meta = {"chain": "flowledger", "digest": "sha256"}
    if header_meta:
        meta.update(header_meta)
    return Block.create(0, ZERO_HASH, 0, meta, ())


class Ledger:
    """Append-only verified chain with a transaction index."""

    def __init__(self, genesis_block: Optional[Block] = None) -> None:
        g = genesis_block if genesis_block is not None else genesis()
        if g.height != 0 or g.prev_hash != ZERO_HASH:
            raise InvalidLink("genesis must have height 0 and all-zero prev_hash")
        g.verify()
        self.blocks: list[Block] = [g]
        self._tx_index: dict[bytes, tuple[int, int]] = {}
        self._last_seq: dict[str, int] = {}

    @property
    def head(self) -> Block:
        return self.blocks[-1]

    @property
    def height(self) -> int:
        return self.head.height

    def append(self, block: Block) -> None:
        head = self.head
        if block.height != head.height + 1:
            raise InvalidLink(f"height {block.height} does not extend head {head.height}")
        if block.prev_hash != head.block_hash:
            raise InvalidLink(f"block {block.height} prev_hash does not match head hash")
        block.verify()
        staged = dict(self._last_seq)
        for tx in block.txs:
            last = staged.get(tx.submitter, -1)
            if tx.seq <= last:
                raise NonMonotonicSeq(
                    f"submitter {tx.submitter} seq {tx.seq} after {last} in block {block.height}")
            staged[tx.submitter] = tx.seq
        self.blocks.append(block)
        self._last_seq = staged
        for i, tx in enumerate(block.txs):
            self._tx_index[tx.tx_hash] = (block.height, i)

    def get_block(self, height: int) -> Block:
        if not 0 <= height <= self.height:
            raise KeyError(f"no block at height {height}")
        return self.blocks[height]

    def get_tx(self, tx_hash: bytes) -> Optional[tuple[Transaction, int]]:
        """Returns (tx, block_height) or None."""
        loc = self._tx_index.get(tx_hash)
        if loc is None:
            return None
        height, idx = loc
        return self.blocks[height].txs[idx], height

    def last_seq(self, submitter: str) -> int:
        return self._last_seq.get(submitter, -1)

    def iter_txs(self) -> Iterator[tuple[Transaction, int]]:
        for block in self.blocks:
            for tx in block.txs:
                yield tx, block.height

    def verify_full(self) -> None:
        """Recompute every digest and link from genesis."""
        prev = None
        for block in self.blocks:
            block.verify()
            if prev is not None:
                if block.height != prev.height + 1 or block.prev_hash != prev.block_hash:
                    raise InvalidLink(f"broken link at height {block.height}")
            prev = block


def export_chain(ledger: Ledger, fp: IO[str]) -> int:
    """Write the chain as NDJSON, one block per line.  Returns blocks written."""
    for block in ledger.blocks:
        fp.write(json.dumps(block.to_record(), sort_keys=True, separators=(",", ":")) + "\n")
    return len(ledger.blocks)


def import_chain(fp: IO[str]) -> Ledger:
    """Rebuild and fully verify a ledger from an NDJSON export."""
    lines = [ln for ln in (raw.strip() for raw in fp) if ln]
    if not lines:
        raise LedgerError("empty export")
    ledger = Ledger(Block.from_record(json.loads(lines[0])))
    for line in lines[1:]:
        ledger.append(Block.from_record(json.loads(line)))
    return ledger


def verify_export(fp: IO[str]) -> tuple[bool, list[str]]:
    """Check an export end to end; returns (ok, error descriptions)."""
    try:
        import_chain(fp)
    except (LedgerError, ValueError, KeyError) as exc:
        return False, [f"{type(exc).__name__}: {exc}"]
    return True, []
