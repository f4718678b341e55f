"""Ledger, registry contract and export verification tests.

The two digest literals below are the frozen oracle: they were produced by
hashing manually assembled preimage bytes (length-prefixed fields in the
documented order) with hashlib directly, before the ledger code existed.
"""

import hashlib
import io
import json
import struct

import pytest

from flowledger.chain import ledger as led
from flowledger.chain.contracts import (
    ChainState,
    ElementRole,
    RegStatus,
    RegistryState,
    build_header_meta,
    evict_payload,
    register_payload,
)
from flowledger.chain.ledger import (
    BadHash,
    Block,
    InvalidLink,
    Ledger,
    NonMonotonicSeq,
    Transaction,
    TxKind,
    export_chain,
    genesis,
    import_chain,
    verify_export,
)

TX_ORACLE = "fa76163bee2fc243a01811f7520e4972119b51470698d751b4b6156958b52ea1"
BLOCK_ORACLE = "a57f7cf77a0a13157eca2462521cc191229c4c4dd24433c8b3ef8c7dac6f2f93"


def _tx(kind=TxKind.SNAPSHOT, payload=b"{}", submitter="mw", seq=0, ts=0):
    return Transaction.create(kind, payload, submitter, seq, ts)


def test_tx_hash_matches_frozen_oracle():
    tx = Transaction.create(TxKind.REGISTER, b'{"a":1}', "mw", 5, 123)
    assert tx.tx_hash.hex() == TX_ORACLE
    # independent recomputation of the preimage layout
    pre = (struct.pack("!H", 8) + b"register"
           + struct.pack("!I", 7) + b'{"a":1}'
           + struct.pack("!H", 2) + b"mw"
           + struct.pack("!Q", 5))
    assert hashlib.sha256(pre).hexdigest() == TX_ORACLE


def test_block_hash_matches_frozen_oracle():
    tx = Transaction.create(TxKind.REGISTER, b'{"a":1}', "mw", 5, 123)
    block = Block.create(1, b"\xaa" * 32, 777, {"switch_count": 2}, (tx,))
    assert block.block_hash.hex() == BLOCK_ORACLE


def test_genesis_shape():
    g = genesis()
    assert g.height == 0
    assert g.prev_hash == b"\x00" * 32
    assert g.txs == ()
    g.verify()


def test_append_links_blocks():
    ledger = Ledger()
    b1 = Block.create(1, ledger.head.block_hash, 10, {"switch_count": 0}, (_tx(seq=0),))
    ledger.append(b1)
    b2 = Block.create(2, b1.block_hash, 20, {"switch_count": 0}, (_tx(seq=1, ts=20),))
    ledger.append(b2)
    assert ledger.height == 2
    ledger.verify_full()


def test_append_rejects_wrong_height():
    ledger = Ledger()
    bad = Block.create(2, ledger.head.block_hash, 10, {}, ())
    with pytest.raises(InvalidLink):
        ledger.append(bad)


def test_append_rejects_wrong_prev_hash():
    ledger = Ledger()
    bad = Block.create(1, b"\x01" * 32, 10, {}, ())
    with pytest.raises(InvalidLink):
        ledger.append(bad)


def test_append_rejects_tampered_tx():
    ledger = Ledger()
    tx = _tx(payload=b'{"x":1}')
    tampered = Transaction(tx.kind, b'{"x":2}', tx.submitter, tx.seq, tx.timestamp_us, tx.tx_hash)
    bad = Block.create(1, ledger.head.block_hash, 10, {}, (tampered,))
    with pytest.raises(BadHash):
        ledger.append(bad)


def test_append_rejects_non_monotone_seq():
    ledger = Ledger()
    b1 = Block.create(1, ledger.head.block_hash, 10, {}, (_tx(seq=3),))
    ledger.append(b1)
    b2 = Block.create(2, b1.block_hash, 20, {}, (_tx(seq=3, ts=20),))
    with pytest.raises(NonMonotonicSeq):
        ledger.append(b2)
    # and within one block
    b2b = Block.create(2, b1.block_hash, 20, {}, (_tx(seq=5, ts=20), _tx(seq=5, ts=21)))
    with pytest.raises(NonMonotonicSeq):
        ledger.append(b2b)


def test_tx_index_lookup():
    ledger = Ledger()
    tx = _tx(seq=0)
    ledger.append(Block.create(1, ledger.head.block_hash, 10, {}, (tx,)))
    found = ledger.get_tx(tx.tx_hash)
    assert found is not None
    assert found[0] == tx and found[1] == 1
    assert ledger.get_tx(b"\x00" * 32) is None


# -- export / verify ----------------------------------------------------------------


def _small_chain() -> Ledger:
    ledger = Ledger()
    payloads = [register_payload("s1", ElementRole.SWITCH),
                register_payload("c1", ElementRole.CONTROLLER),
                {"note": "snapshot", "hex": "0400000800000001"}]
    kinds = [TxKind.REGISTER, TxKind.REGISTER, TxKind.SNAPSHOT]
    for i, (kind, doc) in enumerate(zip(kinds, payloads)):
        tx = Transaction.create(kind, json.dumps(doc, sort_keys=True).encode(), "mw", i, i * 10)
        ledger.append(Block.create(ledger.height + 1, ledger.head.block_hash,
                                   (i + 1) * 100, {"switch_count": i}, (tx,)))
    return ledger


def test_export_import_round_trip():
    ledger = _small_chain()
    fp = io.StringIO()
    assert export_chain(ledger, fp) == 4
    fp.seek(0)
    back = import_chain(fp)
    assert back.height == ledger.height
    assert back.head.block_hash == ledger.head.block_hash


def _flip_one_char(text: str, pos: int) -> str:
    c = text[pos]
    repl = "1" if c != "1" else "2"
    return text[:pos] + repl + text[pos:][1:]


def test_every_byte_of_export_is_covered():
    ledger = _small_chain()
    fp = io.StringIO()
    export_chain(ledger, fp)
    clean = fp.getvalue()
    ok, errors = verify_export(io.StringIO(clean))
    assert ok, errors

    lines = clean.splitlines()
    # flip a character inside every interesting field of block 1's record
    rec = json.loads(lines[1])
    for field, mutate in [
        ("payload_hex", lambda d: d["txs"][0].__setitem__("payload_hex", _flip_one_char(d["txs"][0]["payload_hex"], 4))),
        ("timestamp_us", lambda d: d["txs"][0].__setitem__("timestamp_us", d["txs"][0]["timestamp_us"] + 1)),
        ("submitter", lambda d: d["txs"][0].__setitem__("submitter", "mx")),
        ("seq", lambda d: d["txs"][0].__setitem__("seq", d["txs"][0]["seq"] + 1)),
        ("block timestamp", lambda d: d.__setitem__("timestamp_us", d["timestamp_us"] + 1)),
        ("header_meta", lambda d: d["header_meta"].__setitem__("switch_count", 99)),
        ("prev_hash", lambda d: d.__setitem__("prev_hash", _flip_one_char(d["prev_hash"], 0))),
        ("tx_hash", lambda d: d["txs"][0].__setitem__("tx_hash", _flip_one_char(d["txs"][0]["tx_hash"], 0))),
    ]:
        doc = json.loads(json.dumps(rec))
        mutate(doc)
        mutated = "\n".join([lines[0], json.dumps(doc)] + lines[2:]) + "\n"
        ok, errors = verify_export(io.StringIO(mutated))
        assert not ok, f"tampering with {field} went undetected"


def test_verify_export_rejects_reordered_blocks():
    ledger = _small_chain()
    fp = io.StringIO()
    export_chain(ledger, fp)
    lines = fp.getvalue().splitlines()
    swapped = "\n".join([lines[0], lines[2], lines[1], lines[3]]) + "\n"
    ok, _ = verify_export(io.StringIO(swapped))
    assert not ok


# -- registry contract ------------------------------------------------------------------


def _reg_tx(doc, seq, ts=0):
    return Transaction.create(TxKind.REGISTER, json.dumps(doc).encode(), "mw", seq, ts)


def test_registry_register_and_evict():
    reg = RegistryState()
    reg.apply_tx(_reg_tx(register_payload("s1", ElementRole.SWITCH, "dp:1"), 0, ts=5))
    assert reg.is_registered("s1")
    rec = reg.get("s1")
    assert rec.role is ElementRole.SWITCH and rec.registered_at_us == 5

    reg.apply_tx(_reg_tx(evict_payload("s1", "compromised"), 1, ts=9))
    assert not reg.is_registered("s1")
    assert reg.get("s1").status is RegStatus.EVICTED
    assert reg.get("s1").evict_reason == "compromised"

    # re-registration flips the record back
    reg.apply_tx(_reg_tx(register_payload("s1", ElementRole.SWITCH), 2, ts=12))
    assert reg.is_registered("s1")


def test_registry_ignores_malformed_and_unknown_evict():
    reg = RegistryState()
    reg.apply_tx(Transaction.create(TxKind.REGISTER, b"not json", "mw", 0, 0))
    reg.apply_tx(_reg_tx(evict_payload("ghost", "never seen"), 1))
    assert reg.ignored == 2
    assert reg.view() == []


def test_header_meta_counts_switches():
    reg = RegistryState()
    reg.apply_tx(_reg_tx(register_payload("s1", ElementRole.SWITCH), 0))
    reg.apply_tx(_reg_tx(register_payload("s2", ElementRole.SWITCH), 1))
    reg.apply_tx(_reg_tx(register_payload("c1", ElementRole.CONTROLLER), 2))
    reg.apply_tx(_reg_tx(evict_payload("s2", "gone"), 3))
    meta = build_header_meta(reg)
    assert meta["switch_count"] == 1
    assert meta["device_info"]["s2"]["status"] == "evicted"
    assert meta["device_info"]["c1"]["role"] == "controller"


def test_chain_state_folds_registry_and_counts():
    state = ChainState()
    tx1 = _reg_tx(register_payload("s1", ElementRole.SWITCH), 0)
    tx2 = Transaction.create(TxKind.SNAPSHOT, b"{}", "mw", 1, 0)
    state.apply_block(Block.create(1, state.ledger.head.block_hash, 10, {}, (tx1, tx2)))
    assert state.registry.is_registered("s1")
    assert state.kind_counts[TxKind.REGISTER] == 1
    assert state.kind_counts[TxKind.SNAPSHOT] == 1
