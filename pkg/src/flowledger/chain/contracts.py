"""On-chain application state: the element registry and kind-indexed queries.

Registration and eviction both ride on register-kind transactions whose JSON
payload carries an "action" field; eviction is a status transition on the
existing record, so the registry keeps one row per element with its full
history implied by the chain itself.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

from flowledger.chain.ledger import Block, Ledger, Transaction, TxKind


class ElementRole(str, enum.Enum):
    CONTROLLER = "controller"
    SWITCH = "switch"


class RegStatus(str, enum.Enum):
    REGISTERED = "registered"
    EVICTED = "evicted"


@dataclass
class RegistrationRecord:
    element_id: str
    role: ElementRole
    pubinfo: str
    status: RegStatus
    registered_at_us: int
    updated_at_us: int
    evict_reason: Optional[str] = None

    def to_doc(self) -> dict:
        return {
            "element_id": self.element_id,
            "role": self.role.value,
            "pubinfo": self.pubinfo,
            "status": self.status.value,
            "registered_at_us": self.registered_at_us,
            "updated_at_us": self.updated_at_us,
            "evict_reason": self.evict_reason,
        }


def register_payload(element_id: str, role: ElementRole, pubinfo: str = "") -> dict:
    return {"action": "register", "element_id": element_id, "role": role.value,
            "pubinfo": pubinfo}


def evict_payload(element_id: str, reason: str) -> dict:
    return {"action": "evict", "element_id": element_id, "reason": reason}


class RegistryState:
    """Element registry folded from register-kind transactions in commit order."""

    def __init__(self) -> None:
        self._records: dict[str, RegistrationRecord] = {}
        self.ignored = 0  # malformed or out-of-order registry txs

    def apply_tx(self, tx: Transaction) -> None:
        if tx.kind is not TxKind.REGISTER:
            return
        try:
            doc = tx.payload_doc()
            action = doc["action"]
            element_id = doc["element_id"]
        except (ValueError, KeyError, UnicodeDecodeError):
            self.ignored += 1
            return
        if action == "register":
            try:
                role = ElementRole(doc["role"])
            except (ValueError, KeyError):
                self.ignored += 1
                return
            existing = self._records.get(element_id)
            if existing is not None:
                existing.role = role
                existing.pubinfo = doc.get("pubinfo", "")
                existing.status = RegStatus.REGISTERED
                existing.updated_at_us = tx.timestamp_us
                existing.evict_reason = None
            else:
                self._records[element_id] = RegistrationRecord(
                    element_id, role, doc.get("pubinfo", ""), RegStatus.REGISTERED,
                    tx.timestamp_us, tx.timestamp_us)
        elif action == "evict":
            rec = self._records.get(element_id)
            if rec is None:
                self.ignored += 1
                return
            rec.status = RegStatus.EVICTED
            rec.updated_at_us = tx.timestamp_us
            rec.evict_reason = doc.get("reason")
        else:
            self.ignored += 1

    def get(self, element_id: str) -> Optional[RegistrationRecord]:
        return self._records.get(element_id)

    def is_registered(self, element_id: str) -> bool:
        rec = self._records.get(element_id)
        return rec is not None and rec.status is RegStatus.REGISTERED

    def view(self) -> list[RegistrationRecord]:
        return list(self._records.values())

    def count(self, role: ElementRole, status: RegStatus = RegStatus.REGISTERED) -> int:
        return sum(1 for r in self._records.values()
                   if r.role is role and r.status is status)


def build_header_meta(registry: RegistryState) -> dict:
    """Block header carries the switch count and per-device info."""
    return {
        "switch_count": registry.count(ElementRole.SWITCH),
        "device_info": {
            rec.element_id: {"role": rec.role.value, "status": rec.status.value}
            for rec in registry.view()
        },
    }


class ChainState:
    """A replica's ledger plus the registry folded from it."""

    def __init__(self, genesis_block: Optional[Block] = None) -> None:
        self.ledger = Ledger(genesis_block)
        self.registry = RegistryState()
        self.kind_counts: dict[TxKind, int] = {kind: 0 for kind in TxKind}

    def apply_block(self, block: Block) -> None:
        self.ledger.append(block)
        for tx in block.txs:
            self.registry.apply_tx(tx)
            self.kind_counts[tx.kind] += 1

    @property
    def height(self) -> int:
        return self.ledger.height
