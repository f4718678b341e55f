"""Replicated hash-chained ledger: block store, registry contract, consensus."""

from flowledger.chain.ledger import (  # noqa: F401
    TxKind,
    Transaction,
    Block,
    Ledger,
    LedgerError,
    InvalidLink,
    BadHash,
    NonMonotonicSeq,
    tx_digest,
    block_digest,
    genesis,
    export_chain,
    import_chain,
    verify_export,
)
from flowledger.chain.contracts import (  # noqa: F401
    ElementRole,
    RegStatus,
    RegistrationRecord,
    RegistryState,
    ChainState,
    build_header_meta,
)
from flowledger.chain.pbft import ConsensusConfig, Replica, SafetyViolation  # noqa: F401
from flowledger.chain.network import ChainNetwork, FaultPlan  # noqa: F401
