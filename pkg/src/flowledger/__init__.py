"""flowledger: blockchain-backed security middleware for SDN control channels.

The package pairs a transparent OpenFlow relay with a BFT-replicated,
hash-chained ledger.  Controllers and switches only talk to the network through
the middleware, which records registrations and control-plane snapshots on
chain, enforces access control, owns the controller/switch mapping, and closes
the loop from traffic anomalies to installed defense rules via declarative
intents.  A deterministic discrete-event simulator supplies the network
(switches, a learning controller, attack traffic) so every experiment is
reproducible from a seed.
"""

__version__ = "0.1.0"
