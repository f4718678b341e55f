"""Consensus latency benchmark.

Runs sequential single-transaction rounds against a fresh simulated network
and reports per-round commit latency.  Latency is measured from PrePrepare
emission: to the proposer's 2f+1-commit for classic mode, and to the last
node's block application (committee commit plus the dissemination round) for
committee mode.  One seed fixes the entire latency table.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from typing import IO, Iterable, Optional

from flowledger.chain.ledger import TxKind
from flowledger.chain.network import ChainNetwork
from flowledger.chain.pbft import ConsensusConfig
from flowledger.scheduler import Scheduler

DEFAULT_NODE_COUNTS = (7, 13, 31)
DEFAULT_DELAYS_MS = (10, 20, 50, 100)
DEFAULT_ROUNDS = 50


@dataclass
class BenchResult:
    mode: str
    n: int
    link_delay_ms: float
    rounds: int
    seed: int
    latencies_ms: list[float] = field(default_factory=list)

    @property
    def mean_ms(self) -> float:
        return statistics.fmean(self.latencies_ms)

    @property
    def p50_ms(self) -> float:
        return statistics.median(self.latencies_ms)

    @property
    def p95_ms(self) -> float:
        ordered = sorted(self.latencies_ms)
        idx = max(0, min(len(ordered) - 1, round(0.95 * (len(ordered) - 1))))
        return ordered[idx]


def run_latency_bench(mode: str, n: int, link_delay_ms: float, rounds: int = DEFAULT_ROUNDS,
                      seed: int = 0, proc_cost_us: int = 300,
                      jitter_frac: float = 0.03) -> BenchResult:
    """One configuration: `rounds` sequential commits on a fresh network."""
    scheduler = Scheduler()
    cfg = ConsensusConfig(
        n=n,
        mode=mode,
        link_delay_us=int(link_delay_ms * 1000),
        jitter_frac=jitter_frac,
        proc_cost_us=proc_cost_us,
        batch_wait_us=0,  # propose immediately; the batch timer is not under test
    )
    net = ChainNetwork(scheduler, cfg, seed=seed, pulse_us=2_000)
    result = BenchResult(mode, n, link_delay_ms, rounds, seed)
    for rnd in range(rounds):
        height = rnd + 1
        net.submit_tx(TxKind.SNAPSHOT, {"bench_round": rnd}, submitter="bench")
        deadline = scheduler.now_us + 600_000_000
        while net.commit_latency_us(height) is None:
            if scheduler.now_us > deadline:
                raise RuntimeError(f"round {rnd} did not commit (mode={mode} n={n})")
            scheduler.run_until(scheduler.now_us + 5_000)
        result.latencies_ms.append(net.commit_latency_us(height) / 1000.0)
    return result


def run_grid(modes: Iterable[str] = ("pbft", "rpbft"),
             node_counts: Iterable[int] = DEFAULT_NODE_COUNTS,
             delays_ms: Iterable[float] = DEFAULT_DELAYS_MS,
             rounds: int = DEFAULT_ROUNDS, seed: int = 0,
             proc_cost_us: int = 300) -> list[BenchResult]:
    results = []
    for mode in modes:
        for n in node_counts:
            for delay in delays_ms:
                results.append(run_latency_bench(mode, n, delay, rounds, seed,
                                                 proc_cost_us=proc_cost_us))
    return results


def write_csv(results: Iterable[BenchResult], fp: IO[str]) -> None:
    """Per-round rows plus mean/p50/p95 summary rows (round column holds the stat name)."""
    fp.write("mode,n,link_delay_ms,round,latency_ms\n")
    for res in results:
        for rnd, lat in enumerate(res.latencies_ms):
            fp.write(f"{res.mode},{res.n},{res.link_delay_ms},{rnd},{lat:.3f}\n")
        fp.write(f"{res.mode},{res.n},{res.link_delay_ms},mean,{res.mean_ms:.3f}\n")
        fp.write(f"{res.mode},{res.n},{res.link_delay_ms},p50,{res.p50_ms:.3f}\n")
        fp.write(f"{res.mode},{res.n},{res.link_delay_ms},p95,{res.p95_ms:.3f}\n")
