"""Latency benchmark: determinism, orderings, CSV shape."""

import io

from flowledger.chain.bench import run_latency_bench, write_csv


def test_same_seed_same_table():
    a = run_latency_bench("pbft", 7, 10, rounds=8, seed=42)
    b = run_latency_bench("pbft", 7, 10, rounds=8, seed=42)
    assert a.latencies_ms == b.latencies_ms


def test_different_seed_different_jitter():
    a = run_latency_bench("pbft", 7, 10, rounds=8, seed=1)
    b = run_latency_bench("pbft", 7, 10, rounds=8, seed=2)
    assert a.latencies_ms != b.latencies_ms


def test_pbft_latency_floor_three_link_delays():
    res = run_latency_bench("pbft", 7, 10, rounds=15, seed=3)
    assert res.mean_ms >= 30.0  # three message legs of 10 ms each


def test_pbft_latency_grows_with_node_count():
    means = [run_latency_bench("pbft", n, 10, rounds=15, seed=3).mean_ms for n in (7, 13, 31)]
    assert means[0] < means[1] < means[2]


def test_pbft_latency_grows_with_link_delay():
    means = [run_latency_bench("pbft", 7, d, rounds=15, seed=3).mean_ms for d in (10, 20, 50)]
    assert means[0] < means[1] < means[2]


def test_committee_mode_slower_at_small_n_gap_narrows():
    ratios = []
    for n in (7, 31):
        pbft = run_latency_bench("pbft", n, 10, rounds=15, seed=3).mean_ms
        rpbft = run_latency_bench("rpbft", n, 10, rounds=15, seed=3).mean_ms
        assert rpbft > pbft, f"committee mode should pay a dissemination round at n={n}"
        ratios.append(rpbft / pbft)
    assert ratios[1] < ratios[0], "the relative gap should shrink as n grows"


def test_csv_has_rounds_and_summary():
    res = run_latency_bench("pbft", 7, 10, rounds=5, seed=0)
    fp = io.StringIO()
    write_csv([res], fp)
    lines = fp.getvalue().strip().splitlines()
    assert lines[0] == "mode,n,link_delay_ms,round,latency_ms"
    assert len(lines) == 1 + 5 + 3  # header + rounds + mean/p50/p95
    assert lines[-3].split(",")[3] == "mean"
    stats = {ln.split(",")[3]: float(ln.split(",")[4]) for ln in lines[-3:]}
    per_round = [float(ln.split(",")[4]) for ln in lines[1:6]]
    assert abs(stats["mean"] - sum(per_round) / 5) < 0.01
