"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line."""

import dataclasses
import json
import math
from pathlib import Path

import numpy as np
import pytest

from recprefill.cli import main
from recprefill.engine import (EngineMode, RecomputePolicy, importance_scores, rope_encode,
                               rope_realign, select_heavy_hitters, simulate)
from recprefill.metrics import compare, percentiles
from recprefill.placement import (PartitionConfig, compute_heat, edge_cut, footprint, hit_matrix,
                                  partition_labels, place_items, random_placement)
from recprefill.scheduler import Policy
from recprefill.semlib import PrototypeLibrary, build_library, match_rate
from recprefill.workload import LengthDist, SynthConfig, Trace, synthesize_trace

from test_engine import _brute_scores, _complex_encode
from test_placement import _balanced, _brute_force_min_cut, _cliques, _random_graph

pytestmark = pytest.mark.acceptance

ROOT = Path(__file__).resolve().parents[1]
DEFAULT = SynthConfig()


@pytest.fixture(scope="module")
def default_plan(default_world):
    catalog, corpus, trace = default_world
    return place_items(catalog, corpus, PartitionConfig(k=40), trace=trace)


@pytest.fixture(scope="module")
def default_library(default_world):
    return build_library(default_world[1], 100_000, base_position=DEFAULT.instruction_tokens)


def _scaled(trace, factor):
    reqs = tuple(dataclasses.replace(r, arrival_time=r.arrival_time / factor) for r in trace.requests)
    return Trace(reqs, trace.source, trace.qps * factor)


def _mean_ttft(run):
    return float(np.mean([r.ttft for r in run]))


def test_criterion_1_footprint_scaling(verdict):
    cfg = SynthConfig(n_items=778_000, n_users=2000, n_requests=2000,
                      item_token_dist=LengthDist.parse("lognormal:85:0.35:16:512"))
    catalog, corpus, trace = synthesize_trace(cfg, 1)
    total = sum(i.token_count for i in catalog.values())
    one = footprint(place_items(catalog, corpus, PartitionConfig(k=1), trace=trace))
    fp = [t for t, _ in footprint(place_items(catalog, corpus, PartitionConfig(k=40), trace=trace))]
    dev = max(abs(t / (total / 40) - 1) for t in fp)
    ok = one[0][0] == total and 60e6 <= total <= 72e6 and dev <= 0.15
    verdict(1, ok, f"total {total / 1e6:.2f}M tokens at K=1; K=40 shards {min(fp) / 1e6:.3f}M-"
                   f"{max(fp) / 1e6:.3f}M, max deviation from total/40 {dev:.1%} (limit 15%)")


def _hit_curve(catalog, corpus, history, evaluate, ks=(20, 40, 80, 100)):
    heat = compute_heat(corpus, history, catalog)
    means, rand, med40 = [], [], None
    for k in ks:
        plan = place_items(catalog, corpus, PartitionConfig(k=k), trace=history, heat=heat)
        best = hit_matrix(plan, evaluate).max(axis=1)
        rplan = random_placement(catalog, heat, k, 0.001, seed=k)
        means.append(float(best.mean()))
        rand.append(float(hit_matrix(rplan, evaluate).max(axis=1).mean()))
        if k == 40:
            med40 = float(np.median(best))
    return means, rand, med40


def test_criterion_2_hit_rate_locality(verdict, clustered_world):
    catalog, corpus, trace = clustered_world
    means, rand, med40 = _hit_curve(catalog, corpus, trace, trace.requests)
    a = all(m > r for m, r in zip(means, rand))
    b = all(x >= y for x, y in zip(means, means[1:]))
    c = med40 >= 0.85
    # informational: place from the first half, score the unseen second half
    half = len(trace.requests) // 2
    h_means, h_rand, h_med = _hit_curve(catalog, corpus, Trace(trace.requests[:half]), trace.requests[half:])
    verdict(2, a and b and c,
            f"mean hit at K=20/40/80/100 {[round(m, 4) for m in means]} vs random "
            f"{[round(r, 3) for r in rand]}; non-increasing {b}; K=40 median {med40:.3f} (>= 0.85); "
            f"held-out half: {[round(m, 4) for m in h_means]} vs random {[round(r, 3) for r in h_rand]}, "
            f"K=40 median {h_med:.3f}")


def test_criterion_3_partitioner_quality(verdict):
    g = _cliques(5)
    labels, eps = partition_labels(g, PartitionConfig(k=2, hot_fraction=0.0))
    planted = edge_cut(g.adjacency, labels) == 0 == _brute_force_min_cut(g.adjacency, 10)
    balanced = _balanced(g, labels, 2, eps)
    rng = np.random.default_rng(2024)
    wins = 0
    for _ in range(50):
        n = int(rng.integers(20, 61))
        k = int(rng.choice([2, 3, 4]))
        rg = _random_graph(rng, n, float(rng.uniform(0.05, 0.3)))
        lab, e = partition_labels(rg, PartitionConfig(k=k, hot_fraction=0.0, balance_eps=0.1))
        balanced &= _balanced(rg, lab, k, e)
        best = math.inf
        for _ in range(100):
            perm = rng.permutation(n)
            part = np.empty(n, dtype=int)
            part[perm] = np.arange(n) % k
            best = min(best, edge_cut(rg.adjacency, part))
        wins += edge_cut(rg.adjacency, lab) <= best
    verdict(3, planted and balanced and wins == 50,
            f"planted cliques cut 0 (brute-force optimum 0) {planted}; {wins}/50 random graphs "
            f"at or below best of 100 random balanced partitions; balance held {balanced}")


def test_criterion_4_scheduler_ablation(verdict, default_world, default_plan, default_library):
    catalog, _, trace = default_world
    rows, ok = [], True
    hit_means = []
    for factor in (1, 2, 4, 8):
        t = _scaled(trace, factor)
        m = {name: _mean_ttft(simulate(t, catalog, default_plan, default_library, pol, seed=7))
             for name, pol in (("affinity", Policy.affinity(0.7, 0.3)), ("hit_only", Policy.hit_only()),
                               ("load_only", Policy.load_only()))}
        ok &= m["affinity"] <= 1.05 * min(m["hit_only"], m["load_only"])
        hit_means.append(m["hit_only"])
        rows.append(f"x{factor}: aff {m['affinity']:.4f} hit {m['hit_only']:.4f} load {m['load_only']:.4f}")
    degrade = max(hit_means) / min(hit_means)
    verdict(4, ok and degrade >= 1.5,
            "; ".join(rows) + f"; HitOnly degradation {degrade:.2f}x (>= 1.5)")


def test_criterion_5_ttft_distribution_shift(verdict, default_world, default_plan, default_library):
    catalog, _, trace = default_world
    rc = simulate(trace, catalog, default_plan, default_library, seed=7)
    pc_free = simulate(trace, catalog, default_plan, default_library, mode=EngineMode.PREFIX_CACHE, seed=7)
    pc = simulate(trace, catalog, default_plan, default_library, mode=EngineMode.PREFIX_CACHE, seed=7,
                  routes=[r.routed_node for r in rc])
    free, replay = compare(rc, pc_free), compare(rc, pc)
    ok = (1.3 <= free.speedup["p50"] <= 2.5 and 1.3 <= free.speedup["p99"] <= 3.0
          and 1.3 <= replay.speedup["p50"] <= 2.5 and 1.3 <= replay.speedup["p99"] <= 3.0
          and replay.dominates)
    verdict(5, ok,
            f"independent routing P50 {free.speedup['p50']:.3f}x P99 {free.speedup['p99']:.3f}x "
            f"({free.n_slower} requests slower); same routes P50 {replay.speedup['p50']:.3f}x "
            f"P99 {replay.speedup['p99']:.3f}x dominates {replay.dominates}")


def test_criterion_6_recompute_ratio_monotonicity(verdict, default_world, default_plan, default_library):
    catalog, _, trace = default_world
    pcts = []
    for r in (0.1, 0.3, 0.5, 0.8):
        run = simulate(trace, catalog, default_plan, default_library, seed=7,
                       policy=RecomputePolicy.uniform(r))
        pcts.append(percentiles(run))
    mono = all(all(a <= b for a, b in zip(lo, hi)) for lo, hi in zip(pcts, pcts[1:]))
    rc1 = simulate(trace, catalog, None, None, n_nodes=40, seed=7, policy=RecomputePolicy.uniform(1.0))
    full = simulate(trace, catalog, None, None, n_nodes=40, seed=7, mode=EngineMode.FULL_RECOMPUTE)
    equal = ([(r.breakdown, r.ttft, r.routed_node) for r in rc1]
             == [(r.breakdown, r.ttft, r.routed_node) for r in full])
    verdict(6, mono and equal,
            "P50/P90/P99 at r=.1/.3/.5/.8 " + " ".join(f"({a:.4f},{b:.4f},{c:.4f})" for a, b, c in pcts)
            + f"; r=1 empty caches equals full recompute {equal}")


def test_criterion_7_importance_oracle(verdict):
    rng = np.random.default_rng(7)
    worst, topk_ok = 0.0, True
    for case in range(200):
        n = int(rng.integers(1, 257))
        d = int(rng.integers(1, 9))
        lam = [0.0, 0.3, 0.5, 1.0][case % 4]
        attn = rng.random((n, int(rng.integers(1, 6))))
        kn, kc, vn, vc = (rng.standard_normal((n, d)) for _ in range(4))
        got = importance_scores(attn, kn, kc, vn, vc, lam)
        worst = max(worst, float(np.max(np.abs(got - _brute_scores(attn, kn, kc, vn, vc, lam)))))
        # coarse scores force ties
        scores = np.round(got, 1)
        r = float(rng.random())
        k = math.ceil(round(r * n, 9))
        ranked = sorted(range(n), key=lambda i: (-scores[i], i))
        topk_ok &= select_heavy_hitters(scores, r).tolist() == sorted(ranked[:k])
    verdict(7, worst < 1e-12 and topk_ok,
            f"max abs diff vs term-by-term evaluation {worst:.2e} (< 1e-12); top-k with ties exact {topk_ok}")


def test_criterion_8_rope(verdict):
    rng = np.random.default_rng(8)
    x = rng.standard_normal((1000, 128))
    enc = rope_encode(x, 50)
    ident = float(np.max(np.abs(rope_realign(enc, 50, 50) - enc)))
    add = float(np.max(np.abs(rope_realign(rope_realign(enc, 50, 700), 700, 3000) - rope_realign(enc, 50, 3000))))
    moved = rope_realign(enc, 50, 1234)
    norm = float(np.max(np.abs(np.linalg.norm(moved, axis=1) - np.linalg.norm(enc, axis=1))))
    target = float(np.max(np.abs(moved - _complex_encode(x, 1234 + np.arange(1000)))))
    ok = ident == 0.0 and max(add, norm, target) < 1e-9
    verdict(8, ok, f"identity {ident:.1e}, additivity {add:.1e}, norm {norm:.1e}, encode-at-target {target:.1e}")


def test_criterion_9_semantic_library(verdict, default_world, default_library):
    trace = default_world[2]
    rate = match_rate(trace, default_library, threshold=0.95)
    rng = np.random.default_rng(9)
    base = rng.standard_normal((5000, default_library.emb.dim))
    lib = PrototypeLibrary.from_vectors(base, [0] * 5000, default_library.emb, default_library.lsh_cfg)
    q = lib.centroids[rng.choice(5000, 1000, replace=False)] + 0.03 * rng.standard_normal((1000, lib.emb.dim))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    ids, _ = lib.match_vectors(q, np.zeros(1000, dtype=int))
    agree = float(np.mean(ids == np.argmax(q @ lib.centroids.T, axis=1)))
    big_cfg = SynthConfig(vocab_size=50_000, vocab_zipf_s=0.5, n_users=3000, n_items=2000, n_clusters=40)
    big = build_library(synthesize_trace(big_cfg, 3)[1], 100_000, base_position=207)
    ok = rate >= 0.90 and agree >= 0.90 and len(big) == 100_000 and big.bytes == 27_500_000_000
    verdict(9, ok, f"held-out match rate {rate:.3f} (>= 0.90); LSH/exact agreement {agree:.1%}; "
                   f"{len(big)} prototypes = {big.bytes / 1e9:.1f} GB")


def _cli_pipeline(d: Path):
    cfg = str(ROOT / "configs" / "default.ini")
    f = {n: str(d / n) for n in ("catalog.jsonl", "corpus.jsonl", "trace.jsonl", "plan.json", "lib.jsonl",
                                 "rc.jsonl", "pc.jsonl", "rc.summary.json", "cmp.json", "report.json")}
    steps = [
        ["synth-trace", "--config", cfg, "--out-dir", str(d)],
        ["build-placement", "--config", cfg, "--catalog", f["catalog.jsonl"], "--corpus", f["corpus.jsonl"],
         "--trace", f["trace.jsonl"], "--out", f["plan.json"]],
        ["build-semlib", "--config", cfg, "--corpus", f["corpus.jsonl"], "--out", f["lib.jsonl"]],
        ["simulate", "--config", cfg, "--catalog", f["catalog.jsonl"], "--trace", f["trace.jsonl"],
         "--plan", f["plan.json"], "--library", f["lib.jsonl"], "--out", f["rc.jsonl"],
         "--summary", f["rc.summary.json"]],
        ["simulate", "--config", cfg, "--catalog", f["catalog.jsonl"], "--trace", f["trace.jsonl"],
         "--plan", f["plan.json"], "--mode", "prefix_cache", "--routes-from", f["rc.jsonl"], "--out", f["pc.jsonl"]],
        ["compare", "--run", f["rc.jsonl"], "--baseline", f["pc.jsonl"], "--out", f["cmp.json"]],
        ["report", "--run", f["rc.jsonl"], "--baseline", f["pc.jsonl"], "--plan", f["plan.json"],
         "--library", f["lib.jsonl"], "--trace", f["trace.jsonl"], "--out", f["report.json"]],
    ]
    codes = [main(s) for s in steps]
    return codes, {n: Path(p).read_bytes() for n, p in f.items() if Path(p).exists()}


def test_criterion_10_determinism(verdict, tmp_path):
    codes1, first = _cli_pipeline(tmp_path)
    codes2, second = _cli_pipeline(tmp_path)
    same = sorted(n for n in first if first[n] == second.get(n))
    ok = codes1 == codes2 == [0] * 7 and len(first) == 10 and same == sorted(first)
    summary = json.loads(first["cmp.json"]) if "cmp.json" in first else {}
    verdict(10, ok, f"{len(same)}/{len(first)} artifacts byte-identical across two runs of the bundled "
                    f"config; exit codes {codes1}; replayed-route speedup {summary.get('speedup')}")
