"""TTFT percentiles, CDFs, run comparison and summaries."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyRun, TraceMismatch

PERCENTILES = (50, 90, 99)


def _ttfts(records) -> np.ndarray:
    if not records:
        raise EmptyRun("run contains no records")
    return np.asarray([r.ttft for r in records], dtype=np.float64)


def nearest_rank(sorted_values: Sequence[float], p: float) -> float:
    """Smallest value with at least ``p`` percent of the sample at or below it."""
    n = len(sorted_values)
    if n == 0:
        raise EmptyRun("no values")
    rank = max(1, int(math.ceil(round(p / 100.0 * n, 9))))
    return float(sorted_values[min(rank, n) - 1])


def percentiles(records, ps: Sequence[float] = PERCENTILES) -> Tuple[float, ...]:
    values = np.sort(_ttfts(records))
    return tuple(nearest_rank(values, p) for p in ps)


@dataclass(frozen=True)
class CdfSeries:
    points: Tuple[Tuple[float, float], ...]

    def to_dict(self) -> dict:
        return {"points": [list(p) for p in self.points]}


def cdf(records, n_points: int = 100) -> CdfSeries:
    """Empirical CDF sampled at quantile levels ``j / n_points`` for j = 1..n_points."""
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    values = np.sort(_ttfts(records))
    pts = tuple((nearest_rank(values, 100.0 * j / n_points), j / n_points) for j in range(1, n_points + 1))
    return CdfSeries(pts)


@dataclass(frozen=True)
class Comparison:
    speedup: Dict[str, float]         # "p50" -> baseline / candidate
    dominates: bool                   # candidate ttft <= baseline ttft on every request
    n_requests: int
    n_slower: int

    def to_dict(self) -> dict:
        return asdict(self)


def compare(run_a, run_b, ps: Sequence[float] = PERCENTILES) -> Comparison:
    """Speedups of ``run_a`` over ``run_b`` (``b_pXX / a_pXX``) and the dominance flag."""
    a = {r.request_id: r.ttft for r in run_a}
    b = {r.request_id: r.ttft for r in run_b}
    if not a or not b:
        raise EmptyRun("cannot compare an empty run")
    if a.keys() != b.keys():
        raise TraceMismatch(f"runs cover different requests ({len(a.keys() ^ b.keys())} differ)")
    pa, pb = percentiles(run_a, ps), percentiles(run_b, ps)
    speedup = {f"p{p:g}": (y / x if x > 0 else math.inf) for p, x, y in zip(ps, pa, pb)}
    speedup["mean"] = float(np.mean(list(b.values())) / np.mean(list(a.values())))
    slower = sum(1 for rid in a if a[rid] > b[rid])
    return Comparison(speedup, slower == 0, len(a), slower)


@dataclass(frozen=True)
class Summary:
    n_requests: int
    p50: float
    p90: float
    p99: float
    mean: float
    hit_ratio_mean: float
    hit_ratio_median: float
    history_match_rate: float
    recompute_fraction: float
    mode: str
    policy: str
    footprint: Optional[List[Dict[str, int]]] = None
    speedup: Optional[Dict[str, float]] = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def summarize(records, footprint: Optional[Sequence[Tuple[int, int]]] = None,
              baseline=None) -> Summary:
    ttft = _ttfts(records)
    p50, p90, p99 = percentiles(records)
    hits = np.asarray([r.hit_ratio for r in records])
    matched = sum(r.breakdown.history_matched_tokens for r in records)
    hist = matched + sum(r.breakdown.history_unmatched_tokens for r in records)
    total = sum(r.breakdown.total_tokens for r in records)
    rec = sum(r.breakdown.recomputed_tokens for r in records)
    fp = None if footprint is None else [{"shard": q, "tokens": int(t), "bytes": int(b)}
                                         for q, (t, b) in enumerate(footprint)]
    speed = compare(records, baseline).speedup if baseline is not None else None
    return Summary(len(records), p50, p90, p99, float(ttft.mean()), float(hits.mean()),
                   float(np.median(hits)), matched / hist if hist else 0.0,
                   rec / total if total else 0.0, records[0].mode, records[0].policy, fp, speed)
