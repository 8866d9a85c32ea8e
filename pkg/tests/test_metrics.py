import dataclasses

import pytest
from hypothesis import given, settings, strategies as st

from recprefill.engine import RecomputeBreakdown
from recprefill.engine.simulator import RunRecord
from recprefill.errors import EmptyRun, TraceMismatch
from recprefill.metrics import cdf, compare, nearest_rank, percentiles, summarize


def _run(ttfts, prefix="r"):
    b = RecomputeBreakdown(10, 2, 3, 1, 3, 1, heavy_hitter_tokens=2)
    return [RunRecord(f"{prefix}{i}", 0, 0.0, 0.0, 0.0, t, t, t, 0.75, b, "rcllm", "affinity(0.7,0.3)")
            for i, t in enumerate(ttfts)]


def test_nearest_rank_one_to_hundred():
    assert percentiles(_run(range(1, 101))) == (50, 90, 99)
    assert nearest_rank([1, 2, 3, 4], 50) == 2
    assert nearest_rank([1, 2, 3, 4], 0) == 1


def test_single_record():
    assert percentiles(_run([0.42])) == (0.42, 0.42, 0.42)


def test_empty_run():
    with pytest.raises(EmptyRun):
        percentiles([])
    with pytest.raises(EmptyRun):
        cdf([])


def test_cdf_endpoints_and_steps():
    run = _run([3.0, 1.0, 2.0])
    assert cdf(run, 1).points == ((3.0, 1.0),)
    pts = cdf(_run([0.5] * 7), 4).points
    assert [x for x, _ in pts] == [0.5] * 4
    assert [y for _, y in pts] == [0.25, 0.5, 0.75, 1.0]
    with pytest.raises(ValueError):
        cdf(run, 0)


def test_compare_identity_and_ratios():
    run = _run([1.0, 2.0, 3.0, 4.0])
    c = compare(run, run)
    assert c.dominates and c.n_slower == 0
    assert all(v == 1.0 for v in c.speedup.values())
    slow = [dataclasses.replace(r, ttft=r.ttft * 2) for r in run]
    c = compare(run, slow)
    assert c.speedup == {"p50": 2.0, "p90": 2.0, "p99": 2.0, "mean": 2.0}
    assert c.dominates
    assert not compare(slow, run).dominates and compare(slow, run).n_slower == 4


def test_compare_mismatch():
    with pytest.raises(TraceMismatch):
        compare(_run([1, 2]), _run([1, 2], prefix="x"))
    with pytest.raises(TraceMismatch):
        compare(_run([1, 2]), _run([1, 2, 3]))


def test_summary_fields():
    run = _run([1.0, 2.0, 3.0])
    s = summarize(run, footprint=[(100, 2_750_000)], baseline=run)
    d = s.to_dict()
    assert d["n_requests"] == 3 and d["p50"] == 2.0 and d["mean"] == 2.0
    assert d["hit_ratio_mean"] == 0.75
    assert d["history_match_rate"] == 0.75
    # recomputed = 10 - (3 + 3 - 2) = 6 per request
    assert d["recompute_fraction"] == pytest.approx(0.6)
    assert d["footprint"] == [{"shard": 0, "tokens": 100, "bytes": 2_750_000}]
    assert d["speedup"]["p99"] == 1.0
    assert "speedup" not in summarize(run).to_dict()


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=200), st.integers(1, 50))
def test_ordering_properties(values, n_points):
    run = _run(values)
    p50, p90, p99 = percentiles(run)
    assert p50 <= p90 <= p99 <= max(values)
    pts = cdf(run, n_points).points
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    assert xs == sorted(xs) and ys == sorted(ys)
    assert ys[-1] == 1.0 and xs[-1] == max(values)
    assert 0 < ys[0]
