import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from recprefill.errors import DuplicateItem, InvalidConfig, ParseError, UnknownItem
from recprefill.workload import (ItemRecord, LengthDist, Request, ReviewRecord, SynthConfig, Trace,
                                 decompose_prompt, load_catalog, load_corpus, load_trace,
                                 synthesize_trace, write_catalog, write_corpus, write_trace,
                                 zipf_top_share)

# top 100 of 10^4 items at exponent 1.2, from a plain partial sum
ZIPF_TOP1PCT_SHARE = 0.7507658275046056


def _req(cands=("a", "b"), hist=(), instr=10, t=0.0, rid="r0"):
    return Request(rid, t, instr, tuple(hist), tuple(cands))


def test_decompose_offsets_and_roles():
    cat = {"a": ItemRecord("a", 5), "b": ItemRecord("b", 7)}
    hist = (ReviewRecord("u", "a", 5, (1, 2, 3)), ReviewRecord("u", "b", 4, (4,)))
    lay = decompose_prompt(_req(hist=hist), cat)
    assert [s.role for s in lay.segments] == ["Instruction", "HistoryToken", "HistoryToken",
                                              "ItemBlock", "ItemBlock"]
    assert [s.start for s in lay.segments] == [0, 10, 13, 14, 19]
    assert lay.total_tokens == 26
    assert lay.tokens_by_role("ItemBlock") == 12


def test_decompose_empty_history_and_no_instruction():
    cat = {"a": ItemRecord("a", 5)}
    lay = decompose_prompt(_req(cands=("a",), instr=0), cat)
    assert [s.role for s in lay.segments] == ["ItemBlock"]
    assert lay.total_tokens == 5


def test_decompose_unknown_item():
    with pytest.raises(UnknownItem):
        decompose_prompt(_req(cands=("zz",)), {"a": ItemRecord("a", 5)})


def test_catalog_roundtrip_and_errors(tmp_path):
    cat = {"x": ItemRecord("x", 3, "c1"), "y": ItemRecord("y", 9)}
    p = tmp_path / "cat.jsonl"
    write_catalog(cat, p)
    assert load_catalog(p) == cat
    p.write_text('{"item_id":"x","token_count":3}\n{"item_id":"x","token_count":4}\n')
    with pytest.raises(DuplicateItem):
        load_catalog(p)
    p.write_text('{"item_id":"x","token_count":3}\n{bad json\n')
    with pytest.raises(ParseError) as err:
        load_catalog(p)
    assert err.value.line == 2


def test_empty_catalog_warns(tmp_path, caplog):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    assert load_catalog(p) == {}
    assert "empty" in caplog.text


def test_trace_and_corpus_roundtrip(tmp_path, small_world):
    catalog, corpus, trace, _ = small_world
    write_trace(trace, tmp_path / "t.jsonl")
    write_corpus(corpus, tmp_path / "c.jsonl")
    again = load_trace(tmp_path / "t.jsonl")

    def key(r):
        # history timestamps are not part of the trace format
        return (r.request_id, r.arrival_time, r.instruction_tokens, r.candidates, r.user_id,
                tuple((h.item_id, h.rating, h.token_ids) for h in r.history))

    assert [key(r) for r in again.requests] == [key(r) for r in trace.requests]
    assert load_corpus(tmp_path / "c.jsonl") == corpus


def test_unsorted_trace_rejected():
    with pytest.raises(ValueError):
        Trace((_req(t=2.0, rid="a"), _req(t=1.0, rid="b")))


def test_synthesis_is_deterministic(small_world):
    from conftest import SMALL
    again = synthesize_trace(SMALL, 3)
    assert again[2].requests == small_world[2].requests
    assert again[0] == small_world[0]


def test_default_prompt_length_band(default_world):
    catalog, _, trace = default_world
    totals = sorted(decompose_prompt(r, catalog).total_tokens for r in trace.requests)
    median = totals[len(totals) // 2]
    assert 2200 <= median <= 3000


def test_zipf_top_share_oracle():
    assert zipf_top_share(10_000, 1.2, 100) == pytest.approx(ZIPF_TOP1PCT_SHARE, rel=1e-12)


def test_top_one_percent_share_of_candidates():
    cfg = SynthConfig(n_items=10_000, n_users=1000, n_requests=3000, n_clusters=200)
    _, _, trace = synthesize_trace(cfg, 11)
    counts = np.zeros(cfg.n_items)
    for r in trace.requests:
        for c in r.candidates:
            counts[int(c[1:])] += 1
    share = np.sort(counts)[::-1][:100].sum() / counts.sum()
    # without-replacement draws and clustering flatten the head, never sharpen it
    assert 0.30 <= share <= ZIPF_TOP1PCT_SHARE


def test_rank_histogram_is_non_increasing_over_log_bins():
    cfg = SynthConfig(n_items=10_000, n_users=1000, n_requests=4000, n_clusters=200, secondary_share=0.0,
                      cluster_coherence=0.0)
    _, _, trace = synthesize_trace(cfg, 5)
    counts = np.zeros(cfg.n_items)
    for r in trace.requests:
        for c in r.candidates:
            counts[int(c[1:])] += 1
    edges = np.unique(np.logspace(0, 4, 17).astype(int)) - 1
    per_rank = [counts[a:b].mean() for a, b in zip(edges[:-1], edges[1:]) if b > a]
    assert all(x >= y for x, y in zip(per_rank, per_rank[1:]))
    ranks = np.arange(1, 201)
    slope = np.polyfit(np.log(ranks[9:]), np.log(counts[9:200] + 1e-9), 1)[0]
    assert -1.2 - 0.15 <= slope <= -1.2 + 0.15


def test_poisson_arrivals(default_world):
    _, _, trace = default_world
    t = np.asarray([r.arrival_time for r in trace.requests])
    gaps = np.diff(t)
    assert t[0] == 0.0
    assert gaps.mean() == pytest.approx(1 / 15.0, rel=0.05)
    # exponential gaps: coefficient of variation near 1
    assert gaps.std() / gaps.mean() == pytest.approx(1.0, abs=0.08)


def test_cluster_coherence_in_candidates(small_world):
    _, _, trace, world = small_world
    cl = world.cluster_of()
    home = world.user_cluster
    frac = np.mean([np.mean([cl[c] == home[int(r.user_id[1:])] for c in r.candidates])
                    for r in trace.requests])
    # coherence 0.9 split evenly with a second interest
    assert 0.35 <= frac <= 0.55


@pytest.mark.parametrize("bad", [dict(n_items=0), dict(zipf_s=0), dict(cluster_coherence=1.5),
                                 dict(candidates_per_request=5000, n_items=100, n_clusters=10),
                                 dict(secondary_share=-0.1)])
def test_invalid_synth_config(bad):
    with pytest.raises(InvalidConfig):
        SynthConfig(**bad)


@given(st.sampled_from(["fixed:5", "uniform:3:9", "lognormal:80:0.4:8:400"]))
def test_length_dist_format_roundtrip(text):
    assert LengthDist.parse(text).format() == text


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 30), st.integers(0, 40), st.lists(st.integers(1, 50), min_size=1, max_size=6))
def test_decompose_partitions_prompt(n_instr, n_hist, sizes):
    cat = {f"i{j}": ItemRecord(f"i{j}", s) for j, s in enumerate(sizes)}
    hist = (ReviewRecord("u", "i0", 3, tuple(range(n_hist))),) if n_hist else ()
    lay = decompose_prompt(Request("r", 0.0, n_instr, hist, tuple(cat)), cat)
    assert lay.total_tokens == n_instr + n_hist + sum(sizes)
    ends = [s.start + s.length for s in lay.segments]
    assert [s.start for s in lay.segments[1:]] == ends[:-1]
