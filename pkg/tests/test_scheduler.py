import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from recprefill.errors import InvalidConfig
from recprefill.scheduler import (NodeState, Policy, Router, affinity, estimate_hit, load, route,
                                  score_vector)
from recprefill.workload import Request


def _req(cands, rid="r"):
    return Request(rid, 0.0, 10, (), tuple(cands))


def test_hit_estimate_example():
    node = NodeState(0, frozenset({"a", "b", "c"}))
    assert estimate_hit(_req(["a", "b", "c", "z"]), node) == 0.75


def test_load_normalisation():
    cluster = [NodeState(0, frozenset(), 300), NodeState(1, frozenset(), 600), NodeState(2, frozenset(), 0)]
    assert [load(n, cluster) for n in cluster] == [0.5, 1.0, 0.0]
    idle = [NodeState(0, frozenset()), NodeState(1, frozenset())]
    assert load(idle[0], idle) == 0.0


def test_affinity_score_example():
    cluster = [NodeState(0, frozenset({"a", "b", "c"}), 500), NodeState(1, frozenset(), 1000)]
    # 0.5 * 0.75 + 0.5 * (1 - 0.5)
    assert affinity(_req(["a", "b", "c", "d"]), cluster[0], 0.5, 0.5, cluster) == pytest.approx(0.625)
    assert affinity(_req(["a", "d"]), cluster[1], 0.5, 0.5, cluster) == pytest.approx(0.0)


def test_route_prefers_node_holding_all_items():
    cluster = [NodeState(q, frozenset({"x", "y"} if q == 7 else set())) for q in range(10)]
    assert route(_req(["x", "y"]), cluster, Policy.affinity()) == 7


def test_ties_resolve_to_lowest_node_id():
    cluster = [NodeState(q, frozenset()) for q in (3, 1, 2)]
    assert route(_req(["x"]), cluster, Policy.affinity()) == 1
    assert route(_req(["x"]), cluster, Policy.least_loaded()) == 1


def test_round_robin_cycles():
    cluster = [NodeState(q, frozenset({"a"})) for q in range(3)]
    router = Router(Policy.round_robin())
    assert [route(_req(["a"]), cluster, router.policy, router) for _ in range(6)] == [0, 1, 2, 0, 1, 2]


def test_least_loaded_and_load_only():
    cluster = [NodeState(0, frozenset({"a"}), 900), NodeState(1, frozenset(), 100),
               NodeState(2, frozenset(), 400)]
    assert route(_req(["a"]), cluster, Policy.least_loaded()) == 1
    assert route(_req(["a"]), cluster, Policy.load_only()) == 1
    assert route(_req(["a"]), cluster, Policy.hit_only()) == 0


def test_hit_only_equals_affinity_one_zero(small_world, small_plan):
    trace = small_world[2]
    rng = np.random.default_rng(0)
    manifests = [m.items for m in small_plan.manifests]
    a, b = Router(Policy.hit_only()), Router(Policy.affinity(1.0, 0.0))
    for req in trace.requests:
        cluster = [NodeState(q, m, int(rng.integers(0, 5000))) for q, m in enumerate(manifests)]
        assert a.route(req, cluster) == b.route(req, cluster)


def test_policy_parse_and_validation():
    assert Policy.parse("affinity:0.5,0.5") == Policy.affinity(0.5, 0.5)
    assert Policy.parse("hit-only") == Policy.hit_only()
    assert Policy.parse("affinity", 0.2, 0.8).weights == (0.2, 0.8)
    assert Policy.affinity(0.7, 0.3).label == "affinity(0.7,0.3)"
    for bad in ("nope", "affinity:1", "affinity:x,y"):
        with pytest.raises(InvalidConfig):
            Policy.parse(bad)
    with pytest.raises(InvalidConfig):
        Policy.affinity(0, 0)
    with pytest.raises(InvalidConfig):
        Policy.affinity(-1, 1)


def test_empty_inputs():
    with pytest.raises(ValueError):
        estimate_hit(_req([]), NodeState(0, frozenset()))
    with pytest.raises(ValueError):
        Router(Policy.affinity()).choose(np.array([]), np.array([], dtype=np.int64))
    with pytest.raises(ValueError):
        NodeState(0, frozenset(), -1)


cluster_st = st.lists(st.tuples(st.sets(st.sampled_from("abcdefgh")), st.integers(0, 10_000)),
                      min_size=1, max_size=8)
cands_st = st.lists(st.sampled_from("abcdefghij"), min_size=1, max_size=10, unique=True)


@settings(max_examples=200, deadline=None)
@given(cluster_st, cands_st, st.integers(0, 6), st.floats(0.05, 1), st.floats(0.05, 1))
def test_scale_invariance(spec, cands, log_c, alpha, beta):
    c = 2 ** log_c
    base = [NodeState(q, frozenset(m), b) for q, (m, b) in enumerate(spec)]
    scaled = [n.with_backlog(n.queue_backlog_tokens * c) for n in base]
    if max(n.queue_backlog_tokens for n in base) == 0:
        return
    pol = Policy.affinity(alpha, beta)
    assert route(_req(cands), base, pol) == route(_req(cands), scaled, pol)


@settings(max_examples=200, deadline=None)
@given(cluster_st, cands_st, st.data())
def test_adding_a_cached_candidate_keeps_the_winner(spec, cands, data):
    cluster = [NodeState(q, frozenset(m), b) for q, (m, b) in enumerate(spec)]
    pol = Policy.affinity()
    req = _req(cands)
    win = route(req, cluster, pol)
    missing = sorted(set(cands) - cluster[win].manifest)
    if not missing:
        return
    item = data.draw(st.sampled_from(missing))
    cluster[win] = NodeState(win, cluster[win].manifest | {item}, cluster[win].queue_backlog_tokens)
    assert route(req, cluster, pol) == win


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=10), st.data())
def test_score_vector_matches_scalar_formula(hits, data):
    backlogs = np.asarray(data.draw(st.lists(st.integers(0, 1000), min_size=len(hits), max_size=len(hits))))
    s = score_vector(np.asarray(hits), backlogs, 0.7, 0.3)
    peak = max(1, backlogs.max())
    for h, b, v in zip(hits, backlogs, s):
        assert v == pytest.approx(0.7 * h + 0.3 * (1 - b / peak), abs=1e-12)
