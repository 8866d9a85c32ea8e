"""Discrete-event multi-instance prefill simulation."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from ..errors import InvalidConfig, ParseError, UnknownItem
from ..placement.plan import PlacementPlan
from ..scheduler import Policy, Router
from ..semlib import PrototypeLibrary, position_buckets
from ..workload import ItemRecord, Trace
from .cost import CostModel, prefill_latency
from .recompute import EngineMode, RecomputeBreakdown, RecomputePolicy, _classify


@dataclass(frozen=True)
class RunRecord:
    request_id: str
    routed_node: int
    arrival: float
    enqueue: float
    start: float
    finish: float
    ttft: float
    service_time: float
    hit_ratio: float
    breakdown: RecomputeBreakdown
    mode: str
    policy: str

    def to_dict(self) -> dict:
        d = asdict(self)
        d["breakdown"] = self.breakdown.to_dict()
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "RunRecord":
        fields = dict(obj)
        fields["breakdown"] = RecomputeBreakdown(**fields["breakdown"])
        return cls(**fields)


@dataclass
class _Prepared:
    item_tokens: List[np.ndarray]
    item_shard: List[np.ndarray]       # -1 replicated, -2 not placed, else shard index
    hist_lengths: List[np.ndarray]
    hist_cos: List[Optional[np.ndarray]]


def _prepare(trace: Trace, catalog: Mapping[str, ItemRecord], plan: Optional[PlacementPlan],
             lib: Optional[PrototypeLibrary]) -> _Prepared:
    shard_of: Dict[str, int] = plan.shard_of() if plan is not None else {}
    replicated = plan.replicated if plan is not None else frozenset()
    item_tokens, item_shard, hist_lengths, hist_cos = [], [], [], []
    all_tok, all_bkt = [], []
    for req in trace.requests:
        toks = []
        shards = []
        for c in req.candidates:
            item = catalog.get(c)
            if item is None:
                raise UnknownItem(c)
            toks.append(item.token_count)
            shards.append(-1 if c in replicated else shard_of.get(c, -2))
        item_tokens.append(np.asarray(toks, dtype=np.int64))
        item_shard.append(np.asarray(shards, dtype=np.int64))
        lengths = np.asarray([len(r.token_ids) for r in req.history], dtype=np.int64)
        hist_lengths.append(lengths)
        if lib is not None and lengths.sum():
            seq = np.fromiter((t for r in req.history for t in r.token_ids), dtype=np.int64)
            pos = req.instruction_tokens + np.arange(len(seq), dtype=np.int64)
            all_tok.append(seq)
            all_bkt.append(position_buckets(pos, lib.emb))
    if lib is not None and all_tok and len(lib):
        _, cos = lib.match_pairs(np.concatenate(all_tok), np.concatenate(all_bkt))
        offset = 0
        for lengths in hist_lengths:
            n = int(lengths.sum())
            hist_cos.append(cos[offset:offset + n] if n else None)
            offset += n
    else:
        hist_cos = [None] * len(hist_lengths)
    return _Prepared(item_tokens, item_shard, hist_lengths, hist_cos)


def simulate(trace: Trace, catalog: Mapping[str, ItemRecord], plan: Optional[PlacementPlan],
             lib: Optional[PrototypeLibrary], sched_policy: Policy = Policy.affinity(),
             cm: CostModel = CostModel(), mode: EngineMode = EngineMode.RCLLM,
             policy: RecomputePolicy = RecomputePolicy(), seed: int = 0,
             n_nodes: Optional[int] = None, remote_fetch: bool = False,
             routes: Optional[Sequence[int]] = None) -> List[RunRecord]:
    """Route and serve every request of ``trace`` in arrival order.

    Each node is a FIFO server. Routing sees a consistent snapshot of every
    node's backlog: recompute tokens of requests routed there and not yet
    finished at the arrival instant. ``plan=None`` runs with empty item caches
    on ``n_nodes`` nodes; ``lib=None`` leaves every history token unmatched.
    ``routes`` replays fixed routing decisions (one node per request) instead
    of consulting the scheduler.
    """
    mode = EngineMode(mode)
    k = plan.k if plan is not None else n_nodes
    if k is None or k < 1:
        raise InvalidConfig("simulate needs a plan or a positive n_nodes")
    if plan is not None and n_nodes is not None and n_nodes != plan.k:
        raise InvalidConfig("n_nodes disagrees with the placement plan")
    if routes is not None:
        routes = [int(x) for x in routes]
        if len(routes) != len(trace.requests):
            raise InvalidConfig("routes must give one node per request")
        if any(not 0 <= x < k for x in routes):
            raise InvalidConfig("replayed route outside the cluster")
    label = "replay" if routes is not None else sched_policy.label
    prep = _prepare(trace, catalog, plan, lib if mode is EngineMode.RCLLM else None)
    router = Router(sched_policy)
    busy_until = np.zeros(k)
    backlog = np.zeros(k, dtype=np.int64)
    pending: List[deque] = [deque() for _ in range(k)]
    last_instr: List[Optional[int]] = [None] * k
    records: List[RunRecord] = []
    kv = cm.kv_bytes_per_token
    for idx, req in enumerate(trace.requests):
        t = req.arrival_time
        for q in range(k):
            dq = pending[q]
            while dq and dq[0][0] <= t:
                backlog[q] -= dq.popleft()[1]
        shards = prep.item_shard[idx]
        n_cand = len(shards)
        counts = np.bincount(shards[shards >= 0], minlength=k)[:k] + np.count_nonzero(shards == -1)
        hits = counts / n_cand
        q = routes[idx] if routes is not None else router.choose(hits, backlog)
        local = (shards == -1) | (shards == q)
        remote = (shards >= 0) & (shards != q) if remote_fetch else np.zeros(n_cand, dtype=bool)
        cos = prep.hist_cos[idx]
        n_hist = int(prep.hist_lengths[idx].sum())
        matched = (cos >= policy.match_threshold) if cos is not None else np.zeros(n_hist, dtype=bool)
        rng = np.random.default_rng([seed, idx])
        prefix_hit = last_instr[q] is not None and last_instr[q] == req.instruction_tokens
        b = _classify(mode, policy, req.instruction_tokens, prep.item_tokens[idx], local, remote,
                      prep.hist_lengths[idx], matched, prefix_hit, kv, rng)
        last_instr[q] = req.instruction_tokens
        service = prefill_latency(b, cm)
        start = max(t, float(busy_until[q]))
        finish = start + service
        busy_until[q] = finish
        work = b.recomputed_tokens
        backlog[q] += work
        pending[q].append((finish, work))
        records.append(RunRecord(req.request_id, int(q), t, t, start, finish, finish - t, service,
                                 float(hits[q]), b, mode.value, label))
    return records


# ---------------------------------------------------------------------------
# run files: one JSON record per request


def write_run(records: Sequence[RunRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), separators=(",", ":"), sort_keys=True) + "\n")


def read_run(path) -> List[RunRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(RunRecord.from_dict(json.loads(line)))
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(lineno, f"bad run record: {exc}") from None
    return out
