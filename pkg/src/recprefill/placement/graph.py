"""Item popularity, hot/cold split and the co-occurrence similarity graph."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from ..workload import ItemRecord, ReviewRecord, Trace

HeatMap = Dict[str, int]

REPLICA_SEP = "#"


def replica_id(item_id: str, j: int) -> str:
    return f"{item_id}{REPLICA_SEP}{j}"


def compute_heat(corpus: Iterable[ReviewRecord] = (), trace: Optional[Trace] = None,
                 catalog: Optional[Mapping[str, ItemRecord]] = None) -> HeatMap:
    """Count item occurrences over reviews and trace candidate lists.

    Items listed in ``catalog`` but never referenced get heat 0; referenced
    items absent from a given catalog are still counted.
    """
    counts: Counter = Counter(r.item_id for r in corpus)
    if trace is not None:
        for req in trace.requests:
            counts.update(req.candidates)
    heat: HeatMap = {}
    if catalog is not None:
        for item_id in catalog:
            heat[item_id] = 0
    for item_id, c in counts.items():
        heat[item_id] = int(c)
    return heat


def _ceil_product(fraction: float, n: int) -> int:
    # guard against 0.1 * 30 == 3.0000000000000004
    return int(math.ceil(round(fraction * n, 9)))


def split_hot_cold(heat: Mapping[str, int], hot_fraction: float) -> Tuple[List[str], List[str]]:
    """Top ``ceil(hot_fraction * |I|)`` items by heat; ties go to the smaller item_id."""
    if not 0.0 <= hot_fraction < 1.0:
        raise ValueError(f"hot_fraction must lie in [0, 1), got {hot_fraction}")
    ranked = sorted(heat, key=lambda i: (-heat[i], i))
    n_hot = _ceil_product(hot_fraction, len(ranked))
    return ranked[:n_hot], ranked[n_hot:]


@dataclass
class ItemGraph:
    """Undirected weighted graph over cold items and pinned hot-item replicas.

    ``adjacency`` is a symmetric CSR matrix without diagonal entries.
    ``pinned[v]`` is the part a replica node is fixed to, or -1 for free nodes.
    """

    node_ids: List[str]
    node_weight: np.ndarray
    size_weight: np.ndarray
    pinned: np.ndarray
    adjacency: sp.csr_matrix

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    def index(self) -> Dict[str, int]:
        return {nid: i for i, nid in enumerate(self.node_ids)}

    def edge_weight(self, u: str, v: str) -> float:
        idx = self.index()
        return float(self.adjacency[idx[u], idx[v]])

    @property
    def total_edge_weight(self) -> float:
        return float(self.adjacency.sum()) / 2.0

    @classmethod
    def from_edges(cls, n: int, edges: Sequence[Tuple[int, int, float]],
                   size_weight: Optional[Sequence[float]] = None,
                   node_ids: Optional[List[str]] = None) -> "ItemGraph":
        """Build a free-node graph from an edge list (testing and tooling helper)."""
        rows = [u for u, v, _ in edges] + [v for u, v, _ in edges]
        cols = [v for u, v, _ in edges] + [u for u, v, _ in edges]
        data = [w for *_, w in edges] * 2
        adj = sp.csr_matrix((np.asarray(data, dtype=np.float64), (rows, cols)), shape=(n, n))
        adj.setdiag(0)
        adj.eliminate_zeros()
        sizes = np.ones(n) if size_weight is None else np.asarray(size_weight, dtype=np.float64)
        return cls(node_ids or [str(i) for i in range(n)], np.zeros(n), sizes,
                   np.full(n, -1, dtype=np.int64), adj.tocsr())


_TRIU_CACHE: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}


def _pairs(idx: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    m = len(idx)
    tri = _TRIU_CACHE.get(m)
    if tri is None:
        tri = _TRIU_CACHE[m] = np.triu_indices(m, 1)
    return idx[tri[0]], idx[tri[1]]


def cooccurrence_edges(cold_index: Mapping[str, int], corpus: Iterable[ReviewRecord] = (),
                       trace: Optional[Trace] = None) -> sp.csr_matrix:
    """Co-occurrence counts among indexed items.

    Two items co-occur once per request in which both are candidates and once
    per pair of consecutive reviews (in timestamp order) by the same user.
    """
    n = len(cold_index)
    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    if trace is not None:
        for req in trace.requests:
            idx = np.fromiter((cold_index[c] for c in req.candidates if c in cold_index), dtype=np.int64)
            if len(idx) > 1:
                a, b = _pairs(idx)
                rows.append(a)
                cols.append(b)
    by_user: Dict[str, List[ReviewRecord]] = defaultdict(list)
    for r in corpus:
        by_user[r.user_id].append(r)
    adj_a: List[int] = []
    adj_b: List[int] = []
    for reviews in by_user.values():
        reviews.sort(key=lambda r: r.timestamp)
        for prev, nxt in zip(reviews, reviews[1:]):
            u, v = cold_index.get(prev.item_id), cold_index.get(nxt.item_id)
            if u is not None and v is not None and u != v:
                adj_a.append(u)
                adj_b.append(v)
    if adj_a:
        rows.append(np.asarray(adj_a, dtype=np.int64))
        cols.append(np.asarray(adj_b, dtype=np.int64))
    if not rows:
        return sp.csr_matrix((n, n), dtype=np.float64)
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    data = np.ones(2 * len(r), dtype=np.float64)
    adj = sp.coo_matrix((data, (np.concatenate([r, c]), np.concatenate([c, r]))), shape=(n, n)).tocsr()
    adj.sum_duplicates()
    adj.setdiag(0)
    adj.eliminate_zeros()
    return adj


def build_similarity_graph(catalog: Mapping[str, ItemRecord], corpus: Iterable[ReviewRecord],
                           heat: Mapping[str, int], hot: Sequence[str], cold: Sequence[str], k: int,
                           trace: Optional[Trace] = None) -> ItemGraph:
    """Replica nodes for every hot item on every instance, then all cold items.

    Replicas carry heat ``h_i / k`` and are pinned to their instance; they have
    no edges. Cold nodes carry their full heat and are connected by
    co-occurrence counts.
    """
    node_ids: List[str] = []
    node_weight: List[float] = []
    size_weight: List[float] = []
    pinned: List[int] = []
    for item_id in hot:
        for j in range(k):
            node_ids.append(replica_id(item_id, j))
            node_weight.append(heat.get(item_id, 0) / k)
            size_weight.append(catalog[item_id].token_count)
            pinned.append(j)
    n_rep = len(node_ids)
    for item_id in cold:
        node_ids.append(item_id)
        node_weight.append(float(heat.get(item_id, 0)))
        size_weight.append(catalog[item_id].token_count)
        pinned.append(-1)
    cold_index = {item_id: i for i, item_id in enumerate(cold)}
    cold_adj = cooccurrence_edges(cold_index, corpus, trace)
    n = len(node_ids)
    if n_rep:
        adj = sp.block_diag((sp.csr_matrix((n_rep, n_rep)), cold_adj), format="csr")
    else:
        adj = cold_adj.tocsr()
    return ItemGraph(node_ids, np.asarray(node_weight, dtype=np.float64),
                     np.asarray(size_weight, dtype=np.float64),
                     np.asarray(pinned, dtype=np.int64), adj.astype(np.float64).tocsr())
