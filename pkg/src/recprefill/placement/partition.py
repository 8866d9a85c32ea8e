"""Self-contained multilevel k-way graph partitioner.

Heavy-edge matching coarsens the free (unpinned, connected) part of the graph,
a greedy size-ordered assignment seeds the coarsest level, and boundary
refinement (greedy FM moves under the balance cap) runs at every level on the
way back up. The coarsest level also tries several seeded graph-growing
assignments and keeps the lowest cut. Edgeless nodes are bin-packed last, largest first, into the
lightest part, which also absorbs most of the imbalance left by refinement.
Everything is deterministic: fixed seeds, fixed scan orders, index ties.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from ..errors import Infeasible, InvalidConfig
from .graph import ItemGraph

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PartitionConfig:
    k: int = 40
    hot_fraction: float = 0.001
    balance_eps: float = 0.05
    refinement_passes: int = 10

    def __post_init__(self) -> None:
        if int(self.k) < 1:
            raise InvalidConfig(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.hot_fraction < 1.0:
            raise InvalidConfig(f"hot_fraction must lie in [0, 1), got {self.hot_fraction}")
        if not self.balance_eps > 0:
            raise InvalidConfig(f"balance_eps must be positive, got {self.balance_eps}")
        if int(self.refinement_passes) < 0:
            raise InvalidConfig("refinement_passes must be non-negative")


def edge_cut(adjacency: sp.spmatrix, part: np.ndarray) -> float:
    """Total weight of edges whose endpoints sit in different parts."""
    coo = sp.triu(adjacency, k=1).tocoo()
    crossing = part[coo.row] != part[coo.col]
    return float(coo.data[crossing].sum())


def part_weights(size_weight: np.ndarray, part: np.ndarray, k: int) -> np.ndarray:
    return np.bincount(part, weights=size_weight, minlength=k)[:k]


# ---------------------------------------------------------------------------
# coarsening


def _heavy_edge_matching(adj: sp.csr_matrix, vwgt: np.ndarray, max_vwgt: float) -> np.ndarray:
    n = adj.shape[0]
    indptr = adj.indptr.tolist()
    indices = adj.indices.tolist()
    data = adj.data.tolist()
    w = vwgt.tolist()
    degree = np.diff(adj.indptr)
    order = np.lexsort((np.arange(n), degree)).tolist()
    match = [-1] * n
    for u in order:
        if match[u] != -1:
            continue
        best, best_w = u, 0.0
        wu = w[u]
        for p in range(indptr[u], indptr[u + 1]):
            v = indices[p]
            if match[v] != -1 or v == u:
                continue
            ew = data[p]
            if wu + w[v] > max_vwgt:
                continue
            if ew > best_w or (ew == best_w and best != u and v < best):
                best, best_w = v, ew
        match[u] = best
        match[best] = u
    cmap = np.full(n, -1, dtype=np.int64)
    nc = 0
    for u in range(n):
        if cmap[u] == -1:
            cmap[u] = nc
            cmap[match[u]] = nc
            nc += 1
    return cmap


def _contract(adj: sp.csr_matrix, vwgt: np.ndarray, cmap: np.ndarray) -> Tuple[sp.csr_matrix, np.ndarray]:
    nc = int(cmap.max()) + 1
    n = adj.shape[0]
    proj = sp.csr_matrix((np.ones(n), (np.arange(n), cmap)), shape=(n, nc))
    cadj = (proj.T @ adj @ proj).tocsr()
    cadj.setdiag(0)
    cadj.eliminate_zeros()
    cw = np.bincount(cmap, weights=vwgt, minlength=nc)
    return cadj, cw


# ---------------------------------------------------------------------------
# initial assignment and refinement


def _greedy_initial(adj: sp.csr_matrix, vwgt: np.ndarray, k: int, base: np.ndarray, cap: float) -> np.ndarray:
    n = adj.shape[0]
    indptr = adj.indptr.tolist()
    indices = adj.indices.tolist()
    data = adj.data.tolist()
    w = vwgt.tolist()
    pw = base.astype(np.float64).tolist()
    part = [-1] * n
    order = np.lexsort((np.arange(n), -vwgt)).tolist()
    for u in order:
        conn = {}
        for p in range(indptr[u], indptr[u + 1]):
            q = part[indices[p]]
            if q >= 0:
                conn[q] = conn.get(q, 0.0) + data[p]
        wu = w[u]
        best, best_key = -1, None
        for q, c in conn.items():
            if pw[q] + wu <= cap:
                key = (-c, pw[q], q)
                if best_key is None or key < best_key:
                    best, best_key = q, key
        if best < 0:
            best = min(range(k), key=lambda q: (pw[q], q))
        part[u] = best
        pw[best] += wu
    return np.asarray(part, dtype=np.int64)


def _grow_initial(adj: sp.csr_matrix, vwgt: np.ndarray, k: int, base: np.ndarray, cap: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Grow parts one at a time from a random seed, always absorbing the frontier
    node most connected to the growing part, until it reaches the mean weight."""
    n = adj.shape[0]
    indptr, indices, data = adj.indptr, adj.indices, adj.data
    target = (float(vwgt.sum()) + float(base.sum())) / k
    part = np.full(n, -1, dtype=np.int64)
    pw = base.astype(np.float64).copy()
    order = rng.permutation(n).tolist()
    cursor = 0
    for q in range(k - 1):
        conn = {}
        heap: List[Tuple[float, int]] = []
        while pw[q] < target:
            u = -1
            while heap:
                negc, v = heapq.heappop(heap)
                if part[v] < 0 and -negc == conn.get(v):
                    u = v
                    break
            if u < 0:
                while cursor < n and part[order[cursor]] >= 0:
                    cursor += 1
                if cursor == n:
                    break
                u = order[cursor]
            if pw[q] + vwgt[u] > cap and pw[q] > 0:
                break
            part[u] = q
            pw[q] += vwgt[u]
            for p in range(indptr[u], indptr[u + 1]):
                v = int(indices[p])
                if part[v] < 0:
                    conn[v] = conn.get(v, 0.0) + float(data[p])
                    heapq.heappush(heap, (-conn[v], v))
    part[part < 0] = k - 1
    return part


def _refine(adj: sp.csr_matrix, vwgt: np.ndarray, part: np.ndarray, k: int, base: np.ndarray,
            cap: float, passes: int) -> np.ndarray:
    """Greedy boundary moves: positive gain under the cap, zero gain that improves balance."""
    n = adj.shape[0]
    indptr = adj.indptr.tolist()
    indices = adj.indices.tolist()
    data = adj.data.tolist()
    w = vwgt.tolist()
    part_l = part.tolist()
    pw = (base + part_weights(vwgt, part, k)).tolist()
    for _ in range(passes):
        moved = 0
        for u in range(n):
            start, stop = indptr[u], indptr[u + 1]
            if start == stop:
                continue
            own = part_l[u]
            conn = {}
            boundary = False
            for p in range(start, stop):
                q = part_l[indices[p]]
                conn[q] = conn.get(q, 0.0) + data[p]
                if q != own:
                    boundary = True
            if not boundary:
                continue
            own_conn = conn.get(own, 0.0)
            wu = w[u]
            overweight = pw[own] > cap
            best, best_key = -1, None
            for q, c in conn.items():
                if q == own or pw[q] + wu > cap:
                    continue
                gain = c - own_conn
                if gain > 0 or (gain == 0 and pw[q] + wu < pw[own]) or overweight:
                    key = (-gain, pw[q], q)
                    if best_key is None or key < best_key:
                        best, best_key = q, key
            if best >= 0:
                part_l[u] = best
                pw[own] -= wu
                pw[best] += wu
                moved += 1
        if moved == 0:
            break
    return np.asarray(part_l, dtype=np.int64)


def _rebalance(adj: sp.csr_matrix, vwgt: np.ndarray, part: np.ndarray, k: int, base: np.ndarray,
               cap: float) -> np.ndarray:
    """Move nodes out of overweight parts, least cut damage first, until every part fits."""
    part = part.copy()
    pw = base + part_weights(vwgt, part, k)
    indptr, indices, data = adj.indptr, adj.indices, adj.data
    guard = 0
    while pw.max() > cap and guard < len(part) + k:
        guard += 1
        src = int(np.argmax(pw))
        members = np.flatnonzero(part == src)
        if len(members) == 0:
            break
        best = None
        for u in members.tolist():
            wu = vwgt[u]
            conn = np.zeros(k)
            nb = indices[indptr[u]:indptr[u + 1]]
            np.add.at(conn, part[nb], data[indptr[u]:indptr[u + 1]])
            fits = pw + wu <= cap
            fits[src] = False
            if not fits.any():
                continue
            gains = np.where(fits, conn - conn[src], -np.inf)
            q = int(np.argmax(gains))
            key = (-gains[q], -wu, u)
            if best is None or key < best[0]:
                best = (key, u, q)
        if best is None:
            break
        _, u, q = best
        part[u] = q
        pw[src] -= vwgt[u]
        pw[q] += vwgt[u]
    return part


def _pack_isolated(vwgt: np.ndarray, k: int, pw: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((np.arange(len(vwgt)), -vwgt))
    heap = [(float(pw[q]), q) for q in range(k)]
    heapq.heapify(heap)
    part = np.empty(len(vwgt), dtype=np.int64)
    w = vwgt.tolist()
    for u in order.tolist():
        load, q = heapq.heappop(heap)
        part[u] = q
        heapq.heappush(heap, (load + w[u], q))
    out = pw.astype(np.float64).copy()
    for load, q in heap:
        out[q] = load
    return part, out


# ---------------------------------------------------------------------------


INITIAL_TRIES = 8


def _best_initial(adj: sp.csr_matrix, vwgt: np.ndarray, k: int, base: np.ndarray, cap: float,
                  passes: int) -> np.ndarray:
    """Lowest-cut refined assignment among the weight-ordered greedy seed and
    several graph-growing tries (fixed seeds, so the result is deterministic)."""
    candidates = [_greedy_initial(adj, vwgt, k, base, cap)]
    candidates += [_grow_initial(adj, vwgt, k, base, cap, np.random.default_rng(t))
                   for t in range(INITIAL_TRIES)]
    best, best_key = None, None
    for cand in candidates:
        cand = _refine(adj, vwgt, cand, k, base, cap, passes)
        over = max(0.0, float((base + part_weights(vwgt, cand, k)).max()) - cap)
        key = (over, edge_cut(adj, cand))
        if best_key is None or key < best_key:
            best, best_key = cand, key
    return best


def _multilevel(adj: sp.csr_matrix, vwgt: np.ndarray, k: int, base: np.ndarray, cap: float,
                passes: int) -> np.ndarray:
    n = adj.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    coarsen_to = max(20 * k, 200)
    max_vwgt = 1.5 * float(vwgt.sum()) / coarsen_to
    levels: List[Tuple[sp.csr_matrix, np.ndarray, np.ndarray]] = []
    cur_adj, cur_w = adj, vwgt
    while cur_adj.shape[0] > coarsen_to:
        cmap = _heavy_edge_matching(cur_adj, cur_w, max_vwgt)
        nc = int(cmap.max()) + 1
        if nc > 0.95 * cur_adj.shape[0]:
            break
        levels.append((cur_adj, cur_w, cmap))
        cur_adj, cur_w = _contract(cur_adj, cur_w, cmap)
    part = _best_initial(cur_adj, cur_w, k, base, cap, passes)
    for fine_adj, fine_w, cmap in reversed(levels):
        part = part[cmap]
        part = _refine(fine_adj, fine_w, part, k, base, cap, passes)
    return part


def _partition_once(graph: ItemGraph, k: int, eps: float, passes: int) -> np.ndarray:
    n = graph.n_nodes
    part = np.full(n, -1, dtype=np.int64)
    pinned = graph.pinned >= 0
    part[pinned] = graph.pinned[pinned]
    free = np.flatnonzero(~pinned)
    if k == 1:
        part[free] = 0
        return part
    sizes = graph.size_weight
    adj_free = graph.adjacency[free][:, free].tocsr()
    degree = np.diff(adj_free.indptr)
    connected = np.flatnonzero(degree > 0)
    isolated = np.flatnonzero(degree == 0)
    total = float(sizes[free].sum())
    cap = (1.0 + eps) * total / k

    base = np.zeros(k)
    sub = adj_free[connected][:, connected].tocsr()
    cpart = _multilevel(sub, sizes[free][connected], k, base, cap, passes)
    pw = part_weights(sizes[free][connected], cpart, k)
    ipart, pw = _pack_isolated(sizes[free][isolated], k, pw)

    local = np.empty(len(free), dtype=np.int64)
    local[connected] = cpart
    local[isolated] = ipart
    if part_weights(sizes[free], local, k).max() > cap:
        local = _rebalance(adj_free, sizes[free], local, k, np.zeros(k), cap)
    part[free] = local
    return part


def partition_graph(graph: ItemGraph, cfg: PartitionConfig) -> List[np.ndarray]:
    """Split the graph into ``cfg.k`` node-index sets.

    Replica nodes stay on their pinned part. The token weight of free nodes on
    every part stays within ``(1 + balance_eps)`` of the mean; if that cannot
    be met the tolerance is doubled once before giving up with ``Infeasible``.
    """
    labels, _ = partition_labels(graph, cfg)
    return [np.flatnonzero(labels == q) for q in range(cfg.k)]


def partition_labels(graph: ItemGraph, cfg: PartitionConfig) -> Tuple[np.ndarray, float]:
    """Part label per node plus the balance tolerance actually achieved."""
    k = int(cfg.k)
    free = graph.pinned < 0
    n_free = int(free.sum())
    if k > max(n_free, 1):
        raise InvalidConfig(f"k={k} exceeds the number of cold items ({n_free})")
    if np.any(graph.pinned[~free] >= k):
        raise InvalidConfig("replica pinned to a part >= k")
    eps = float(cfg.balance_eps)
    for attempt in range(2):
        labels = _partition_once(graph, k, eps, int(cfg.refinement_passes))
        if n_free == 0 or k == 1:
            return labels, eps
        pw = part_weights(graph.size_weight[free], labels[free], k)
        mean = float(graph.size_weight[free].sum()) / k
        if pw.max() <= (1.0 + eps) * mean + 1e-9:
            return labels, eps
        if attempt == 0:
            logger.warning("balance eps=%.3g infeasible (max/mean=%.4f); relaxing to %.3g",
                           eps, pw.max() / mean, 2 * eps)
            eps *= 2
    raise Infeasible(f"cannot balance {n_free} items over k={k} within eps={eps:g} "
                     f"(max/mean={pw.max() / mean:.4f})")
