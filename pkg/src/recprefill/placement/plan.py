"""Placement plans: composition of heat, replication, graph build and partitioning."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..errors import InvalidConfig, ParseError
from ..workload import ItemRecord, ReviewRecord, Trace
from .graph import HeatMap, build_similarity_graph, compute_heat, split_hot_cold
from .partition import PartitionConfig, edge_cut, partition_labels

DEFAULT_KV_BYTES_PER_TOKEN = 275_000


@dataclass(frozen=True)
class ShardManifest:
    items: FrozenSet[str]
    tokens: int


@dataclass(frozen=True)
class PlacementPlan:
    k: int
    hot_fraction: float
    shards: Tuple[FrozenSet[str], ...]        # cold items per shard
    replicated: FrozenSet[str]                # hot items, present on every shard
    manifests: Tuple[ShardManifest, ...]      # cold + replicated, with token totals
    balance_eps: float = 0.05
    kv_bytes_per_token: int = DEFAULT_KV_BYTES_PER_TOKEN
    edge_cut: float = 0.0

    def shard_of(self) -> Dict[str, int]:
        """Cold item -> shard index (replicated items are excluded)."""
        return {item: q for q, shard in enumerate(self.shards) for item in shard}

    def cached_on(self, shard: int) -> FrozenSet[str]:
        return self.manifests[shard].items

    def cold_tokens(self, catalog: Mapping[str, ItemRecord]) -> List[int]:
        return [sum(catalog[i].token_count for i in shard) for shard in self.shards]

    @property
    def all_items(self) -> FrozenSet[str]:
        return frozenset().union(*self.shards) | self.replicated


@dataclass(frozen=True)
class PlanDiff:
    moved: Dict[str, Tuple[int, int]]          # item -> (old shard, new shard)
    added: Dict[str, int]                      # new cold items -> shard (-1 if replicated)
    removed: Tuple[str, ...]
    newly_replicated: Tuple[str, ...]
    no_longer_replicated: Tuple[str, ...]

    @property
    def is_empty(self) -> bool:
        return not (self.moved or self.added or self.removed or self.newly_replicated
                    or self.no_longer_replicated)

    def to_dict(self) -> dict:
        return {
            "moved": {k: list(v) for k, v in sorted(self.moved.items())},
            "added": dict(sorted(self.added.items())),
            "removed": list(self.removed),
            "newly_replicated": list(self.newly_replicated),
            "no_longer_replicated": list(self.no_longer_replicated),
        }


def _manifests(catalog: Mapping[str, ItemRecord], shards: Sequence[FrozenSet[str]],
               replicated: FrozenSet[str]) -> Tuple[ShardManifest, ...]:
    rep_tokens = sum(catalog[i].token_count for i in replicated)
    out = []
    for shard in shards:
        tokens = sum(catalog[i].token_count for i in shard) + rep_tokens
        out.append(ShardManifest(frozenset(shard) | replicated, int(tokens)))
    return tuple(out)


def place_items(catalog: Mapping[str, ItemRecord], corpus: Sequence[ReviewRecord],
                cfg: PartitionConfig, trace: Optional[Trace] = None,
                heat: Optional[HeatMap] = None,
                kv_bytes_per_token: int = DEFAULT_KV_BYTES_PER_TOKEN) -> PlacementPlan:
    """Similarity-aware placement with global replicas for the hottest items."""
    if not catalog:
        raise InvalidConfig("cannot place an empty catalog")
    k = int(cfg.k)
    if heat is None:
        heat = compute_heat(corpus, trace, catalog)
    heat = {i: heat.get(i, 0) for i in catalog}
    hot, cold = split_hot_cold(heat, cfg.hot_fraction)
    graph = build_similarity_graph(catalog, corpus, heat, hot, cold, k, trace=trace)
    labels, eps = partition_labels(graph, cfg)
    n_rep = len(hot) * k
    cold_labels = labels[n_rep:]
    buckets: List[List[str]] = [[] for _ in range(k)]
    for item_id, q in zip(cold, cold_labels.tolist()):
        buckets[q].append(item_id)
    shards = tuple(frozenset(b) for b in buckets)
    replicated = frozenset(hot)
    cut = edge_cut(graph.adjacency[n_rep:, n_rep:], cold_labels)
    return PlacementPlan(k, float(cfg.hot_fraction), shards, replicated,
                         _manifests(catalog, shards, replicated), eps, int(kv_bytes_per_token), cut)


def random_placement(catalog: Mapping[str, ItemRecord], heat: Mapping[str, int], k: int,
                     hot_fraction: float, seed: int,
                     kv_bytes_per_token: int = DEFAULT_KV_BYTES_PER_TOKEN) -> PlacementPlan:
    """Seeded locality-blind baseline: same replication, cold items dealt to random shards
    (shuffled round-robin, so counts stay balanced)."""
    heat = {i: heat.get(i, 0) for i in catalog}
    hot, cold = split_hot_cold(heat, hot_fraction)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(cold))
    buckets: List[List[str]] = [[] for _ in range(k)]
    for pos, idx in enumerate(order.tolist()):
        buckets[pos % k].append(cold[idx])
    shards = tuple(frozenset(b) for b in buckets)
    replicated = frozenset(hot)
    return PlacementPlan(k, float(hot_fraction), shards, replicated,
                         _manifests(catalog, shards, replicated), float("inf"), int(kv_bytes_per_token))


def footprint(plan: PlacementPlan, kv_bytes_per_token: Optional[int] = None) -> List[Tuple[int, int]]:
    """Per-shard ``(tokens, bytes)`` including the replicated hot items."""
    bpt = plan.kv_bytes_per_token if kv_bytes_per_token is None else int(kv_bytes_per_token)
    return [(m.tokens, m.tokens * bpt) for m in plan.manifests]


def diff_plans(old: PlacementPlan, new: PlacementPlan) -> PlanDiff:
    old_map, new_map = old.shard_of(), new.shard_of()
    old_items, new_items = old.all_items, new.all_items
    moved = {i: (old_map[i], new_map[i]) for i in old_map.keys() & new_map.keys()
             if old_map[i] != new_map[i]}
    added = {i: new_map.get(i, -1) for i in new_items - old_items}
    return PlanDiff(
        moved=moved,
        added=added,
        removed=tuple(sorted(old_items - new_items)),
        newly_replicated=tuple(sorted((new.replicated - old.replicated) & old_items)),
        no_longer_replicated=tuple(sorted((old.replicated - new.replicated) & new_items)),
    )


def refresh_placement(plan: PlacementPlan, catalog: Mapping[str, ItemRecord],
                      new_corpus: Sequence[ReviewRecord], cfg: PartitionConfig,
                      trace: Optional[Trace] = None) -> Tuple[PlacementPlan, PlanDiff]:
    """Recompute heat on the new corpus, re-place, and report what changed."""
    new_plan = place_items(catalog, new_corpus, cfg, trace=trace,
                           kv_bytes_per_token=plan.kv_bytes_per_token)
    return new_plan, diff_plans(plan, new_plan)


# ---------------------------------------------------------------------------
# serialization: a header line followed by one manifest line per shard


def write_plan(plan: PlacementPlan, path) -> None:
    header = {"record": "header", "k": plan.k, "hot_fraction": plan.hot_fraction,
              "kv_bytes_per_token": plan.kv_bytes_per_token, "balance_eps": plan.balance_eps,
              "edge_cut": plan.edge_cut, "replicated": sorted(plan.replicated)}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for q, (shard, man) in enumerate(zip(plan.shards, plan.manifests)):
            fh.write(json.dumps({"record": "shard", "shard": q, "tokens": man.tokens,
                                 "items": sorted(shard)}, separators=(",", ":")) + "\n")


def read_plan(path) -> PlacementPlan:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ParseError(0, "empty plan file")
    try:
        header = json.loads(lines[0])
        if header.get("record") != "header":
            raise ParseError(1, "first record must be the plan header")
        k = int(header["k"])
        replicated = frozenset(header["replicated"])
        shards: List[FrozenSet[str]] = [frozenset()] * k
        manifests: List[ShardManifest] = [ShardManifest(replicated, 0)] * k
        for lineno, line in enumerate(lines[1:], start=2):
            obj = json.loads(line)
            q = int(obj["shard"])
            shards[q] = frozenset(obj["items"])
            manifests[q] = ShardManifest(shards[q] | replicated, int(obj["tokens"]))
    except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
        raise ParseError(0, f"bad plan file: {exc}") from None
    return PlacementPlan(k, float(header["hot_fraction"]), tuple(shards), replicated, tuple(manifests),
                         float(header.get("balance_eps", 0.05)), int(header["kv_bytes_per_token"]),
                         float(header.get("edge_cut", 0.0)))


def write_diff(diff: PlanDiff, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(diff.to_dict(), fh, separators=(",", ":"), sort_keys=True)
        fh.write("\n")
