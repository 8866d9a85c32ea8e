"""Offline item-KV placement (heat, replication, similarity graph, partitioning)."""

from .estimator import ItemPlacer, hit_matrix
from .graph import ItemGraph, build_similarity_graph, compute_heat, split_hot_cold
from .partition import PartitionConfig, edge_cut, part_weights, partition_graph, partition_labels
from .plan import (
    DEFAULT_KV_BYTES_PER_TOKEN,
    PlacementPlan,
    PlanDiff,
    diff_plans,
    footprint,
    place_items,
    random_placement,
    read_plan,
    refresh_placement,
    write_diff,
    write_plan,
)

__all__ = [
    "DEFAULT_KV_BYTES_PER_TOKEN", "ItemGraph", "ItemPlacer", "PartitionConfig", "PlacementPlan",
    "PlanDiff", "build_similarity_graph", "compute_heat", "diff_plans", "edge_cut", "footprint",
    "hit_matrix", "part_weights", "partition_graph", "partition_labels", "place_items",
    "random_placement", "read_plan", "refresh_placement", "split_hot_cold", "write_diff", "write_plan",
]
