"""Per-instance execution: token classification, cost model and the event loop."""

from .cost import CostModel, calibrate, latency_terms, prefill_latency
from .recompute import (EngineMode, RecomputeBreakdown, RecomputePolicy, ceil_fraction,
                        classify_tokens, importance_scores, select_heavy_hitters, synthetic_scores)
from .rope import rope_encode, rope_realign
from .simulator import RunRecord, read_run, simulate, write_run

__all__ = [
    "CostModel", "calibrate", "latency_terms", "prefill_latency",
    "EngineMode", "RecomputeBreakdown", "RecomputePolicy", "ceil_fraction", "classify_tokens",
    "importance_scores", "select_heavy_hitters", "synthetic_scores",
    "rope_encode", "rope_realign",
    "RunRecord", "read_run", "simulate", "write_run",
]
