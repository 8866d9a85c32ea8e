"""Estimator-style wrapper so placement composes with sklearn tooling."""

from __future__ import annotations

from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..workload import ItemRecord, Request, ReviewRecord, Trace
from .partition import PartitionConfig
from .plan import DEFAULT_KV_BYTES_PER_TOKEN, PlacementPlan, footprint, place_items


def hit_matrix(plan: PlacementPlan, requests: Iterable[Request]) -> np.ndarray:
    """Fraction of each request's candidates cached on each shard, shape (n_requests, k)."""
    shard_of = plan.shard_of()
    rows = []
    for req in requests:
        counts = np.zeros(plan.k)
        n_rep = 0
        for item in req.candidates:
            if item in plan.replicated:
                n_rep += 1
            else:
                q = shard_of.get(item)
                if q is not None:
                    counts[q] += 1
        rows.append((counts + n_rep) / len(req.candidates))
    return np.vstack(rows) if rows else np.zeros((0, plan.k))


class ItemPlacer(BaseEstimator):
    """Similarity-aware item-KV placement with hot-item replication.

    ``fit`` takes the review corpus (plus the catalog and, optionally, a
    historical trace); ``predict`` maps item ids to shards (``-1`` for
    replicated items); ``transform`` maps requests to per-shard hit ratios.

    Parameters
    ----------
    k : int
        Number of serving instances.
    hot_fraction : float
        Share of the catalog, by heat, replicated on every instance.
    balance_eps : float
        Allowed relative excess of a shard's cold-token weight over the mean.
    refinement_passes : int
        Boundary refinement sweeps per level.
    kv_bytes_per_token : int
        KV cache size of one token, used by footprint reports.
    """

    def __init__(self, k: int = 40, hot_fraction: float = 0.001, balance_eps: float = 0.05,
                 refinement_passes: int = 10, kv_bytes_per_token: int = DEFAULT_KV_BYTES_PER_TOKEN):
        self.k = k
        self.hot_fraction = hot_fraction
        self.balance_eps = balance_eps
        self.refinement_passes = refinement_passes
        self.kv_bytes_per_token = kv_bytes_per_token

    def _config(self) -> PartitionConfig:
        return PartitionConfig(self.k, self.hot_fraction, self.balance_eps, self.refinement_passes)

    def fit(self, X: Sequence[ReviewRecord], y=None, *, catalog: Mapping[str, ItemRecord],
            trace: Optional[Trace] = None):
        self.plan_ = place_items(catalog, tuple(X), self._config(), trace=trace,
                                 kv_bytes_per_token=self.kv_bytes_per_token)
        self.shard_of_ = self.plan_.shard_of()
        self.n_shards_ = self.plan_.k
        return self

    def predict(self, X: Iterable[str]) -> np.ndarray:
        check_is_fitted(self, "plan_")
        rep = self.plan_.replicated
        out = []
        for item in X:
            if item in rep:
                out.append(-1)
            elif item in self.shard_of_:
                out.append(self.shard_of_[item])
            else:
                raise KeyError(f"item {item!r} was not placed")
        return np.asarray(out, dtype=np.int64)

    def transform(self, X: Iterable[Request]) -> np.ndarray:
        check_is_fitted(self, "plan_")
        return hit_matrix(self.plan_, X)

    def score(self, X: Iterable[Request], y=None) -> float:
        """Mean best-shard hit ratio over the given requests."""
        return float(self.transform(X).max(axis=1).mean())

    def footprint(self):
        check_is_fitted(self, "plan_")
        return footprint(self.plan_, self.kv_bytes_per_token)
