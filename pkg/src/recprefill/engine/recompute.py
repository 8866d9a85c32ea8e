"""Token classification, heavy-hitter scoring and selection."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Collection, Optional, Sequence

import numpy as np

from ..errors import DimensionMismatch, InvalidConfig
from ..workload import PromptLayout


class EngineMode(str, Enum):
    RCLLM = "rcllm"
    FULL_RECOMPUTE = "full_recompute"
    PREFIX_CACHE = "prefix_cache"

    @classmethod
    def parse(cls, text: str) -> "EngineMode":
        key = text.strip().lower().replace("-", "_")
        for m in cls:
            if m.value == key:
                return m
        raise InvalidConfig(f"unknown engine mode {text!r}")


@dataclass(frozen=True)
class RecomputePolicy:
    r_rev: float = 0.3
    r_item: float = 0.3
    drift_weight: float = 0.5
    window: int = 64
    match_threshold: float = 0.95

    def __post_init__(self) -> None:
        for name in ("r_rev", "r_item", "drift_weight"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidConfig(f"{name} must lie in [0, 1]")
        if self.window < 0:
            raise InvalidConfig("window must be non-negative")

    @classmethod
    def uniform(cls, r: float, **kw) -> "RecomputePolicy":
        return cls(r_rev=r, r_item=r, **kw)


@dataclass(frozen=True)
class RecomputeBreakdown:
    """Token accounting for one request on one node.

    The five classification fields partition ``total_tokens``. Heavy hitters
    and window tokens are subsets of the reused (item hit and matched history)
    tokens that get recomputed anyway.
    """

    total_tokens: int
    instruction_tokens: int
    item_hit_tokens: int
    item_miss_tokens: int
    history_matched_tokens: int
    history_unmatched_tokens: int
    heavy_hitter_tokens: int = 0
    window_tokens: int = 0
    prefix_reused_tokens: int = 0
    item_remote_tokens: int = 0
    transferred_bytes: int = 0
    remote_bytes: int = 0
    reused_blocks: int = 0

    @property
    def reused_tokens(self) -> int:
        return (self.prefix_reused_tokens + self.item_hit_tokens + self.history_matched_tokens
                - self.heavy_hitter_tokens - self.window_tokens)

    @property
    def recomputed_tokens(self) -> int:
        return self.total_tokens - self.reused_tokens

    def to_dict(self) -> dict:
        return asdict(self)


def ceil_fraction(r: float, n: int) -> int:
    # round first so 0.3 * 10 does not become 4
    return int(math.ceil(round(r * n, 9)))


def importance_scores(attn, k_new, k_cached, v_new, v_cached, drift_weight: float) -> np.ndarray:
    """Weighted sum of attention mass and key/value drift, both as L1 norms per token.

    ``attn`` may be a per-token vector of attention weights or a token-major
    matrix whose rows are L1-reduced.
    """
    if not 0.0 <= drift_weight <= 1.0:
        raise InvalidConfig("drift_weight must lie in [0, 1]")
    a = np.asarray(attn, dtype=np.float64)
    mats = [np.atleast_2d(np.asarray(m, dtype=np.float64)) for m in (k_new, k_cached, v_new, v_cached)]
    n = a.shape[0]
    if any(m.shape[0] != n for m in mats):
        raise DimensionMismatch("all inputs must share the token count")
    if mats[0].shape != mats[1].shape or mats[2].shape != mats[3].shape:
        raise DimensionMismatch("new and cached matrices must have the same shape")
    attn_mass = np.abs(a) if a.ndim == 1 else np.abs(a).sum(axis=1)
    drift = np.abs(mats[0] - mats[1]).sum(axis=1) + np.abs(mats[2] - mats[3]).sum(axis=1)
    return (1.0 - drift_weight) * attn_mass + drift_weight * drift


def top_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores; ties go to the lower index."""
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return order[:k]


def select_heavy_hitters(scores, r: float, window: int = 0, n: Optional[int] = None) -> np.ndarray:
    """Sorted union of the top ``ceil(r * n)`` scores and the last ``window`` indices."""
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores) if n is None else int(n)
    if len(scores) != n:
        raise DimensionMismatch("len(scores) must equal n")
    if not 0.0 <= r <= 1.0:
        raise InvalidConfig("r must lie in [0, 1]")
    chosen = top_indices(scores, ceil_fraction(r, n))
    tail = np.arange(max(0, n - int(window)), n, dtype=np.int64)
    return np.union1d(chosen, tail).astype(np.int64)


def synthetic_scores(rng: np.random.Generator, n: int, shape: float = 1.5) -> np.ndarray:
    """Heavy-tailed stand-in importance scores for simulated requests."""
    return rng.pareto(shape, size=n)


def _tail_overlap(scores: np.ndarray, k: int, tail: int) -> int:
    """How many of the last ``tail`` indices are among the top ``k``."""
    n = len(scores)
    if k <= 0 or tail <= 0:
        return 0
    if k >= n:
        return min(tail, n)
    top = top_indices(scores, k)
    return int(np.count_nonzero(top >= n - tail))


def _classify(mode: EngineMode, policy: RecomputePolicy, n_instr: int,
              item_tokens: np.ndarray, item_hit: np.ndarray, item_remote: np.ndarray,
              hist_lengths: np.ndarray, hist_matched: np.ndarray,
              prefix_hit: bool, kv_bytes: int, rng: Optional[np.random.Generator]) -> RecomputeBreakdown:
    """Core classification on flat arrays.

    ``item_hit`` marks locally cached blocks and ``item_remote`` blocks fetched
    from another shard (both count as reused). ``hist_matched`` is a boolean
    mask over history tokens in prompt order; ``hist_lengths`` gives review
    sizes so reused blocks can be counted.
    """
    n_items_tok = int(item_tokens.sum())
    n_hist = int(hist_lengths.sum())
    total = n_instr + n_items_tok + n_hist
    if mode is not EngineMode.RCLLM:
        reused_prefix = n_instr if (mode is EngineMode.PREFIX_CACHE and prefix_hit) else 0
        return RecomputeBreakdown(total, n_instr, 0, n_items_tok, 0, n_hist,
                                  prefix_reused_tokens=reused_prefix)
    reused_mask = item_hit | item_remote
    hit_tok = int(item_tokens[reused_mask].sum())
    remote_tok = int(item_tokens[item_remote & ~item_hit].sum())
    matched = int(np.count_nonzero(hist_matched))
    heavy_item = ceil_fraction(policy.r_item, hit_tok)
    heavy_hist = ceil_fraction(policy.r_rev, matched)
    heavy = heavy_item + heavy_hist
    # sliding window over the trailing reused tokens: item hits come last in the prompt
    win = min(policy.window, hit_tok + matched)
    win_items = min(win, hit_tok)
    win_hist = win - win_items
    overlap = 0
    if win > 0 and heavy > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        item_scores = synthetic_scores(rng, hit_tok)
        hist_scores = synthetic_scores(rng, matched)
        overlap = _tail_overlap(item_scores, heavy_item, win_items) + _tail_overlap(hist_scores, heavy_hist, win_hist)
    window_tokens = win - overlap
    blocks = int(np.count_nonzero(reused_mask))
    if matched:
        bounds = np.concatenate([[0], np.cumsum(hist_lengths)])
        per_review = np.add.reduceat(hist_matched.astype(np.int64), bounds[:-1]) if len(hist_lengths) else []
        blocks += int(np.count_nonzero(np.asarray(per_review)[np.asarray(hist_lengths) > 0]))
    return RecomputeBreakdown(
        total_tokens=total, instruction_tokens=n_instr,
        item_hit_tokens=hit_tok, item_miss_tokens=n_items_tok - hit_tok,
        history_matched_tokens=matched, history_unmatched_tokens=n_hist - matched,
        heavy_hitter_tokens=heavy, window_tokens=window_tokens,
        item_remote_tokens=remote_tok,
        transferred_bytes=(hit_tok + matched) * int(kv_bytes),
        remote_bytes=remote_tok * int(kv_bytes),
        reused_blocks=blocks,
    )


def classify_tokens(layout: PromptLayout, manifest: Collection[str],
                    history_cosines: Optional[Sequence[float]] = None,
                    mode: EngineMode = EngineMode.RCLLM,
                    policy: RecomputePolicy = RecomputePolicy(), *,
                    prefix_hit: bool = False, kv_bytes_per_token: int = 275_000,
                    remote_items: Collection[str] = (),
                    rng: Optional[np.random.Generator] = None) -> RecomputeBreakdown:
    """Classify every prompt token as recomputed or reused under ``mode``.

    ``history_cosines`` holds the best prototype cosine of each history token
    in prompt order (``None`` means no library: nothing matches).
    ``remote_items`` lists uncached blocks that another shard can serve.
    """
    mode = EngineMode(mode)
    instr = [s for s in layout.segments if s.role == "Instruction"]
    hist = [s for s in layout.segments if s.role == "HistoryToken"]
    items = [s for s in layout.segments if s.role == "ItemBlock"]
    n_instr = sum(s.length for s in instr)
    hist_lengths = np.asarray([s.length for s in hist], dtype=np.int64)
    n_hist = int(hist_lengths.sum())
    if history_cosines is None:
        matched = np.zeros(n_hist, dtype=bool)
    else:
        cos = np.asarray(history_cosines, dtype=np.float64)
        if len(cos) != n_hist:
            raise DimensionMismatch(f"expected {n_hist} history cosines, got {len(cos)}")
        matched = cos >= policy.match_threshold
    item_tokens = np.asarray([s.length for s in items], dtype=np.int64)
    hit = np.asarray([s.source in manifest for s in items], dtype=bool)
    remote_set = set(remote_items)
    remote = np.asarray([s.source in remote_set for s in items], dtype=bool)
    return _classify(mode, policy, n_instr, item_tokens, hit, remote, hist_lengths, matched,
                     prefix_hit, kv_bytes_per_token, rng)
