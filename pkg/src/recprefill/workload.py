"""Domain data model, catalog/trace ingestion and synthetic trace generation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import DuplicateItem, InvalidConfig, ParseError, UnknownItem

logger = logging.getLogger(__name__)

SegmentRole = Literal["Instruction", "HistoryToken", "ItemBlock"]


@dataclass(frozen=True)
class ItemRecord:
    item_id: str
    token_count: int
    category: str = ""

    def __post_init__(self) -> None:
        if not self.item_id:
            raise ValueError("item_id must be non-empty")
        if int(self.token_count) < 1:
            raise ValueError(f"token_count must be >= 1 (item {self.item_id!r})")


@dataclass(frozen=True)
class ReviewRecord:
    user_id: str
    item_id: str
    rating: int
    token_ids: Tuple[int, ...]
    timestamp: int = 0

    def __post_init__(self) -> None:
        if not 1 <= int(self.rating) <= 5:
            raise ValueError(f"rating must be in [1, 5], got {self.rating}")
        if len(self.token_ids) == 0:
            raise ValueError("token_ids must be non-empty")


@dataclass(frozen=True)
class Request:
    request_id: str
    arrival_time: float
    instruction_tokens: int
    history: Tuple[ReviewRecord, ...]
    candidates: Tuple[str, ...]
    user_id: str = ""

    def __post_init__(self) -> None:
        if self.arrival_time < 0:
            raise ValueError("arrival_time must be non-negative")
        if self.instruction_tokens < 0:
            raise ValueError("instruction_tokens must be non-negative")
        if not self.candidates:
            raise ValueError(f"request {self.request_id!r} has no candidates")
        if len(set(self.candidates)) != len(self.candidates):
            raise ValueError(f"request {self.request_id!r} has duplicate candidates")

    @property
    def history_tokens(self) -> int:
        return sum(len(r.token_ids) for r in self.history)


@dataclass(frozen=True)
class Segment:
    role: SegmentRole
    source: str
    start: int
    length: int


@dataclass(frozen=True)
class PromptLayout:
    segments: Tuple[Segment, ...]

    @property
    def total_tokens(self) -> int:
        if not self.segments:
            return 0
        last = self.segments[-1]
        return last.start + last.length

    def tokens_by_role(self, role: SegmentRole) -> int:
        return sum(s.length for s in self.segments if s.role == role)


@dataclass(frozen=True)
class Trace:
    requests: Tuple[Request, ...]
    source: str = "unknown"
    qps: float = 0.0
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.requests:
            raise ValueError("a trace must contain at least one request")
        times = [r.arrival_time for r in self.requests]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("trace requests must be sorted by arrival_time")

    def __len__(self) -> int:
        return len(self.requests)

    def __iter__(self) -> Iterator[Request]:
        return iter(self.requests)


Catalog = Dict[str, ItemRecord]
ReviewCorpus = Tuple[ReviewRecord, ...]


# ---------------------------------------------------------------------------
# file formats: one JSON object per line


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


def _iter_json_lines(path) -> Iterator[Tuple[int, dict]]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ParseError(lineno, "record must be a JSON object")
            yield lineno, obj


def load_catalog(path) -> Catalog:
    catalog: Catalog = {}
    for lineno, obj in _iter_json_lines(path):
        try:
            item = ItemRecord(
                item_id=str(obj["item_id"]),
                token_count=int(obj["token_count"]),
                category=str(obj.get("category", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(lineno, f"bad catalog record: {exc}") from None
        if item.item_id in catalog:
            raise DuplicateItem(item.item_id)
        catalog[item.item_id] = item
    if not catalog:
        logger.warning("catalog file %s is empty", path)
    return catalog


def write_catalog(catalog: Mapping[str, ItemRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in catalog.values():
            fh.write(_dumps({"item_id": item.item_id, "token_count": item.token_count,
                             "category": item.category}) + "\n")


def _review_from_obj(obj: dict, user_id: str = "", timestamp: int = 0) -> ReviewRecord:
    return ReviewRecord(
        user_id=str(obj.get("user_id", user_id)),
        item_id=str(obj["item_id"]),
        rating=int(obj["rating"]),
        token_ids=tuple(int(t) for t in obj["token_ids"]),
        timestamp=int(obj.get("timestamp", timestamp)),
    )


def load_corpus(path) -> ReviewCorpus:
    reviews = []
    for lineno, obj in _iter_json_lines(path):
        try:
            reviews.append(_review_from_obj(obj))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(lineno, f"bad review record: {exc}") from None
    return tuple(reviews)


def write_corpus(corpus: Iterable[ReviewRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in corpus:
            fh.write(_dumps({"user_id": r.user_id, "item_id": r.item_id, "rating": r.rating,
                             "token_ids": list(r.token_ids), "timestamp": r.timestamp}) + "\n")


def load_trace(path, source: Optional[str] = None) -> Trace:
    requests = []
    for lineno, obj in _iter_json_lines(path):
        try:
            user_id = str(obj.get("user_id", ""))
            history = tuple(_review_from_obj(h, user_id=user_id, timestamp=i)
                            for i, h in enumerate(obj.get("history", [])))
            requests.append(Request(
                request_id=str(obj["request_id"]),
                arrival_time=float(obj["arrival_time"]),
                instruction_tokens=int(obj["instruction_tokens"]),
                history=history,
                candidates=tuple(str(c) for c in obj["candidates"]),
                user_id=user_id,
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(lineno, f"bad trace record: {exc}") from None
    if not requests:
        raise ParseError(0, "trace file contains no requests")
    try:
        return Trace(tuple(requests), source=source or Path(path).stem)
    except ValueError as exc:
        raise ParseError(0, str(exc)) from None


def write_trace(trace: Trace, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for req in trace.requests:
            obj = {
                "request_id": req.request_id,
                "arrival_time": req.arrival_time,
                "instruction_tokens": req.instruction_tokens,
                "history": [{"item_id": h.item_id, "rating": h.rating, "token_ids": list(h.token_ids)}
                            for h in req.history],
                "candidates": list(req.candidates),
            }
            if req.user_id:
                obj["user_id"] = req.user_id
            fh.write(_dumps(obj) + "\n")


# ---------------------------------------------------------------------------
# prompt decomposition


def decompose_prompt(req: Request, catalog: Mapping[str, ItemRecord],
                     instruction_tokens: Optional[int] = None) -> PromptLayout:
    """Lay out instruction, history tokens and item blocks at cumulative offsets."""
    n_instr = req.instruction_tokens if instruction_tokens is None else int(instruction_tokens)
    segments: List[Segment] = []
    pos = 0
    if n_instr > 0:
        segments.append(Segment("Instruction", "instruction", 0, n_instr))
        pos = n_instr
    for i, review in enumerate(req.history):
        n = len(review.token_ids)
        segments.append(Segment("HistoryToken", f"history:{i}:{review.item_id}", pos, n))
        pos += n
    for item_id in req.candidates:
        item = catalog.get(item_id)
        if item is None:
            raise UnknownItem(item_id)
        segments.append(Segment("ItemBlock", item_id, pos, item.token_count))
        pos += item.token_count
    return PromptLayout(tuple(segments))


# ---------------------------------------------------------------------------
# synthesis


@dataclass(frozen=True)
class LengthDist:
    """Positive integer length distribution (``fixed``, ``uniform`` or ``lognormal``)."""

    kind: Literal["fixed", "uniform", "lognormal"] = "fixed"
    mean: float = 1.0
    sigma: float = 0.0
    minimum: int = 1
    maximum: int = 1_000_000

    def __post_init__(self) -> None:
        if self.kind not in ("fixed", "uniform", "lognormal"):
            raise InvalidConfig(f"unsupported length distribution {self.kind!r}")
        if self.mean <= 0 or self.minimum < 1 or self.maximum < self.minimum:
            raise InvalidConfig(f"invalid length distribution {self}")

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "fixed":
            out = np.full(size, round(self.mean), dtype=np.int64)
        elif self.kind == "uniform":
            out = rng.integers(self.minimum, self.maximum + 1, size=size)
        else:
            # mean of the lognormal equals self.mean
            mu = math.log(self.mean) - 0.5 * self.sigma ** 2
            out = np.rint(rng.lognormal(mu, self.sigma, size=size)).astype(np.int64)
        return np.clip(out, self.minimum, self.maximum)

    @classmethod
    def parse(cls, text: str) -> "LengthDist":
        """Parse ``kind:mean[:sigma[:min[:max]]]`` (uniform is ``uniform:min:max``)."""
        parts = text.strip().split(":")
        kind = parts[0]
        nums = [float(p) for p in parts[1:]]
        if kind == "fixed":
            return cls("fixed", mean=nums[0], minimum=1)
        if kind == "uniform":
            lo, hi = int(nums[0]), int(nums[1])
            return cls("uniform", mean=(lo + hi) / 2, minimum=lo, maximum=hi)
        if kind == "lognormal":
            mean, sigma = nums[0], nums[1] if len(nums) > 1 else 0.3
            lo = int(nums[2]) if len(nums) > 2 else 1
            hi = int(nums[3]) if len(nums) > 3 else 1_000_000
            return cls("lognormal", mean=mean, sigma=sigma, minimum=lo, maximum=hi)
        raise InvalidConfig(f"cannot parse length distribution {text!r}")

    def format(self) -> str:
        if self.kind == "fixed":
            return f"fixed:{self.mean:g}"
        if self.kind == "uniform":
            return f"uniform:{self.minimum}:{self.maximum}"
        return f"lognormal:{self.mean:g}:{self.sigma:g}:{self.minimum}:{self.maximum}"


@dataclass(frozen=True)
class SynthConfig:
    n_items: int = 20_000
    n_users: int = 2_000
    n_requests: int = 5_000
    zipf_s: float = 1.2
    qps: float = 15.0
    candidates_per_request: int = 20
    item_token_dist: LengthDist = field(
        default_factory=lambda: LengthDist("lognormal", mean=87, sigma=0.35, minimum=16, maximum=512))
    history_len_dist: LengthDist = field(
        default_factory=lambda: LengthDist("uniform", mean=8, minimum=4, maximum=12))
    review_token_dist: LengthDist = field(
        default_factory=lambda: LengthDist("lognormal", mean=80, sigma=0.4, minimum=8, maximum=400))
    instruction_tokens: int = 207
    n_clusters: int = 400
    cluster_coherence: float = 0.9
    secondary_share: float = 0.5
    reviews_per_user: int = 12
    vocab_size: int = 2_000
    vocab_zipf_s: float = 1.0
    vocab_overlap: float = 0.95
    n_categories: int = 20

    def __post_init__(self) -> None:
        positive = ("n_items", "n_users", "n_requests", "zipf_s", "qps", "candidates_per_request",
                    "n_clusters", "reviews_per_user", "vocab_size", "n_categories")
        for name in positive:
            if not getattr(self, name) > 0:
                raise InvalidConfig(f"{name} must be positive, got {getattr(self, name)}")
        if self.instruction_tokens < 0:
            raise InvalidConfig("instruction_tokens must be non-negative")
        if self.candidates_per_request > self.n_items:
            raise InvalidConfig("candidates_per_request exceeds n_items")
        if self.n_clusters > self.n_items:
            raise InvalidConfig("n_clusters exceeds n_items")
        for name in ("cluster_coherence", "secondary_share", "vocab_overlap"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidConfig(f"{name} must lie in [0, 1]")
        if self.vocab_zipf_s < 0:
            raise InvalidConfig("vocab_zipf_s must be non-negative")


@dataclass(frozen=True)
class SyntheticWorld:
    """Generator ground truth kept alongside the synthesized files."""

    item_ids: Tuple[str, ...]          # rank order: index 0 is the most popular item
    item_cluster: np.ndarray           # latent cluster per item (rank order)
    user_cluster: np.ndarray
    vocab_size: int

    def cluster_of(self) -> Dict[str, int]:
        return {iid: int(c) for iid, c in zip(self.item_ids, self.item_cluster)}


def zipf_weights(n: int, s: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    w = ranks ** (-float(s))
    return w / w.sum()


def zipf_top_share(n: int, s: float, top: int) -> float:
    """Analytic share of probability mass held by the ``top`` most popular of ``n`` items."""
    w = np.arange(1, n + 1, dtype=np.float64) ** (-float(s))
    return float(w[:top].sum() / w.sum())


class _Sampler:
    """Weighted sampling of distinct indices.

    Small pools use exponential keys (successive sampling without replacement);
    large pools use inverse-CDF draws with rejection, which is cheap when only a
    few of many items are requested.
    """

    def __init__(self, weights: np.ndarray):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.cdf = np.cumsum(self.weights)
        self.cdf /= self.cdf[-1]

    def draw(self, rng: np.random.Generator, k: int, exclude: set) -> List[int]:
        n = len(self.weights)
        k = min(k, n - len(exclude))
        if k <= 0:
            return []
        if n <= 4096 or 4 * k > n:
            keys = rng.exponential(size=n) / self.weights
            if exclude:
                keys[list(exclude)] = np.inf
            return [int(i) for i in np.argsort(keys, kind="stable")[:k]]
        out: List[int] = []
        seen = set(exclude)
        while len(out) < k:
            idx = np.searchsorted(self.cdf, rng.random(2 * (k - len(out)) + 4), side="right")
            for i in idx.tolist():
                i = min(i, n - 1)
                if i not in seen:
                    seen.add(i)
                    out.append(i)
                    if len(out) == k:
                        break
        return out


def synthesize_trace(cfg: SynthConfig, seed: int,
                     return_world: bool = False):
    """Generate a clustered Zipf catalog, a review corpus and a Poisson trace.

    Items are ranked by popularity (rank ``r`` has weight ``(r+1)**-zipf_s``) and
    dealt round-robin into ``n_clusters`` latent clusters. Every user has a home
    cluster chosen in proportion to cluster mass, so the per-slot marginal item
    distribution stays Zipf. Each candidate slot draws from the user's home
    cluster with probability ``cluster_coherence`` and from the global
    distribution otherwise. With ``secondary_share > 0`` that fraction of the
    in-cluster slots comes from a second interest cluster of the user instead.
    """
    if not isinstance(cfg, SynthConfig):
        raise InvalidConfig("cfg must be a SynthConfig")
    rng = np.random.default_rng(seed)
    n_items, n_clusters = cfg.n_items, cfg.n_clusters

    width = len(str(n_items - 1))
    item_ids = tuple(f"i{r:0{width}d}" for r in range(n_items))
    weights = zipf_weights(n_items, cfg.zipf_s)
    item_cluster = np.arange(n_items) % n_clusters
    token_counts = cfg.item_token_dist.sample(rng, n_items)
    categories = rng.integers(0, cfg.n_categories, size=n_items)
    catalog: Catalog = {
        iid: ItemRecord(iid, int(tc), f"cat{int(c):02d}")
        for iid, tc, c in zip(item_ids, token_counts, categories)
    }

    members = [np.flatnonzero(item_cluster == c) for c in range(n_clusters)]
    cluster_mass = np.array([weights[m].sum() for m in members])
    cluster_samplers = [_Sampler(weights[m]) for m in members]
    global_sampler = _Sampler(weights)
    cluster_p = cluster_mass / cluster_mass.sum()
    user_cluster = rng.choice(n_clusters, size=cfg.n_users, p=cluster_p)
    user_cluster2 = rng.choice(n_clusters, size=cfg.n_users, p=cluster_p)
    if n_clusters > 1:
        same = user_cluster2 == user_cluster
        user_cluster2[same] = (user_cluster2[same] + 1) % n_clusters

    vocab_w = zipf_weights(cfg.vocab_size, cfg.vocab_zipf_s) if cfg.vocab_zipf_s > 0 \
        else np.full(cfg.vocab_size, 1.0 / cfg.vocab_size)
    vocab_cdf = np.cumsum(vocab_w)
    vocab_cdf /= vocab_cdf[-1]

    def draw_items(user: int, k: int) -> List[int]:
        c, c2 = int(user_cluster[user]), int(user_cluster2[user])
        n_in = int(rng.binomial(k, cfg.cluster_coherence))
        n_sec = int(rng.binomial(n_in, cfg.secondary_share)) if n_clusters > 1 else 0
        n_pri = min(n_in - n_sec, len(members[c]))
        n_sec = min(n_sec, len(members[c2]))
        chosen = [int(members[c][j]) for j in cluster_samplers[c].draw(rng, n_pri, set())]
        chosen += [int(members[c2][j]) for j in cluster_samplers[c2].draw(rng, n_sec, set())]
        chosen += global_sampler.draw(rng, k - len(chosen), set(chosen))
        return chosen

    def review_tokens(n: int, overlap: float) -> Tuple[int, ...]:
        toks = np.searchsorted(vocab_cdf, rng.random(n), side="right")
        toks = np.minimum(toks, cfg.vocab_size - 1)
        if overlap < 1.0:
            novel = rng.random(n) >= overlap
            # novel tokens live outside the shared vocabulary
            toks = np.where(novel, cfg.vocab_size + rng.integers(0, 50 * cfg.vocab_size, size=n), toks)
        return tuple(toks.tolist())

    max_hist = int(cfg.history_len_dist.maximum if cfg.history_len_dist.kind != "fixed"
                   else round(cfg.history_len_dist.mean))
    n_reviews = cfg.n_users * (cfg.reviews_per_user + max_hist)
    review_lens = iter(cfg.review_token_dist.sample(rng, n_reviews).tolist())
    ratings = iter((rng.choice(5, size=n_reviews, p=[0.08, 0.07, 0.12, 0.28, 0.45]) + 1).tolist())

    corpus: List[ReviewRecord] = []
    ts = 0
    for u in range(cfg.n_users):
        uid = f"u{u:05d}"
        for j in draw_items(u, cfg.reviews_per_user):
            corpus.append(ReviewRecord(uid, item_ids[j], next(ratings),
                                       review_tokens(next(review_lens), 1.0), ts))
            ts += 1

    # held-out histories: the user's most recent reviews, written after the corpus snapshot
    recent: List[List[ReviewRecord]] = []
    for u in range(cfg.n_users):
        uid = f"u{u:05d}"
        reviews = []
        for j in draw_items(u, max_hist):
            reviews.append(ReviewRecord(uid, item_ids[j], next(ratings),
                                        review_tokens(next(review_lens), cfg.vocab_overlap), ts))
            ts += 1
        recent.append(reviews)

    gaps = rng.exponential(1.0 / cfg.qps, size=cfg.n_requests)
    arrivals = np.cumsum(gaps) - gaps[0]
    users = rng.integers(0, cfg.n_users, size=cfg.n_requests)
    hist_lens = cfg.history_len_dist.sample(rng, cfg.n_requests)
    rwidth = len(str(cfg.n_requests - 1))
    requests = []
    for q in range(cfg.n_requests):
        u = int(users[q])
        cands = draw_items(u, cfg.candidates_per_request)
        h = min(int(hist_lens[q]), len(recent[u]))
        requests.append(Request(
            request_id=f"r{q:0{rwidth}d}",
            arrival_time=round(float(arrivals[q]), 6),
            instruction_tokens=cfg.instruction_tokens,
            history=tuple(recent[u][-h:]) if h else (),
            candidates=tuple(item_ids[j] for j in cands),
            user_id=f"u{u:05d}",
        ))
    trace = Trace(tuple(requests), source="synthetic", qps=cfg.qps, seed=seed)
    out = (catalog, tuple(corpus), trace)
    if return_world:
        world = SyntheticWorld(item_ids, item_cluster, user_cluster, cfg.vocab_size)
        return out + (world,)
    return out
