"""Replicated semantic-history prototype library.

Tokens are embedded jointly with a log-scale position bucket, grouped by
random-hyperplane LSH signature, merged down to a prototype budget, and matched
at serve time by probing the LSH tables (falling back to a same-bucket linear
scan when no table collides).
"""

from __future__ import annotations

import bisect
import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import EmptyLibrary, InvalidConfig, ParseError, UnknownToken
from .workload import ReviewRecord, Trace

DEFAULT_BUCKETS = (16, 64, 256, 1024)

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


@dataclass(frozen=True)
class EmbeddingConfig:
    """Position-aware token embedding.

    ``position_buckets`` are the lower bounds of buckets 1.. (bucket 0 starts
    at position 0), so the default gives 0-15, 16-63, 64-255, 256-1023, 1024+.
    """

    dim: int = 64
    position_buckets: Tuple[int, ...] = DEFAULT_BUCKETS
    seed: int = 0
    source: str = "hashed"
    position_dim: int = 16
    position_weight: float = 0.3
    external_path: Optional[str] = None

    def __post_init__(self) -> None:
        if self.dim < 8:
            raise InvalidConfig("embedding dim must be >= 8")
        b = tuple(int(x) for x in self.position_buckets)
        if any(x <= 0 for x in b) or any(y <= x for x, y in zip(b, b[1:])):
            raise InvalidConfig("position_buckets must be positive and strictly increasing")
        object.__setattr__(self, "position_buckets", b)
        if self.position_dim % 2 or not 2 <= self.position_dim < self.dim:
            raise InvalidConfig("position_dim must be even and smaller than dim")
        if not 0.0 <= self.position_weight < 1.0:
            raise InvalidConfig("position_weight must lie in [0, 1)")
        if self.source not in ("hashed", "external"):
            raise InvalidConfig(f"unknown embedding source {self.source!r}")
        if self.source == "external" and not self.external_path:
            raise InvalidConfig("external embeddings need external_path")

    @property
    def lexical_dim(self) -> int:
        return self.dim - self.position_dim

    @property
    def n_buckets(self) -> int:
        return len(self.position_buckets) + 1


@dataclass(frozen=True)
class LshConfig:
    n_tables: int = 8
    bits_per_table: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_tables < 1:
            raise InvalidConfig("n_tables must be >= 1")
        if not 1 <= self.bits_per_table <= 64:
            raise InvalidConfig("bits_per_table must lie in [1, 64]")


def position_bucket(position: int, cfg: EmbeddingConfig) -> int:
    if position < 0:
        raise ValueError("position must be non-negative")
    return bisect.bisect_right(cfg.position_buckets, int(position))


def position_buckets(positions: np.ndarray, cfg: EmbeddingConfig) -> np.ndarray:
    positions = np.asarray(positions)
    if np.any(positions < 0):
        raise ValueError("positions must be non-negative")
    return np.searchsorted(np.asarray(cfg.position_buckets), positions, side="right")


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
        z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
        z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
        return z ^ (z >> np.uint64(31))


def _hashed_lexical(tokens: np.ndarray, dim: int, seed: int) -> np.ndarray:
    """Seeded feature-hash Gaussian vectors, one row per token, unit norm."""
    tokens = np.asarray(tokens, dtype=np.int64).astype(np.uint64)
    cols = np.arange(dim, dtype=np.uint64)
    with np.errstate(over="ignore"):
        key = (tokens[:, None] * np.uint64(0xD1B54A32D192ED03)
               + cols[None, :] * np.uint64(0x8CB92BA72F3D8DD7)
               + np.uint64(seed) * np.uint64(0xABC98388FB8FAC03)) & _MASK64
    h1 = _splitmix64(key)
    h2 = _splitmix64(h1 ^ np.uint64(0x5851F42D4C957F2D))
    u1 = ((h1 >> np.uint64(11)).astype(np.float64) + 0.5) / 2.0 ** 53
    u2 = (h2 >> np.uint64(11)).astype(np.float64) / 2.0 ** 53
    g = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
    return g / np.linalg.norm(g, axis=1, keepdims=True)


_EXTERNAL_CACHE: Dict[str, Dict[int, np.ndarray]] = {}


def load_external_embeddings(path: str) -> Dict[int, np.ndarray]:
    """Whitespace-separated ``token_id v_1 ... v_d`` lines."""
    table = _EXTERNAL_CACHE.get(path)
    if table is None:
        table = {}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.split()
                if not parts:
                    continue
                try:
                    table[int(parts[0])] = np.asarray([float(x) for x in parts[1:]])
                except ValueError:
                    raise ParseError(lineno, "bad embedding row") from None
        _EXTERNAL_CACHE[path] = table
    return table


def _lexical(tokens: np.ndarray, cfg: EmbeddingConfig) -> np.ndarray:
    if cfg.source == "hashed":
        return _hashed_lexical(tokens, cfg.lexical_dim, cfg.seed)
    table = load_external_embeddings(cfg.external_path)
    rows = []
    for t in np.asarray(tokens).tolist():
        vec = table.get(int(t))
        if vec is None:
            raise UnknownToken(int(t))
        if len(vec) != cfg.lexical_dim:
            raise InvalidConfig(f"external vector for token {t} has dim {len(vec)}, "
                                f"expected {cfg.lexical_dim}")
        rows.append(vec / np.linalg.norm(vec))
    return np.vstack(rows) if rows else np.zeros((0, cfg.lexical_dim))


def _positional(buckets: np.ndarray, cfg: EmbeddingConfig) -> np.ndarray:
    # frequencies pi*j/(J+1): codes of adjacent buckets are exactly orthogonal
    half = cfg.position_dim // 2
    freqs = np.pi * np.arange(1, half + 1) / (half + 1)
    ang = np.asarray(buckets, dtype=np.float64)[:, None] * freqs[None, :]
    code = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    return code / np.sqrt(half)


def embed_pairs(tokens: np.ndarray, buckets: np.ndarray, cfg: EmbeddingConfig) -> np.ndarray:
    """Unit vectors for (token, bucket) pairs."""
    lex = _lexical(np.asarray(tokens), cfg)
    pos = _positional(np.asarray(buckets), cfg)
    v = np.concatenate([np.sqrt(1.0 - cfg.position_weight) * lex,
                        np.sqrt(cfg.position_weight) * pos], axis=1)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def embed_token(token_id: int, position: int, cfg: EmbeddingConfig) -> np.ndarray:
    b = position_bucket(position, cfg)
    return embed_pairs(np.asarray([token_id]), np.asarray([b]), cfg)[0]


# ---------------------------------------------------------------------------
# LSH


class CosineLSH:
    """Random signed-hyperplane hashing, ``n_tables`` codes of ``bits_per_table`` bits."""

    def __init__(self, dim: int, cfg: LshConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.planes = rng.standard_normal((cfg.n_tables, cfg.bits_per_table, dim))
        self._weights = (np.uint64(1) << np.arange(cfg.bits_per_table, dtype=np.uint64))

    def codes(self, vectors: np.ndarray) -> np.ndarray:
        """uint64 code per (vector, table), shape (n, n_tables)."""
        vectors = np.atleast_2d(vectors)
        proj = np.einsum("tbd,nd->ntb", self.planes, vectors)
        bits = (proj > 0).astype(np.uint64)
        return (bits * self._weights).sum(axis=2, dtype=np.uint64)


# ---------------------------------------------------------------------------
# library


@dataclass(frozen=True)
class Prototype:
    proto_id: int
    centroid: np.ndarray
    position_bucket: int
    member_count: int
    kv_tokens: int = 1


@dataclass
class PrototypeLibrary:
    prototypes: List[Prototype]
    emb: EmbeddingConfig
    lsh_cfg: LshConfig
    budget: int = 100_000
    kv_bytes_per_token: int = 275_000
    _index: List[Dict[int, np.ndarray]] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        self.centroids = (np.vstack([p.centroid for p in self.prototypes])
                          if self.prototypes else np.zeros((0, self.emb.dim)))
        self.bucket_of = np.asarray([p.position_bucket for p in self.prototypes], dtype=np.int64)
        self.lsh = CosineLSH(self.emb.dim, self.lsh_cfg)
        self._index = []
        if self.prototypes:
            codes = self.lsh.codes(self.centroids)
            for t in range(self.lsh_cfg.n_tables):
                table: Dict[int, List[int]] = defaultdict(list)
                for pid, code in enumerate(codes[:, t].tolist()):
                    table[code].append(pid)
                self._index.append({c: np.asarray(v, dtype=np.int64) for c, v in table.items()})
        self._by_bucket = {int(b): np.flatnonzero(self.bucket_of == b) for b in np.unique(self.bucket_of)}
        self._cache: Dict[Tuple[int, int], Tuple[int, float]] = {}

    def __len__(self) -> int:
        return len(self.prototypes)

    @property
    def kv_tokens(self) -> int:
        return sum(p.kv_tokens for p in self.prototypes)

    @property
    def bytes(self) -> int:
        return self.kv_tokens * int(self.kv_bytes_per_token)

    def fingerprint(self) -> Tuple:
        return (len(self), self.emb, self.lsh_cfg, self.budget,
                float(self.centroids.sum()) if len(self) else 0.0)

    def candidates(self, code_row: np.ndarray) -> np.ndarray:
        found = [self._index[t].get(int(c)) for t, c in enumerate(code_row.tolist())]
        found = [f for f in found if f is not None]
        if not found:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(found))

    def match_vectors(self, vectors: np.ndarray, buckets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Best prototype per query vector: LSH candidates first, same-bucket scan otherwise."""
        if not self.prototypes:
            raise EmptyLibrary("the prototype library is empty")
        vectors = np.atleast_2d(vectors)
        codes = self.lsh.codes(vectors)
        ids = np.empty(len(vectors), dtype=np.int64)
        cos = np.empty(len(vectors))
        for i in range(len(vectors)):
            cand = self.candidates(codes[i])
            if len(cand) == 0:
                cand = self._by_bucket.get(int(buckets[i]))
                if cand is None or len(cand) == 0:
                    cand = np.arange(len(self.prototypes))
            sims = self.centroids[cand] @ vectors[i]
            j = int(np.argmax(sims))  # first max; cand is sorted, so the smaller id wins ties
            ids[i] = cand[j]
            cos[i] = sims[j]
        return ids, cos

    def match_pairs(self, tokens: np.ndarray, buckets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Match (token, bucket) pairs with memoisation on the pair."""
        tokens = np.asarray(tokens, dtype=np.int64)
        buckets = np.asarray(buckets, dtype=np.int64)
        ids = np.empty(len(tokens), dtype=np.int64)
        cos = np.empty(len(tokens))
        if len(tokens) == 0:
            return ids, cos
        nb = self.emb.n_buckets
        keys, inverse = np.unique(tokens * nb + buckets, return_inverse=True)
        uniq = np.stack([keys // nb, keys % nb], axis=1)
        inverse = inverse.reshape(-1)
        missing = [i for i, (t, b) in enumerate(uniq.tolist()) if (t, b) not in self._cache]
        if missing:
            sub = uniq[missing]
            vecs = embed_pairs(sub[:, 0], sub[:, 1], self.emb)
            mid, mcos = self.match_vectors(vecs, sub[:, 1])
            for (t, b), pid, c in zip(sub.tolist(), mid.tolist(), mcos.tolist()):
                self._cache[(t, b)] = (pid, c)
        res = [self._cache[(t, b)] for t, b in uniq.tolist()]
        u_ids = np.asarray([r[0] for r in res], dtype=np.int64)
        u_cos = np.asarray([r[1] for r in res])
        return u_ids[inverse], u_cos[inverse]

    @classmethod
    def from_vectors(cls, vectors: np.ndarray, buckets: Sequence[int], emb: EmbeddingConfig,
                     lsh: LshConfig, **kwargs) -> "PrototypeLibrary":
        """One prototype per given vector (normalised); used for index-level checks."""
        vectors = np.asarray(vectors, dtype=np.float64)
        vectors = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
        protos = [Prototype(i, v, int(b), 1) for i, (v, b) in enumerate(zip(vectors, buckets))]
        return cls(protos, emb, lsh, budget=max(len(protos), 1), **kwargs)


def history_occurrences(reviews: Iterable[ReviewRecord], base_position: int = 0
                        ) -> Tuple[np.ndarray, np.ndarray]:
    """(token, position) for every corpus token, laid out per user in timestamp order."""
    by_user: Dict[str, List[ReviewRecord]] = defaultdict(list)
    for r in reviews:
        by_user[r.user_id].append(r)
    toks: List[np.ndarray] = []
    poss: List[np.ndarray] = []
    for user in sorted(by_user):
        revs = sorted(by_user[user], key=lambda r: r.timestamp)
        seq = np.fromiter((t for r in revs for t in r.token_ids), dtype=np.int64)
        toks.append(seq)
        poss.append(base_position + np.arange(len(seq), dtype=np.int64))
    if not toks:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(toks), np.concatenate(poss)


def _nearest(sources: np.ndarray, targets: np.ndarray, chunk: int = 512) -> np.ndarray:
    out = np.empty(len(sources), dtype=np.int64)
    for s in range(0, len(sources), chunk):
        sims = sources[s:s + chunk] @ targets.T
        out[s:s + chunk] = np.argmax(sims, axis=1)
    return out


def build_library(corpus: Iterable[ReviewRecord], budget: int = 100_000,
                  emb: EmbeddingConfig = EmbeddingConfig(), lsh: LshConfig = LshConfig(),
                  base_position: int = 0, kv_bytes_per_token: int = 275_000) -> PrototypeLibrary:
    """Embed every history token occurrence, group by full LSH signature, merge to budget.

    Identical (token, bucket) pairs embed identically, so occurrences are
    counted per pair before embedding. Groups over budget are merged smallest
    first into the nearest surviving centroid; centroids are the normalised
    member means.
    """
    if budget < 1:
        raise InvalidConfig("budget must be >= 1")
    tokens, positions = history_occurrences(corpus, base_position)
    if len(tokens) == 0:
        raise InvalidConfig("cannot build a library from an empty corpus")
    buckets = position_buckets(positions, emb)
    nb = emb.n_buckets
    keys, counts = np.unique(tokens * nb + buckets, return_counts=True)
    pairs = np.stack([keys // nb, keys % nb], axis=1)
    vecs = embed_pairs(pairs[:, 0], pairs[:, 1], emb)
    hasher = CosineLSH(emb.dim, lsh)
    codes = hasher.codes(vecs)
    _, group, first = np.unique(codes, axis=0, return_inverse=True, return_index=True)
    group = group.reshape(-1)
    n_groups = len(first)

    sums = np.zeros((n_groups, emb.dim))
    np.add.at(sums, group, vecs * counts[:, None])
    members = np.bincount(group, weights=counts, minlength=n_groups).astype(np.int64)
    bucket_mass = np.zeros((n_groups, emb.n_buckets))
    np.add.at(bucket_mass, (group, pairs[:, 1]), counts)

    alive = np.arange(n_groups)
    if n_groups > budget:
        order = np.lexsort((first, members))          # smallest groups first, then first appearance
        sources, alive = order[: n_groups - budget], np.sort(order[n_groups - budget:])
        centroids = sums[alive] / np.linalg.norm(sums[alive], axis=1, keepdims=True)
        src_vecs = sums[sources] / np.linalg.norm(sums[sources], axis=1, keepdims=True)
        # nearest surviving centroid, restricted to the same dominant position bucket when possible
        src_bucket = np.argmax(bucket_mass[sources], axis=1)
        alive_bucket = np.argmax(bucket_mass[alive], axis=1)
        dest = np.empty(len(sources), dtype=np.int64)
        for b in np.unique(src_bucket).tolist():
            s_idx = np.flatnonzero(src_bucket == b)
            t_idx = np.flatnonzero(alive_bucket == b)
            if len(t_idx) == 0:
                t_idx = np.arange(len(alive))
            dest[s_idx] = alive[t_idx[_nearest(src_vecs[s_idx], centroids[t_idx])]]
        np.add.at(sums, dest, sums[sources])
        np.add.at(members, dest, members[sources])
        np.add.at(bucket_mass, dest, bucket_mass[sources])

    alive = alive[np.argsort(first[alive], kind="stable")]
    protos = []
    for pid, g in enumerate(alive.tolist()):
        c = sums[g] / np.linalg.norm(sums[g])
        protos.append(Prototype(pid, c, int(np.argmax(bucket_mass[g])), int(members[g])))
    return PrototypeLibrary(protos, emb, lsh, budget=int(budget), kv_bytes_per_token=int(kv_bytes_per_token))


def match_token(token_id: int, position: int, lib: PrototypeLibrary,
                emb: Optional[EmbeddingConfig] = None) -> Tuple[int, float]:
    if emb is not None and emb != lib.emb:
        raise InvalidConfig("library was built with a different embedding config")
    ids, cos = lib.match_pairs(np.asarray([token_id]), np.asarray([position_bucket(position, lib.emb)]))
    return int(ids[0]), float(cos[0])


def history_tokens_with_positions(req) -> Tuple[np.ndarray, np.ndarray]:
    """History token ids of a request and their absolute prompt positions."""
    seq = np.fromiter((t for r in req.history for t in r.token_ids), dtype=np.int64)
    return seq, req.instruction_tokens + np.arange(len(seq), dtype=np.int64)


def history_cosines(req, lib: PrototypeLibrary) -> np.ndarray:
    toks, pos = history_tokens_with_positions(req)
    if len(toks) == 0:
        return np.zeros(0)
    _, cos = lib.match_pairs(toks, position_buckets(pos, lib.emb))
    return cos


def match_rate(trace: Trace, lib: PrototypeLibrary, emb: Optional[EmbeddingConfig] = None,
               threshold: float = 0.95) -> float:
    """Fraction of the trace's history tokens whose best match has cosine >= threshold."""
    if emb is not None and emb != lib.emb:
        raise InvalidConfig("library was built with a different embedding config")
    toks, buckets = [], []
    for req in trace.requests:
        t, pos = history_tokens_with_positions(req)
        toks.append(t)
        buckets.append(position_buckets(pos, lib.emb))
    if not toks:
        return 0.0
    toks_all = np.concatenate(toks)
    total = len(toks_all)
    if total == 0:
        return 0.0
    _, cos = lib.match_pairs(toks_all, np.concatenate(buckets))
    hits = int(np.count_nonzero(cos >= threshold))
    return hits / total if total else 0.0


# ---------------------------------------------------------------------------
# serialization: header line, then one prototype per line


def write_library(lib: PrototypeLibrary, path) -> None:
    e, l = lib.emb, lib.lsh_cfg
    header = {"record": "header", "dim": e.dim, "position_buckets": list(e.position_buckets),
              "position_dim": e.position_dim, "position_weight": e.position_weight,
              "embedding_seed": e.seed, "source": e.source, "external_path": e.external_path,
              "n_tables": l.n_tables, "bits_per_table": l.bits_per_table, "lsh_seed": l.seed,
              "budget": lib.budget, "kv_bytes_per_token": lib.kv_bytes_per_token,
              "n_prototypes": len(lib), "bytes": lib.bytes}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for p in lib.prototypes:
            fh.write(json.dumps({"proto_id": p.proto_id, "bucket": p.position_bucket,
                                 "members": p.member_count, "kv_tokens": p.kv_tokens,
                                 "centroid": p.centroid.tolist()}, separators=(",", ":")) + "\n")


def read_library(path) -> PrototypeLibrary:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ParseError(0, "empty library file")
    try:
        h = json.loads(lines[0])
        emb = EmbeddingConfig(dim=h["dim"], position_buckets=tuple(h["position_buckets"]),
                              seed=h["embedding_seed"], source=h["source"],
                              position_dim=h["position_dim"], position_weight=h["position_weight"],
                              external_path=h.get("external_path"))
        lsh = LshConfig(h["n_tables"], h["bits_per_table"], h["lsh_seed"])
        protos = []
        for line in lines[1:]:
            o = json.loads(line)
            protos.append(Prototype(int(o["proto_id"]), np.asarray(o["centroid"], dtype=np.float64),
                                    int(o["bucket"]), int(o["members"]), int(o.get("kv_tokens", 1))))
    except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
        raise ParseError(0, f"bad library file: {exc}") from None
    return PrototypeLibrary(protos, emb, lsh, budget=int(h["budget"]),
                            kv_bytes_per_token=int(h["kv_bytes_per_token"]))


# ---------------------------------------------------------------------------


class SemanticLibrary(TransformerMixin, BaseEstimator):
    """Fit a prototype library on review history; transform (token, position) rows
    into ``[proto_id, cosine]`` rows."""

    def __init__(self, budget: int = 100_000, dim: int = 64, position_buckets=DEFAULT_BUCKETS,
                 position_dim: int = 16, position_weight: float = 0.3, n_tables: int = 8,
                 bits_per_table: int = 16, seed: int = 0, base_position: int = 0,
                 kv_bytes_per_token: int = 275_000):
        self.budget = budget
        self.dim = dim
        self.position_buckets = position_buckets
        self.position_dim = position_dim
        self.position_weight = position_weight
        self.n_tables = n_tables
        self.bits_per_table = bits_per_table
        self.seed = seed
        self.base_position = base_position
        self.kv_bytes_per_token = kv_bytes_per_token

    def fit(self, X: Sequence[ReviewRecord], y=None):
        emb = EmbeddingConfig(self.dim, tuple(self.position_buckets), self.seed,
                              position_dim=self.position_dim, position_weight=self.position_weight)
        lsh = LshConfig(self.n_tables, self.bits_per_table, self.seed)
        self.library_ = build_library(X, self.budget, emb, lsh, self.base_position, self.kv_bytes_per_token)
        self.n_prototypes_ = len(self.library_)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "library_")
        X = check_array(X, dtype=np.int64)
        if X.shape[1] != 2:
            raise ValueError("expected rows of (token_id, position)")
        ids, cos = self.library_.match_pairs(X[:, 0], position_buckets(X[:, 1], self.library_.emb))
        return np.column_stack([ids.astype(np.float64), cos])
