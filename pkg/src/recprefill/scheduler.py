"""Cache-affinity request routing and baseline policies."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import FrozenSet, Optional, Sequence

import numpy as np

from .errors import InvalidConfig
from .workload import Request

POLICY_KINDS = ("affinity", "hit_only", "load_only", "least_loaded", "round_robin")


@dataclass(frozen=True)
class NodeState:
    node_id: int
    manifest: FrozenSet[str]
    queue_backlog_tokens: int = 0
    busy_until: float = 0.0

    def __post_init__(self) -> None:
        if self.queue_backlog_tokens < 0:
            raise ValueError("queue_backlog_tokens must be non-negative")

    def with_backlog(self, tokens: int) -> "NodeState":
        return replace(self, queue_backlog_tokens=int(tokens))


@dataclass(frozen=True)
class Policy:
    kind: str = "affinity"
    alpha: float = 0.7
    beta: float = 0.3

    def __post_init__(self) -> None:
        if self.kind not in POLICY_KINDS:
            raise InvalidConfig(f"unknown policy {self.kind!r}; expected one of {POLICY_KINDS}")
        if self.kind == "affinity":
            if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
                raise InvalidConfig("affinity needs alpha >= 0, beta >= 0, alpha + beta > 0")

    @classmethod
    def affinity(cls, alpha: float = 0.7, beta: float = 0.3) -> "Policy":
        return cls("affinity", float(alpha), float(beta))

    @classmethod
    def hit_only(cls) -> "Policy":
        return cls("hit_only", 1.0, 0.0)

    @classmethod
    def load_only(cls) -> "Policy":
        return cls("load_only", 0.0, 1.0)

    @classmethod
    def least_loaded(cls) -> "Policy":
        return cls("least_loaded", 0.0, 0.0)

    @classmethod
    def round_robin(cls) -> "Policy":
        return cls("round_robin", 0.0, 0.0)

    @property
    def weights(self):
        """(alpha, beta) actually used for scoring; baselines map to their reductions."""
        if self.kind == "hit_only":
            return 1.0, 0.0
        if self.kind == "load_only":
            return 0.0, 1.0
        return self.alpha, self.beta

    @property
    def label(self) -> str:
        if self.kind == "affinity":
            return f"affinity({self.alpha:g},{self.beta:g})"
        return self.kind

    @classmethod
    def parse(cls, text: str, alpha: float = 0.7, beta: float = 0.3) -> "Policy":
        """``affinity``, ``affinity:0.5,0.5``, ``hit_only``, ``round_robin`` ..."""
        name, _, args = text.strip().partition(":")
        name = name.replace("-", "_").lower()
        if name == "affinity" and args:
            try:
                a, b = (float(x) for x in args.split(","))
            except ValueError:
                raise InvalidConfig(f"bad affinity parameters {args!r}") from None
            return cls.affinity(a, b)
        if name == "affinity":
            return cls.affinity(alpha, beta)
        makers = {"hit_only": cls.hit_only, "load_only": cls.load_only,
                  "least_loaded": cls.least_loaded, "round_robin": cls.round_robin}
        if name not in makers:
            raise InvalidConfig(f"unknown policy {text!r}")
        return makers[name]()


def estimate_hit(req: Request, node: NodeState) -> float:
    if not req.candidates:
        raise ValueError("request has no candidates")
    return sum(1 for c in req.candidates if c in node.manifest) / len(req.candidates)


def load(node: NodeState, cluster: Sequence[NodeState]) -> float:
    peak = max((n.queue_backlog_tokens for n in cluster), default=0)
    return node.queue_backlog_tokens / max(1, peak)


def affinity(req: Request, node: NodeState, alpha: float, beta: float,
             cluster: Sequence[NodeState]) -> float:
    return alpha * estimate_hit(req, node) + beta * (1.0 - load(node, cluster))


def score_vector(hits: np.ndarray, backlogs: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    loads = backlogs / max(1, int(backlogs.max()) if len(backlogs) else 0)
    return alpha * hits + beta * (1.0 - loads)


class Router:
    """Stateful wrapper carrying the round-robin counter."""

    def __init__(self, policy: Policy):
        self.policy = policy
        self._next = 0

    def reset(self) -> None:
        self._next = 0

    def choose(self, hits: np.ndarray, backlogs: np.ndarray) -> int:
        """Route given per-node hit estimates and backlogs (node ids = positions)."""
        n = len(backlogs)
        if n == 0:
            raise ValueError("cluster is empty")
        kind = self.policy.kind
        if kind == "round_robin":
            q = self._next % n
            self._next += 1
            return q
        if kind == "least_loaded":
            return int(np.argmin(backlogs))
        a, b = self.policy.weights
        return int(np.argmax(score_vector(np.asarray(hits, dtype=np.float64),
                                          np.asarray(backlogs, dtype=np.int64), a, b)))

    def route(self, req: Request, cluster: Sequence[NodeState]) -> int:
        order = sorted(range(len(cluster)), key=lambda i: cluster[i].node_id)
        nodes = [cluster[i] for i in order]
        hits = np.asarray([estimate_hit(req, n) for n in nodes])
        backlogs = np.asarray([n.queue_backlog_tokens for n in nodes], dtype=np.int64)
        return nodes[self.choose(hits, backlogs)].node_id


def route(req: Request, cluster: Sequence[NodeState], policy: Policy,
          router: Optional[Router] = None) -> int:
    """One routing decision; pass a persistent ``router`` for round-robin sequences."""
    r = router if router is not None else Router(policy)
    return r.route(req, cluster)
