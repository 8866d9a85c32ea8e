"""Prefill latency cost model."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Dict

from ..errors import InvalidConfig


@dataclass(frozen=True)
class CostModel:
    """Per-instance prefill cost coefficients.

    Defaults put a 2,560-token full prefill at roughly 0.15 s for an 8B-class
    model, split about evenly between the quadratic and linear terms.
    """

    attn_cost_per_token_pair: float = 1.1e-8
    linear_cost_per_token: float = 3.0e-5
    kv_bytes_per_token: int = 275_000
    pcie_bw: float = 32e9
    net_bw: float = 12.5e9
    first_layer_fraction: float = 1.0 / 36.0
    assembly_cost_per_block: float = 2.0e-5
    model_scale: float = 1.0

    def __post_init__(self) -> None:
        for name in ("attn_cost_per_token_pair", "linear_cost_per_token", "kv_bytes_per_token",
                     "pcie_bw", "net_bw", "model_scale"):
            if not getattr(self, name) > 0:
                raise InvalidConfig(f"{name} must be positive")
        if self.assembly_cost_per_block < 0:
            raise InvalidConfig("assembly_cost_per_block must be non-negative")
        if not 0.0 < self.first_layer_fraction < 1.0:
            raise InvalidConfig("first_layer_fraction must lie in (0, 1)")

    def full_prefill(self, n_tokens: int) -> float:
        """Latency of recomputing an ``n_tokens`` prompt from scratch."""
        n = float(n_tokens)
        return self.model_scale * (self.attn_cost_per_token_pair * n * n + self.linear_cost_per_token * n)

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def calibrate(target_seconds: float, prompt_tokens: int = 2560, attention_share: float = 0.5,
              base: CostModel = CostModel()) -> CostModel:
    """Coefficients such that a full prefill of ``prompt_tokens`` costs ``target_seconds``
    with the quadratic term contributing ``attention_share`` of it (model_scale 1)."""
    if target_seconds <= 0 or prompt_tokens <= 0 or not 0.0 < attention_share < 1.0:
        raise InvalidConfig("calibrate needs a positive target, prompt length and a share in (0, 1)")
    n = float(prompt_tokens)
    return replace(base,
                   attn_cost_per_token_pair=target_seconds * attention_share / (n * n),
                   linear_cost_per_token=target_seconds * (1.0 - attention_share) / n,
                   model_scale=1.0)


def latency_terms(breakdown, cm: CostModel) -> Dict[str, float]:
    """``compute``, ``transfer`` and ``total`` seconds for one breakdown."""
    n_rec = float(breakdown.recomputed_tokens)
    n_total = float(breakdown.total_tokens)
    compute = cm.model_scale * (cm.attn_cost_per_token_pair * n_rec * n_total
                                + cm.linear_cost_per_token * n_rec)
    compute += cm.assembly_cost_per_block * breakdown.reused_blocks
    transfer = breakdown.transferred_bytes / cm.pcie_bw + breakdown.remote_bytes / cm.net_bw
    f = cm.first_layer_fraction
    # first-layer attention runs while cached blocks stream in over PCIe
    total = max(transfer, f * compute) + (1.0 - f) * compute
    return {"compute": compute, "transfer": transfer, "total": total}


def prefill_latency(breakdown, cm: CostModel) -> float:
    return latency_terms(breakdown, cm)["total"]
