"""INI configuration with one section per pipeline stage."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

from .engine.cost import CostModel
from .engine.recompute import EngineMode, RecomputePolicy
from .errors import InvalidConfig
from .placement.partition import PartitionConfig
from .scheduler import Policy
from .semlib import EmbeddingConfig, LshConfig
from .workload import LengthDist, SynthConfig

SECTIONS = ("workload", "placement", "semlib", "scheduler", "engine")


@dataclass(frozen=True)
class SemlibConfig:
    budget: int = 100_000
    emb: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    lsh: LshConfig = field(default_factory=LshConfig)


@dataclass(frozen=True)
class EngineConfig:
    mode: EngineMode = EngineMode.RCLLM
    cost: CostModel = field(default_factory=CostModel)
    recompute: RecomputePolicy = field(default_factory=RecomputePolicy)
    remote_fetch: bool = False


@dataclass(frozen=True)
class AppConfig:
    seed: int = 0
    workload: SynthConfig = field(default_factory=SynthConfig)
    placement: PartitionConfig = field(default_factory=PartitionConfig)
    semlib: SemlibConfig = field(default_factory=SemlibConfig)
    scheduler: Policy = field(default_factory=Policy.affinity)
    engine: EngineConfig = field(default_factory=EngineConfig)


def _coerce(value: str, default: Any, key: str):
    try:
        if isinstance(default, bool):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, LengthDist):
            return LengthDist.parse(value)
        if isinstance(default, tuple):
            return tuple(int(x) for x in value.replace(",", " ").split())
        if default is None or isinstance(default, str):
            return value.strip()
    except ValueError:
        raise InvalidConfig(f"bad value for {key}: {value!r}") from None
    raise InvalidConfig(f"unsupported option {key}")


def _apply(obj, values: Dict[str, str], section: str, rename: Optional[Dict[str, str]] = None):
    rename = rename or {}
    names = {f.name for f in dataclasses.fields(obj)}
    updates = {}
    for key, raw in values.items():
        attr = rename.get(key, key)
        if attr not in names:
            raise InvalidConfig(f"unknown option [{section}] {key}")
        updates[attr] = _coerce(raw, getattr(obj, attr), f"[{section}] {key}")
    return dataclasses.replace(obj, **updates) if updates else obj


def _take(values: Dict[str, str], prefix: str) -> Dict[str, str]:
    taken = {k[len(prefix):]: v for k, v in values.items() if k.startswith(prefix)}
    for k in list(values):
        if k.startswith(prefix):
            del values[k]
    return taken


def load_config(path=None, text: Optional[str] = None) -> AppConfig:
    """Read an INI file (or string); missing sections and keys keep their defaults."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        if text is not None:
            parser.read_string(text)
        elif path is not None:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
    except configparser.Error as exc:
        raise InvalidConfig(f"cannot parse config: {exc}") from None
    for sec in parser.sections():
        if sec not in SECTIONS + ("run",):
            raise InvalidConfig(f"unknown config section [{sec}]")

    def section(name):
        return dict(parser.items(name)) if parser.has_section(name) else {}

    cfg = AppConfig()
    run = section("run")
    seed = int(run.pop("seed", cfg.seed))
    if run:
        raise InvalidConfig(f"unknown option(s) in [run]: {sorted(run)}")

    workload = _apply(cfg.workload, section("workload"), "workload")
    placement = _apply(cfg.placement, section("placement"), "placement")

    sem = section("semlib")
    emb = _apply(cfg.semlib.emb, _take(sem, "embedding_"), "semlib")
    lsh = _apply(cfg.semlib.lsh, _take(sem, "lsh_"), "semlib")
    semlib = _apply(SemlibConfig(emb=emb, lsh=lsh), sem, "semlib")

    sch = section("scheduler")
    kind = sch.pop("policy", "affinity")
    alpha = float(sch.pop("alpha", 0.7))
    beta = float(sch.pop("beta", 0.3))
    if sch:
        raise InvalidConfig(f"unknown option(s) in [scheduler]: {sorted(sch)}")
    scheduler = Policy.parse(kind, alpha, beta)

    eng = section("engine")
    mode = EngineMode.parse(eng.pop("mode", "rcllm"))
    remote = _coerce(eng.pop("remote_fetch", "false"), False, "[engine] remote_fetch")
    recompute_keys = {f.name for f in dataclasses.fields(RecomputePolicy)}
    rec_vals = {k: eng.pop(k) for k in list(eng) if k in recompute_keys}
    if "r" in eng:
        r = eng.pop("r")
        rec_vals.setdefault("r_rev", r)
        rec_vals.setdefault("r_item", r)
    recompute = _apply(cfg.engine.recompute, rec_vals, "engine")
    cost = _apply(cfg.engine.cost, eng, "engine")
    engine = EngineConfig(mode, cost, recompute, bool(remote))
    try:
        return AppConfig(seed, workload, placement, semlib, scheduler, engine)
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(str(exc)) from None


def config_to_dict(cfg: AppConfig) -> Dict[str, Any]:
    """Plain-data echo of a configuration (for run summaries)."""
    w = dataclasses.asdict(cfg.workload)
    for k in ("item_token_dist", "history_len_dist", "review_token_dist"):
        w[k] = getattr(cfg.workload, k).format()
    return {
        "seed": cfg.seed,
        "workload": w,
        "placement": dataclasses.asdict(cfg.placement),
        "semlib": {"budget": cfg.semlib.budget,
                   "embedding": {**dataclasses.asdict(cfg.semlib.emb),
                                 "position_buckets": list(cfg.semlib.emb.position_buckets)},
                   "lsh": dataclasses.asdict(cfg.semlib.lsh)},
        "scheduler": {"policy": cfg.scheduler.kind, "alpha": cfg.scheduler.alpha, "beta": cfg.scheduler.beta},
        "engine": {"mode": cfg.engine.mode.value, "remote_fetch": cfg.engine.remote_fetch,
                   "cost": cfg.engine.cost.to_dict(),
                   "recompute": dataclasses.asdict(cfg.engine.recompute)},
    }
