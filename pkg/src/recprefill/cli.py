"""Command-line entry point: ``recprefill <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .config import AppConfig, config_to_dict, load_config
from .engine import EngineMode, RecomputePolicy, read_run, simulate, write_run
from .errors import InvalidConfig, RecPrefillError
from .metrics import cdf, compare, summarize
from .placement import (PartitionConfig, diff_plans, footprint, place_items, read_plan, write_diff,
                        write_plan)
from .scheduler import Policy
from .semlib import build_library, match_rate, read_library, write_library
from .workload import (load_catalog, load_corpus, load_trace, synthesize_trace, write_catalog,
                       write_corpus, write_trace)


class UsageError(RecPrefillError):
    code = "usage_error"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dump(obj, path: Optional[str]) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _config(args) -> AppConfig:
    cfg = load_config(args.config) if args.config else AppConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def cmd_synth_trace(args) -> None:
    cfg = _config(args)
    w = cfg.workload
    if args.n_requests is not None:
        w = dataclasses.replace(w, n_requests=args.n_requests)
    if args.qps is not None:
        w = dataclasses.replace(w, qps=args.qps)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    catalog, corpus, trace = synthesize_trace(w, cfg.seed)
    write_catalog(catalog, out / "catalog.jsonl")
    write_corpus(corpus, out / "corpus.jsonl")
    write_trace(trace, out / "trace.jsonl")


def cmd_build_placement(args) -> None:
    cfg = _config(args)
    pc = cfg.placement
    if args.k is not None:
        pc = dataclasses.replace(pc, k=args.k)
    if args.hot_fraction is not None:
        pc = dataclasses.replace(pc, hot_fraction=args.hot_fraction)
    pc = PartitionConfig(**dataclasses.asdict(pc))
    catalog = load_catalog(args.catalog)
    corpus = load_corpus(args.corpus)
    trace = load_trace(args.trace) if args.trace else None
    plan = place_items(catalog, corpus, pc, trace=trace,
                       kv_bytes_per_token=cfg.engine.cost.kv_bytes_per_token)
    write_plan(plan, args.out)
    if args.previous:
        diff = diff_plans(read_plan(args.previous), plan)
        write_diff(diff, args.diff or str(Path(args.out).with_suffix(".diff.json")))


def cmd_build_semlib(args) -> None:
    cfg = _config(args)
    sc = cfg.semlib
    budget = args.budget if args.budget is not None else sc.budget
    emb, lsh = sc.emb, sc.lsh
    base = args.base_position if args.base_position is not None else cfg.workload.instruction_tokens
    lib = build_library(load_corpus(args.corpus), budget, emb, lsh, base_position=base,
                        kv_bytes_per_token=cfg.engine.cost.kv_bytes_per_token)
    write_library(lib, args.out)


def _recompute(cfg: AppConfig, args) -> RecomputePolicy:
    rp = cfg.engine.recompute
    if args.r is not None:
        rp = dataclasses.replace(rp, r_rev=args.r, r_item=args.r)
    if args.window is not None:
        rp = dataclasses.replace(rp, window=args.window)
    if args.match_threshold is not None:
        rp = dataclasses.replace(rp, match_threshold=args.match_threshold)
    return RecomputePolicy(**dataclasses.asdict(rp))


def cmd_simulate(args) -> None:
    cfg = _config(args)
    catalog = load_catalog(args.catalog)
    trace = load_trace(args.trace)
    plan = read_plan(args.plan) if args.plan else None
    lib = read_library(args.library) if args.library else None
    mode = EngineMode.parse(args.mode) if args.mode else cfg.engine.mode
    policy = cfg.scheduler
    if args.policy:
        policy = Policy.parse(args.policy, policy.alpha, policy.beta)
    if args.alpha is not None or args.beta is not None:
        policy = Policy.affinity(args.alpha if args.alpha is not None else policy.alpha,
                                 args.beta if args.beta is not None else policy.beta)
    n_nodes = args.nodes if plan is None else None
    if plan is None and n_nodes is None:
        n_nodes = cfg.placement.k
    rp = _recompute(cfg, args)
    routes = None
    if args.routes_from:
        by_id = {r.request_id: r.routed_node for r in read_run(args.routes_from)}
        missing = [q.request_id for q in trace.requests if q.request_id not in by_id]
        if missing:
            raise InvalidConfig(f"{len(missing)} requests have no replayed route (first: {missing[0]})")
        routes = [by_id[q.request_id] for q in trace.requests]
    records = simulate(trace, catalog, plan, lib, policy, cfg.engine.cost, mode, rp,
                       seed=cfg.seed, n_nodes=n_nodes,
                       remote_fetch=args.remote_fetch or cfg.engine.remote_fetch, routes=routes)
    write_run(records, args.out)
    if args.summary:
        s = summarize(records, footprint(plan) if plan is not None else None)
        _dump({"config": config_to_dict(dataclasses.replace(
                  cfg, scheduler=policy,
                  engine=dataclasses.replace(cfg.engine, mode=mode, recompute=rp))),
               "inputs": {"catalog": args.catalog, "trace": args.trace, "plan": args.plan,
                          "library": args.library},
               "summary": s.to_dict()}, args.summary)


def cmd_compare(args) -> None:
    c = compare(read_run(args.run), read_run(args.baseline))
    _dump(c.to_dict(), args.out)


def cmd_report(args) -> None:
    records = read_run(args.run)
    fp = footprint(read_plan(args.plan)) if args.plan else None
    baseline = read_run(args.baseline) if args.baseline else None
    report = {"summary": summarize(records, fp, baseline).to_dict(),
              "cdf": cdf(records, args.cdf_points).to_dict()}
    if args.library and args.trace:
        lib = read_library(args.library)
        report["library"] = {"n_prototypes": len(lib), "bytes": lib.bytes,
                             "match_rate": match_rate(load_trace(args.trace), lib,
                                                      threshold=args.match_threshold)}
    _dump(report, args.out)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="recprefill", description="Beyond-prefix KV reuse simulator")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="INI configuration file")
        sp.add_argument("--seed", type=int, help="override [run] seed")

    s = sub.add_parser("synth-trace", help="generate catalog, review corpus and trace")
    common(s)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--n-requests", type=int)
    s.add_argument("--qps", type=float)
    s.set_defaults(func=cmd_synth_trace)

    s = sub.add_parser("build-placement", help="partition the item catalog into shards")
    common(s)
    s.add_argument("--catalog", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--trace", help="historical trace for heat and co-occurrence")
    s.add_argument("--k", type=int)
    s.add_argument("--hot-fraction", type=float)
    s.add_argument("--previous", help="earlier plan to diff against")
    s.add_argument("--diff", help="diff output path (default: <out>.diff.json)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_placement)

    s = sub.add_parser("build-semlib", help="build the semantic history prototype library")
    common(s)
    s.add_argument("--corpus", required=True)
    s.add_argument("--budget", type=int)
    s.add_argument("--base-position", type=int,
                   help="prompt offset of the first history token (default: instruction length)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_semlib)

    s = sub.add_parser("simulate", help="run the serving simulation")
    common(s)
    s.add_argument("--catalog", required=True)
    s.add_argument("--trace", required=True)
    s.add_argument("--plan")
    s.add_argument("--library")
    s.add_argument("--nodes", type=int, help="node count when no plan is given")
    s.add_argument("--mode", help="rcllm | prefix_cache | full_recompute")
    s.add_argument("--policy", help="affinity[:a,b] | hit_only | load_only | least_loaded | round_robin")
    s.add_argument("--alpha", type=float)
    s.add_argument("--beta", type=float)
    s.add_argument("--r", type=float, help="recompute ratio for both items and history")
    s.add_argument("--window", type=int)
    s.add_argument("--match-threshold", type=float)
    s.add_argument("--remote-fetch", action="store_true")
    s.add_argument("--routes-from", help="replay the routing decisions of an earlier run")
    s.add_argument("--out", required=True)
    s.add_argument("--summary")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("compare", help="speedup table and dominance flag of two runs")
    s.add_argument("--run", required=True)
    s.add_argument("--baseline", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("report", help="summary, CDF and footprint report")
    s.add_argument("--run", required=True)
    s.add_argument("--baseline")
    s.add_argument("--plan")
    s.add_argument("--library")
    s.add_argument("--trace")
    s.add_argument("--match-threshold", type=float, default=0.95)
    s.add_argument("--cdf-points", type=int, default=100)
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required")
        args.func(args)
    except RecPrefillError as exc:
        code = 2 if isinstance(exc, (UsageError, InvalidConfig)) else 1
        sys.stderr.write(json.dumps({"error": exc.code, "message": str(exc)}, sort_keys=True) + "\n")
        return code
    except (OSError, ValueError, KeyError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)},
                                    sort_keys=True) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
