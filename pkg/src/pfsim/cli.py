"""Command line front end: ``pfsim run|grid|partition|report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from pfsim.bench import collect_results, export_results, run_grid
from pfsim.config import ConfigError, parse_config
from pfsim.data import export_clients, heterogeneity_report
from pfsim.runtime import run_experiment


def _slug(name: str) -> str:
    return name.replace("/", "_")


def cmd_run(args: argparse.Namespace) -> dict:
    cfg = parse_config(args.config)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    results = []
    for seed in seeds:
        stem = f"{_slug(cfg.strategy.method_name())}_seed{seed}"
        res = run_experiment(cfg, seed, event_log=out / f"{stem}.events.jsonl")
        (out / f"{stem}.result.json").write_text(res.to_json())
        results.append(res)
    table = export_results(results, out / f"results.{args.format}", args.format)
    return {
        "method": cfg.strategy.method_name(),
        "seeds": seeds,
        "table": str(table),
        "acc": [r.final.weighted_acc for r in results],
        "unseen_acc": [r.final.unseen_acc for r in results],
    }


def cmd_grid(args: argparse.Namespace) -> dict:
    cfg = parse_config(args.config)
    grid = yaml.safe_load(Path(args.gridfile).read_text()) or {}
    if not isinstance(grid, dict):
        raise ConfigError(["grid file must map dotted config keys to lists of values"])
    if args.seed is not None:
        cfg = cfg.with_overrides({"seeds": [args.seed]})
    out = Path(args.out or cfg.output_dir)
    summary = run_grid(cfg, grid, out, args.format)
    failed = sum(r["status"] != "ok" for r in summary.runs)
    return {"runs": len(summary.runs), "failed": failed, "best": summary.best, "out": str(out)}


def cmd_partition(args: argparse.Namespace) -> dict:
    cfg = parse_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    clients = cfg.build_clients(seed)
    out = Path(args.out or Path(cfg.output_dir) / "dataset")
    export_clients(clients, out, {"config_hash": cfg.hash(), "seed": seed})
    report = heterogeneity_report(clients, n_classes=cfg.model.n_classes)
    (out / "heterogeneity.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    return {
        "out": str(out),
        "n_clients": len(clients),
        "n_unseen": sum(not c.participates for c in clients),
        "mean_size": report.mean_size,
        "std_size": report.std_size,
        "js_mean": report.js_mean,
    }


def cmd_report(args: argparse.Namespace) -> dict:
    results = collect_results(args.dir)
    if not results:
        raise FileNotFoundError(f"no *.result.json files under {args.dir}")
    out = Path(args.out or args.dir) / f"report.{args.format}"
    export_results(results, out, args.format)
    return {"results": len(results), "table": str(out)}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pfsim", description="Personalized federated learning simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--seed", type=int, default=None, help="run a single seed instead of the config's list")
        sp.add_argument("--out", default=None, help="output directory (defaults to output_dir)")
        sp.add_argument("--format", choices=("csv", "json"), default="csv")

    sp = sub.add_parser("run", help="run one experiment config")
    sp.add_argument("config")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("grid", help="sweep a grid of settings")
    sp.add_argument("config")
    sp.add_argument("gridfile")
    common(sp)
    sp.set_defaults(func=cmd_grid)

    sp = sub.add_parser("partition", help="materialize the dataset and its heterogeneity report")
    sp.add_argument("config")
    common(sp)
    sp.set_defaults(func=cmd_partition)

    sp = sub.add_parser("report", help="re-aggregate saved results")
    sp.add_argument("dir")
    common(sp)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        payload = args.func(args)
    except ConfigError as exc:
        json.dump({"error": "ConfigError", "message": "invalid configuration", "violations": exc.violations}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    except Exception as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    json.dump(payload, sys.stdout, sort_keys=True)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
