"""Grid sweeps and result tables."""

from __future__ import annotations

import csv
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from pfsim.config import ConfigError, ExperimentConfig
from pfsim.runtime import RunResult, run_experiment

logger = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "acc",
    "unseen_acc",
    "delta",
    "uniform_acc",
    "std",
    "bottom_decile",
    "val_acc",
    "total_flops",
    "comm_bytes",
    "convergence_round",
)
RESULT_COLUMNS = ("method", "dataset", "n_seeds", *METRIC_COLUMNS)
RUN_COLUMNS = ("setting", "overrides", "config_hash", "seed", "method", "dataset", "status", "error", *METRIC_COLUMNS)


def _run_metrics(d: Mapping[str, Any]) -> dict[str, Any]:
    """Flat metric record from a ``RunResult.to_dict()`` mapping."""
    final = d["final"]
    return {
        "acc": final["weighted_acc"],
        "unseen_acc": final["unseen_acc"],
        "delta": final["gap"],
        "uniform_acc": final["uniform_acc"],
        "std": final["std"],
        "bottom_decile": final["bottom_decile"],
        "val_acc": d["final_val_acc"],
        "total_flops": d["total_flops"],
        "comm_bytes": d["comm_bytes"],
        "convergence_round": d["convergence_round"],
    }


def _mean(values: Sequence[Any]) -> float | None:
    if not values or any(v is None for v in values):
        return None
    return float(np.mean(np.asarray(values, dtype=np.float64)))


def aggregate_rows(records: Iterable[Mapping[str, Any]]) -> list[dict[str, Any]]:
    """One row per (method, dataset) holding seed means.

    ``delta`` is recomputed from the averaged columns so it always equals
    ``unseen_acc - acc`` in the output.
    """
    groups: dict[tuple[str, str], list[Mapping[str, Any]]] = {}
    for r in records:
        groups.setdefault((r["method"], r["dataset"]), []).append(r)
    rows = []
    for (method, dataset), rs in sorted(groups.items()):
        row: dict[str, Any] = {"method": method, "dataset": dataset, "n_seeds": len(rs)}
        for col in METRIC_COLUMNS:
            if col != "delta":
                row[col] = _mean([r[col] for r in rs])
        row["delta"] = None if row["unseen_acc"] is None else row["unseen_acc"] - row["acc"]
        rows.append(row)
    return rows


def result_record(result: RunResult | Mapping[str, Any]) -> dict[str, Any]:
    d = result.to_dict() if isinstance(result, RunResult) else result
    meta = d.get("meta", {})
    return {"method": d["method"], "dataset": meta.get("dataset", ""), **_run_metrics(d)}


def _write_table(rows: Sequence[Mapping[str, Any]], columns: Sequence[str], path: Path, fmt: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        path.write_text(json.dumps([{c: r.get(c) for c in columns} for r in rows], indent=1, sort_keys=True))
    elif fmt == "csv":
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            for r in rows:
                # str(float) is the shortest repr, so values round-trip exactly
                w.writerow({c: "" if r.get(c) is None else r.get(c) for c in columns})
    else:
        raise ValueError(f"unknown format {fmt!r} (csv or json)")
    return path


def export_results(
    results: Sequence[RunResult | Mapping[str, Any]], out_path: str | Path, fmt: str = "csv"
) -> Path:
    """Write one seed-averaged row per (method, dataset)."""
    if not results:
        raise ValueError("no results to export")
    rows = aggregate_rows(result_record(r) for r in results)
    return _write_table(rows, RESULT_COLUMNS, Path(out_path), fmt)


def read_table(path: str | Path) -> list[dict[str, Any]]:
    """Parse a table written by :func:`export_results` back into typed rows."""
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text())
    out = []
    with path.open(newline="") as fh:
        for row in csv.DictReader(fh):
            parsed: dict[str, Any] = {}
            for k, v in row.items():
                if k in ("method", "dataset", "overrides", "config_hash", "status", "error", "setting"):
                    parsed[k] = v
                elif v == "":
                    parsed[k] = None
                else:
                    parsed[k] = float(v) if any(ch in v for ch in ".eEn") else int(v)
            out.append(parsed)
    return out


# ---------------------------------------------------------------------------
# grid search


@dataclass
class GridSummary:
    runs: list[dict[str, Any]]
    summary: list[dict[str, Any]]
    best: dict[str, str]  # method -> setting id
    results: list[RunResult] = field(default_factory=list, repr=False)


def expand_grid(grid: Mapping[str, Sequence[Any]]) -> list[dict[str, Any]]:
    """Cartesian product in sorted-key order; an empty grid yields one empty setting."""
    keys = sorted(grid)
    for k in keys:
        if isinstance(grid[k], (str, bytes)) or not isinstance(grid[k], Sequence):
            raise ConfigError([f"grid.{k}: expected a list of values"])
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def run_grid(
    base: ExperimentConfig,
    grid: Mapping[str, Sequence[Any]],
    out_dir: str | Path | None = None,
    fmt: str = "csv",
) -> GridSummary:
    """Run every grid setting for every seed and pick each method's best setting.

    Selection uses the seed-mean validation accuracy; ties keep the setting
    that comes first in grid order. A failing run is logged and skipped.
    """
    settings = expand_grid(grid)
    runs: list[dict[str, Any]] = []
    results: list[RunResult] = []
    configs = []
    for i, overrides in enumerate(settings):
        sid = f"s{i:03d}"
        try:
            cfg = base.with_overrides(overrides)
        except ConfigError as exc:
            for seed in base.seeds:
                runs.append(_failed_row(sid, overrides, "", seed, base, "; ".join(exc.violations)))
            continue
        configs.append((sid, overrides, cfg))
        for seed in cfg.seeds:
            row = {
                "setting": sid,
                "overrides": json.dumps(overrides, sort_keys=True),
                "config_hash": cfg.hash(),
                "seed": seed,
                "method": cfg.strategy.method_name(),
                "dataset": cfg.dataset_name(),
            }
            try:
                res = run_experiment(cfg, seed)
            except Exception as exc:  # recorded, the grid goes on
                logger.warning("grid run %s seed %s failed: %s", sid, seed, exc)
                runs.append({**row, "status": "error", "error": f"{type(exc).__name__}: {exc}"})
                continue
            results.append(res)
            runs.append({**row, "status": "ok", "error": "", **_run_metrics(res.to_dict())})

    # best setting per method by mean validation accuracy over successful seeds
    best: dict[str, str] = {}
    best_score: dict[str, float] = {}
    for sid, _, cfg in configs:
        method = cfg.strategy.method_name()
        vals = [r["val_acc"] for r in runs if r["setting"] == sid and r["status"] == "ok"]
        if not vals:
            continue
        score = float(np.mean(vals))
        if method not in best or score > best_score[method]:
            best[method], best_score[method] = sid, score
    chosen = [r for r in runs if r["status"] == "ok" and best.get(r["method"]) == r["setting"]]
    summary = aggregate_rows(chosen)
    for row in summary:
        row["setting"] = best[row["method"]]

    if out_dir is not None:
        out = Path(out_dir)
        _write_table(runs, RUN_COLUMNS, out / f"runs.{fmt}", fmt)
        _write_table(summary, ("setting", *RESULT_COLUMNS), out / f"summary.{fmt}", fmt)
    return GridSummary(runs, summary, best, results)


def _failed_row(sid, overrides, chash, seed, cfg, msg) -> dict[str, Any]:
    return {
        "setting": sid,
        "overrides": json.dumps(overrides, sort_keys=True),
        "config_hash": chash,
        "seed": seed,
        "method": cfg.strategy.method_name(),
        "dataset": cfg.dataset_name(),
        "status": "error",
        "error": msg,
    }


def collect_results(run_dir: str | Path) -> list[dict[str, Any]]:
    """Load every ``*.result.json`` below ``run_dir``, in path order."""
    paths = sorted(Path(run_dir).rglob("*.result.json"))
    return [json.loads(p.read_text()) for p in paths]
