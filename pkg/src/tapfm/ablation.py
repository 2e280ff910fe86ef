"""Hyperparameter sweeps with log-linear convergence fits, plus the update-stability report."""

from __future__ import annotations

import csv
import json
import math
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .metrics import FitRecord, fit_log_linear
from .synth import TileBag
from .trainer import TrainConfig, train
from .vit import ViTConfig

SWEEPS = {"lambda": "lam", "tiles": "tiles_per_bag", "mode": "mode"}
DEFAULT_VALUES = {"lambda": [0.25, 0.5, 0.75, 1.0], "tiles": [25, 50, 75], "mode": ["decoupled", "joint"]}


@dataclass
class SweepRun:
    value: object
    history: list[dict] = field(default_factory=list)
    fit: FitRecord | None = None
    best_metric: float = float("nan")
    best_epoch: int = -1
    error: str | None = None


@dataclass
class SweepResult:
    kind: str
    runs: list[SweepRun]

    def summary_rows(self) -> list[dict]:
        rows = []
        for r in self.runs:
            f = r.fit
            rows.append({
                "value": r.value,
                "a": f.a if f else float("nan"),
                "b": f.b if f else float("nan"),
                "r2": f.r2 if f else float("nan"),
                "best_val_auc": r.best_metric,
                "best_epoch": r.best_epoch,
                "error": r.error or "",
            })
        return rows

    def stability_rows(self) -> list[dict]:
        """Mean cosine between successive backbone updates, per mode."""
        rows = []
        for r in self.runs:
            per_epoch = [h["mean_update_cosine"] for h in r.history if math.isfinite(h["mean_update_cosine"])]
            rows.append({
                "mode": r.value,
                "mean_update_cosine": float(np.mean(per_epoch)) if per_epoch else float("nan"),
                "min_epoch_cosine": float(np.min(per_epoch)) if per_epoch else float("nan"),
                "epochs": len(per_epoch),
            })
        return rows


def parse_values(kind: str, values) -> list:
    if kind not in SWEEPS:
        raise ValueError(f"unknown sweep {kind!r}; choose from {sorted(SWEEPS)}")
    values = list(values) if values else list(DEFAULT_VALUES[kind])
    if not values:
        raise ValueError("sweep needs at least one value")
    if kind == "lambda":
        return [float(v) for v in values]
    if kind == "tiles":
        return [int(v) for v in values]
    return [str(v) for v in values]


def run_sweep(kind: str, values, train_bags: list[TileBag], val_bags: list[TileBag], cfg: TrainConfig,
              vit: ViTConfig, k0: int = 2, k1: int = 20, on_epoch: Callable | None = None) -> SweepResult:
    """One training run per value with everything else (seed included) shared.

    A failing sub-run is recorded with its error and the sweep moves on.
    """
    values = parse_values(kind, values)
    runs = []
    for v in values:
        run = SweepRun(value=v)
        try:
            sub = replace(cfg, **{SWEEPS[kind]: v})
            cb = None if on_epoch is None else (lambda st, row, best, v=v: on_epoch(v, row))
            res = train(train_bags, val_bags, sub, vit, on_epoch=cb)
            run.history = res.history
            run.best_metric, run.best_epoch = res.best_metric, res.best_epoch
            losses = np.array([h["train_loss"] for h in res.history])
            if len(losses) > k0:
                run.fit = fit_log_linear(losses, k0=k0, k1=k1)
        except Exception as exc:  # noqa: BLE001 - recorded, sweep continues
            run.error = f"{type(exc).__name__}: {exc}"
            run.history = run.history or []
            traceback.print_exc()
        runs.append(run)
    return SweepResult(kind, runs)


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def write_sweep(result: SweepResult, out_dir) -> Path:
    """summary.csv, fits.json, one curve CSV per run, and stability.csv for mode sweeps."""
    out = Path(out_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    _write_csv(out / "summary.csv", result.summary_rows())
    fits = {str(r.value): (r.fit.to_dict() if r.fit else None) for r in result.runs}
    (out / "fits.json").write_text(json.dumps({"sweep": result.kind, "fits": fits}, indent=2, sort_keys=True))
    for r in result.runs:
        rows = [{"epoch": h["epoch"], "train_loss": h["train_loss"], "val_metric": h["val_metric"],
                 "mean_update_cosine": h["mean_update_cosine"]} for h in r.history]
        _write_csv(out / "curves" / f"{result.kind}_{r.value}.csv", rows)
    if result.kind == "mode":
        _write_csv(out / "stability.csv", result.stability_rows())
    return out
