"""Command line: gen-data, train, eval, ablate, export-attention.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import ablation
from .autograd import NonFiniteError
from .checkpoint import CheckpointError, load_state, save_state
from .config import ConfigError, RunConfig, dump_config, load_config
from .export import attention_map, write_attention_csv, write_pgm
from .synth import DataError, Dataset, TileBag, load_dataset, make_dataset, read_bag_file
from .trainer import StepDiagnostics, TrainConfig, evaluate_bags, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


class NumericalError(RuntimeError):
    pass


# ------------------------------------------------------------------ helpers


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _prepare_dir(path: Path, force: bool, what: str) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"{what} {path} exists and is not empty (pass --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    return cfg


def _dataset(cfg: RunConfig, override: str | None) -> Dataset:
    return load_dataset(override or cfg.data.root)


def check_compatible(cfg: RunConfig, ds: Dataset) -> None:
    """Reject configs whose tile geometry or task disagrees with the dataset."""
    if ds.tile_size != cfg.vit.tile_size or ds.channels != cfg.vit.channels:
        raise ConfigError(f"dataset tiles are {ds.tile_size}px x {ds.channels} channels but the model "
                          f"expects {cfg.vit.tile_size}px x {cfg.vit.channels}")
    if ds.task != cfg.task.kind:
        raise ConfigError(f"dataset task is {ds.task!r} but config task is {cfg.task.kind!r}")


def _comparable(tc: TrainConfig) -> TrainConfig:
    return dataclasses.replace(tc, epochs=1, class_weights=None, alpha=None)


def metrics_columns(class_names: list[str]) -> list[str]:
    return (["epoch", "lr_factor", "train_loss", "train_L_feature", "train_L_attention", "train_L_reg",
             "train_L_PFM", "skipped_steps", "mean_update_cosine", "drift_backbone", "drift_aggregator",
             "val_metric"] + [f"val_auc_{c}" for c in class_names] + ["best"])


def _metrics_row(row: dict, class_names: list[str]) -> list[str]:
    out = [_fmt(row[c]) for c in metrics_columns(class_names)[:12]]
    out += [_fmt(v) if v is not None else "" for v in row["val_auc"]]
    out.append(_fmt(bool(row["best"])))
    return out


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    out = Path(args.out or cfg.data.root)
    _prepare_dir(out, args.force, "output directory")
    seed = args.seed if args.seed is not None else 0
    ds = make_dataset(cfg.dataset_spec(), seed=seed, out_dir=out, force=True,
                      progress=lambda i, n: print(f"\rslides {i}/{n}", end="", file=sys.stderr))
    print(file=sys.stderr)
    counts = ds.counts()
    for split, c in counts.items():
        pos = ", ".join(f"{k}={v}" for k, v in c["positives"].items())
        print(f"{split}: {c['bags']} bags; positives {pos}; 2x magnification {c['magnification_2x']}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    if args.mode:
        cfg.train = dataclasses.replace(cfg.train, mode=args.mode)
    ds = _dataset(cfg, args.data)
    check_compatible(cfg, ds)
    run_dir = Path(args.out or cfg.output.run_dir)
    ckpt_dir = run_dir / "checkpoints"
    names = ds.class_names

    state, history = None, []
    if args.resume:
        last = ckpt_dir / "last.ckpt"
        if not last.exists():
            raise ConfigError(f"nothing to resume: {last} not found")
        state, saved, meta = load_state(last)
        history = meta.get("history", [])
        saved_train = TrainConfig(**saved["train"]) if saved.get("train") else None
        # the epoch budget may be extended on resume; everything else must match
        if saved_train is not None and _comparable(saved_train) != _comparable(cfg.train):
            raise ConfigError("training config differs from the checkpoint being resumed")
    else:
        _prepare_dir(run_dir, args.force, "run directory")
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, run_dir / "config.json")

    metrics_path, steps_path = run_dir / "metrics.csv", run_dir / "steps.csv"
    with open(metrics_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(metrics_columns(names))
        for row in history:
            w.writerow(_metrics_row(row, names))
    if not args.resume and cfg.output.log_steps:
        with open(steps_path, "w", newline="") as fh:
            csv.writer(fh).writerow(["epoch", "step", *StepDiagnostics.COLUMNS])
    steps_fh = open(steps_path, "a", newline="") if cfg.output.log_steps else None
    steps_w = csv.writer(steps_fh) if steps_fh else None

    def on_step(st, diag):
        if steps_w is not None:
            steps_w.writerow([st.epoch + 1, st.step, *(_fmt(v) for v in diag.row())])

    def on_epoch(st, row, is_best):
        history.append(row)
        with open(metrics_path, "a", newline="") as fh:
            csv.writer(fh).writerow(_metrics_row(row, names))
        meta = {"history": history}
        save_state(ckpt_dir / "last.ckpt", st, cfg.train, meta)
        if is_best:
            save_state(ckpt_dir / "best.ckpt", st, cfg.train, meta)
        if row["skipped_steps"] and row["skipped_steps"] >= len(train_bags):
            raise NumericalError(f"every step of epoch {row['epoch']} produced non-finite values")
        print(f"epoch {row['epoch']:3d}  loss {row['train_loss']:.4f}  val {row['val_metric']:.4f}"
              + ("  *" if is_best else ""), file=sys.stderr)

    train_bags, val_bags = ds.split("train"), ds.split("val")
    try:
        res = train(train_bags, val_bags, cfg.train, cfg.vit, state=state, on_epoch=on_epoch,
                    on_step=on_step, history=list(history))
    finally:
        if steps_fh:
            steps_fh.close()
    summary = {"best_epoch": res.best_epoch, "best_val_metric": res.best_metric, "epochs": len(res.history)}
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_eval(args) -> int:
    state, saved, _ = load_state(args.checkpoint)
    cfg = _load_run_config(args) if args.config else None
    ds = load_dataset(args.data) if args.data else _dataset(cfg or RunConfig(), None)
    if ds.tile_size != state.vit.tile_size or ds.channels != state.vit.channels:
        raise ConfigError("checkpoint tile geometry does not match the dataset")
    if state.n_out != len(ds.class_names):
        raise ConfigError(f"checkpoint predicts {state.n_out} classes but the dataset has "
                          f"{len(ds.class_names)} ({ds.task})")
    bags = ds.split(args.split)
    report, probs = evaluate_bags(bags, state)
    out = Path(args.out or Path(args.checkpoint).resolve().parent.parent / "eval")
    out.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict()
    doc.update({"split": args.split, "classes": ds.class_names, "bags": len(bags)})
    (out / f"{args.split}_report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    with open(out / f"{args.split}_report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "auc", "positives", "negatives"])
        for name, auc, c in zip(ds.class_names, report.per_class, report.counts):
            w.writerow([name, "" if auc is None else repr(auc), c["positives"], c["negatives"]])
        w.writerow(["macro", repr(report.macro), "", ""])
    with open(out / f"{args.split}_predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bag_id", *[f"prob_{c}" for c in ds.class_names], *[f"label_{c}" for c in ds.class_names]])
        for bag, p in zip(bags, probs):
            w.writerow([bag.bag_id, *(repr(float(v)) for v in p), *(int(v) for v in np.atleast_1d(bag.label))])
    print(f"{args.split}: macro AUC {report.macro:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    ds = _dataset(cfg, args.data)
    check_compatible(cfg, ds)
    try:
        values = ablation.parse_values(args.sweep, args.values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out or Path(cfg.output.run_dir) / f"ablate_{args.sweep}")
    _prepare_dir(out, args.force, "sweep directory")

    def progress(v, row):
        print(f"{args.sweep}={v} epoch {row['epoch']} loss {row['train_loss']:.4f} val {row['val_metric']:.4f}",
              file=sys.stderr)

    result = ablation.run_sweep(args.sweep, values, ds.split("train"), ds.split("val"), cfg.train, cfg.vit,
                                on_epoch=progress)
    ablation.write_sweep(result, out)
    for row in result.summary_rows():
        print(json.dumps(row))
    return EXIT_OK


def _bag_from_file(path: Path) -> TileBag:
    """Bag file plus, when the surrounding dataset manifest lists it, its tile grid."""
    tiles = read_bag_file(path)
    bag = TileBag(bag_id=path.stem, tiles=tiles, label=np.zeros(1, dtype=np.int64),
                  tile_coords=np.zeros((0, 2), dtype=np.int64))
    manifest = path.resolve().parent.parent / "manifest.json"
    if manifest.exists():
        try:
            ds = load_dataset(manifest.parent)
        except (DataError, ValueError, KeyError):
            return bag
        for i, rec in enumerate(ds.records):
            if (manifest.parent / rec.path).resolve() == path.resolve():
                found = ds.bag(i)
                return found if found.grid is not None and len(found.tile_coords) == found.K else bag
    return bag


def cmd_export_attention(args) -> int:
    state, _, _ = load_state(args.checkpoint)
    bag = _bag_from_file(Path(args.bag))
    if bag.tiles.shape[1] != state.vit.tile_size or bag.tiles.shape[3] != state.vit.channels:
        raise ConfigError("bag tile geometry does not match the checkpoint")
    amap = attention_map(bag, state)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_attention_csv(out / f"{bag.bag_id}_attention.csv", amap)
    if amap.grid is None:
        print("warning: no tile grid for this bag; wrote CSV only", file=sys.stderr)
    else:
        write_pgm(out / f"{bag.bag_id}_attention.pgm", amap.image())
    print(f"{bag.bag_id}: {len(amap.raw)} tiles exported to {out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (strict schema)")
    common.add_argument("--seed", type=int, help="override the seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    p = argparse.ArgumentParser(prog="tapfm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--mode", choices=["decoupled", "joint"])
    t.add_argument("--resume", action="store_true", help="continue from checkpoints/last.ckpt")
    t.add_argument("--data", help="dataset directory (default: data.root from the config)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="full-bag evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--data", help="dataset directory")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="hyperparameter sweep")
    a.add_argument("--sweep", required=True, choices=sorted(ablation.SWEEPS))
    a.add_argument("--values", nargs="+", help="sweep values (default grid per sweep)")
    a.add_argument("--data", help="dataset directory")
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export-attention", parents=[common], help="attention CSV and PGM for one bag")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--bag", required=True, help="bag file (.tpfm)")
    x.set_defaults(func=cmd_export_attention)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
