"""A short end-to-end run (well under a minute) on small in-memory slides.

Generates a 60-slide binary task (256 px slides, about 60 tiles each), trains
the decoupled model for a handful of epochs, compares it with the frozen
backbone references, and writes an attention heatmap for one positive bag.

    python3 demos/small_run.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from tapfm.baselines import frozen_features, train_frozen_baseline
from tapfm.export import attention_map, write_attention_csv, write_pgm
from tapfm.synth import DatasetSpec, SlideParams, TextureSpec, make_dataset
from tapfm.trainer import ModelState, TrainConfig, evaluate_bags, train
from tapfm.vit import ViTConfig

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

spec = DatasetSpec(n_train=40, n_val=10, n_test=10, slide=SlideParams(size=256),
                   textures=(TextureSpec(angle=30.0, period=4.0, amplitude=0.25),))
ds = make_dataset(spec, seed=0)
tr, va, te = ds.split("train"), ds.split("val"), ds.split("test")
print("counts:", ds.counts())

vit = ViTConfig()
cfg = TrainConfig(epochs=8, tiles_per_bag=20, lr_backbone=1e-4, lr_aggregator=1e-3)


def show(state, row, best):
    print(f"epoch {row['epoch']:2d}  loss {row['train_loss']:.4f}  val AUC {row['val_metric']:.3f}"
          + ("  (best)" if best else ""))


res = train(tr, va, cfg, vit, on_epoch=show)
test_report, _ = evaluate_bags(te, res.best_state)
print(f"best epoch {res.best_epoch}, test AUC {test_report.macro:.3f}")

# frozen references share the initial backbone weights
init = ModelState.create(vit, seed=cfg.seed)
f_tr, f_va = frozen_features(tr, init.backbone, vit), frozen_features(va, init.backbone, vit)
y_tr, y_va = ds.labels("train"), ds.labels("val")
for kind in ("abmil", "mean"):
    base = train_frozen_baseline(f_tr, y_tr, f_va, y_va, kind=kind, epochs=8, tiles_per_bag=20, lr=1e-3)
    print(f"frozen {kind:5s} best val AUC {base.best_metric:.3f} (epoch {base.best_epoch})")

pos = next(b for b in te if b.label[0] == 1)
amap = attention_map(pos, res.best_state)
on, off = amap.normalized[pos.signal >= 0].mean(), amap.normalized[pos.signal < 0].mean()
print(f"{pos.bag_id}: mean weight on signal tiles {on:.5f} vs elsewhere {off:.5f}")
write_attention_csv(out / f"{pos.bag_id}_attention.csv", amap)
write_pgm(out / f"{pos.bag_id}_attention.pgm", amap.image())
truth = np.zeros(amap.grid, dtype=np.uint8)
truth[pos.tile_coords[:, 0], pos.tile_coords[:, 1]] = np.where(pos.signal >= 0, 255, 60)
write_pgm(out / f"{pos.bag_id}_signal_mask.pgm", truth)
print("heatmaps written to", out)
