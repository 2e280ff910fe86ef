"""Frozen-backbone references: ABMIL and mean pooling on cached features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import aggregator as agg
from .autograd import Graph, Value
from .metrics import macro_auc
from .synth import TileBag, bag_rng, sample_bag_tiles
from .trainer import AdamW, loss_weights, warm_restart_factor
from .vit import ViTConfig, extract_features


@dataclass
class BaselineResult:
    best_metric: float
    best_epoch: int
    history: list[dict]
    params: dict[str, Value]


def frozen_features(bags: list[TileBag], backbone: dict[str, Value], vit: ViTConfig) -> list[np.ndarray]:
    """Features of every tile in every bag under fixed backbone weights."""
    return [extract_features(np.asarray(b.tiles), backbone, vit)[0] for b in bags]


def _predict(feats: np.ndarray, params: dict[str, Value], kind: str, gated: bool = False) -> np.ndarray:
    if kind == "abmil":
        return agg.abmil_baseline(feats, params, gated=gated).probs
    return agg.mean_pool_baseline(feats, params).probs


def train_frozen_baseline(train_feats: list[np.ndarray], train_labels, val_feats: list[np.ndarray], val_labels,
                          kind: str = "abmil", epochs: int = 20, tiles_per_bag: int = 50, lr: float = 1e-3,
                          weight_decay: float = 1e-4, seed: int = 0, task: str = "binary",
                          t0: int = 10, t_mult: int = 2, hidden: int = 32, gated: bool = False) -> BaselineResult:
    """Train an attention (``abmil``) or mean-pool (``mean``) head on fixed features.

    Same sampling, optimizer and schedule as the main loop; validation uses
    all tiles and the best epoch by (macro-)AUC is kept.
    """
    if kind not in ("abmil", "mean"):
        raise ValueError(f"unknown baseline {kind!r}")
    train_labels = np.asarray(train_labels).reshape(len(train_feats), -1)
    val_labels = np.asarray(val_labels).reshape(len(val_feats), -1)
    n_out = train_labels.shape[1]
    D = train_feats[0].shape[1]
    dtype = train_feats[0].dtype
    if kind == "abmil":
        params = agg.init_abmil(D, hidden=hidden, n_out=n_out, seed=seed, dtype=dtype)
    else:
        params = agg.init_aggregator(D, n_out, dtype=dtype)
    opt = AdamW(params, lr, weight_decay)
    cw, alpha = loss_weights(train_labels, task)

    history, best_metric, best_epoch, best = [], -np.inf, -1, None
    for epoch in range(epochs):
        factor = warm_restart_factor(epoch, t0, t_mult)
        order = np.random.default_rng([seed, epoch, 0]).permutation(len(train_feats))
        total = 0.0
        for i in order:
            feats = train_feats[i]
            idx = sample_bag_tiles(len(feats), tiles_per_bag, bag_rng(seed, epoch, int(i), 1))
            g = Graph()
            z = feats[idx]
            if kind == "abmil":
                _, _, probs = agg.abmil_forward(z, params, g, gated=gated)
            else:
                probs = agg.classify_bag(g.mean(z, axis=0), params, g)
            loss, _ = agg.aggregator_loss(probs, train_labels[i], cw, task, alpha, graph=g)
            opt.zero_grad()
            g.backward(loss)
            opt.step(factor)
            total += float(loss.data)
        probs = np.array([_predict(f, params, kind, gated) for f in val_feats]).reshape(len(val_feats), -1)
        metric = macro_auc(probs, val_labels).macro
        history.append({"epoch": epoch + 1, "train_loss": total / len(order), "val_metric": metric})
        if metric > best_metric:
            best_metric, best_epoch = metric, epoch + 1
            best = {k: Value(v.data.copy(), requires_grad=True, name=k) for k, v in params.items()}
    return BaselineResult(float(best_metric), best_epoch, history, best)
