"""ROC-AUC, macro-AUC, log-linear convergence fits and least-squares helpers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


@dataclass
class FitRecord:
    a: float
    b: float
    r2: float
    n: int
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "r2": self.r2, "n": self.n, "degenerate": self.degenerate}


@dataclass
class MetricReport:
    per_class: list[float | None]
    macro: float
    counts: list[dict]
    epoch: int | None = None
    excluded: list[int] = field(default_factory=list)
    fits: dict[str, FitRecord] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_class": self.per_class,
            "macro": self.macro,
            "counts": self.counts,
            "epoch": self.epoch,
            "excluded": self.excluded,
            "fits": {k: v.to_dict() for k, v in self.fits.items()},
        }


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with midranks for ties (ties count one half)."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: labels contain a single class")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pairwise_auc(scores, labels) -> float:
    """O(M^2) reference: enumerate every (positive, negative) pair."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    pos, neg = scores[labels == 1], scores[labels != 1]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC undefined: labels contain a single class")
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (pos.size * neg.size)


def macro_auc(scores, labels, epoch: int | None = None) -> MetricReport:
    """Unweighted mean of per-class AUCs. Classes lacking either label are excluded."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels.reshape(-1, 1)
    per_class: list[float | None] = []
    counts, excluded = [], []
    for j in range(scores.shape[1]):
        n_pos = int((labels[:, j] == 1).sum())
        counts.append({"positives": n_pos, "negatives": int(labels.shape[0] - n_pos)})
        try:
            per_class.append(roc_auc(scores[:, j], labels[:, j]))
        except ValueError:
            per_class.append(None)
            excluded.append(j)
    valid = [v for v in per_class if v is not None]
    macro = float(np.mean(valid)) if valid else float("nan")
    return MetricReport(per_class=per_class, macro=macro, counts=counts, epoch=epoch, excluded=excluded)


def linear_fit(x, y) -> FitRecord:
    """Ordinary least squares ``y = a + b x`` with R^2 (0 and flagged when y is constant)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or x.shape != y.shape:
        raise ValueError("need at least two paired points")
    A = np.stack([np.ones_like(x), x], axis=1)
    (a, b), *_ = np.linalg.lstsq(A, y, rcond=None)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return FitRecord(float(y.mean()), 0.0, 0.0, int(x.size), degenerate=True)
    ss_res = float(((y - (a + b * x)) ** 2).sum())
    return FitRecord(float(a), float(b), 1.0 - ss_res / ss_tot, int(x.size))


def fit_log_linear(losses, epochs=None, k0: int = 2, k1: int = 20) -> FitRecord:
    """Fit ``log L_k = a + b k`` over epochs ``k0 <= k <= k1``.

    ``epochs`` defaults to 1, 2, ... (one-based, matching loss-curve indexing).
    """
    losses = np.asarray(losses, dtype=np.float64)
    epochs = np.arange(1, losses.size + 1) if epochs is None else np.asarray(epochs)
    if k1 <= k0:
        raise ValueError("k1 must exceed k0")
    sel = (epochs >= k0) & (epochs <= k1)
    L, k = losses[sel], epochs[sel].astype(np.float64)
    if np.any(L <= 0) or not np.all(np.isfinite(L)):
        raise ValueError("log-linear fit needs strictly positive finite losses")
    return linear_fit(k, np.log(L))
