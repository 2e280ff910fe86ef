"""Two-stage training with detached gradients, plus the joint baseline.

One step of :func:`tapfm_step`:

1. backbone forward on its own graph → features ``Z`` and raw CLS scores ``a``
2. detach both; normalize the scores, pool, classify, weighted BCE
3. backward on the aggregator graph, update ``W, b`` (stage 1)
4. snapshot ``dL/dz_i``, ``dL/da_i`` and ``dL/dZ_bag`` as constants
5. build the task adaptation loss on the backbone graph, backward, update
   the backbone (stage 2)
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from . import aggregator as agg
from .autograd import Graph, GraphError, ShapeError, Value, detach
from .metrics import macro_auc
from .synth import TileBag, augment_bag, bag_rng, sample_bag_tiles
from .vit import ViTConfig, cls_attention_scores, extract_features, forward_tiles, init_params

MODES = ("decoupled", "joint")
TASKS = ("binary", "multilabel")
ZERO_NORM = 1e-12


@dataclass
class TrainConfig:
    lam: float = 1.0
    beta: float = 0.0
    lr_backbone: float = 1e-6
    lr_aggregator: float = 1e-5
    weight_decay: float = 1e-4
    epochs: int = 20
    tiles_per_bag: int = 50
    t0: int = 10
    t_mult: int = 2
    seed: int = 0
    mode: str = "decoupled"
    task: str = "binary"
    augment: bool = True
    verify: bool = False
    class_weights: list | None = None
    alpha: list | None = None

    def __post_init__(self):
        if self.lam < 0 or self.beta < 0:
            raise ValueError("lam and beta must be non-negative")
        if self.lr_backbone <= 0 or self.lr_aggregator <= 0:
            raise ValueError("learning rates must be positive")
        if self.tiles_per_bag < 1:
            raise ValueError("tiles_per_bag must be at least 1")
        if self.t0 < 1 or self.t_mult < 1:
            raise ValueError("scheduler needs t0 >= 1 and t_mult >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")

    def to_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------- optimizer


def warm_restart_factor(epoch: float, t0: int = 10, t_mult: int = 2) -> float:
    """Cosine annealing with warm restarts: ``0.5 (1 + cos(pi t_cur / T_i))``.

    The first period lasts ``t0`` epochs; every following one is ``t_mult``
    times longer than the last.
    """
    t_cur, period = float(epoch), float(t0)
    while t_cur >= period:
        t_cur -= period
        period *= t_mult
    return 0.5 * (1.0 + math.cos(math.pi * t_cur / period))


class AdamW:
    """Adam with decoupled weight decay over a dict of leaf Values."""

    def __init__(self, params: dict[str, Value], lr: float, weight_decay: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads_finite(self) -> bool:
        return all(p.grad is None or np.all(np.isfinite(p.grad)) for p in self.params.values())

    def step(self, lr_factor: float = 1.0) -> bool:
        """Apply one update. Returns False (and changes nothing) on non-finite grads."""
        if not self.grads_finite():
            return False
        self.t += 1
        lr = self.lr * lr_factor
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)
        return True

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k][...] = arrays[f"m/{k}"]
            self.v[k][...] = arrays[f"v/{k}"]
        self.t = t


# --------------------------------------------------------------------- state


@dataclass
class ModelState:
    vit: ViTConfig
    backbone: dict[str, Value]
    aggregator: dict[str, Value]
    opt_backbone: AdamW
    opt_aggregator: AdamW
    init_backbone: dict[str, np.ndarray]
    init_aggregator: dict[str, np.ndarray]
    epoch: int = 0
    step: int = 0
    prev_update: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def create(cls, vit: ViTConfig, n_out: int = 1, seed: int = 0, cfg: TrainConfig | None = None,
               dtype=np.float32) -> "ModelState":
        cfg = cfg or TrainConfig()
        backbone = init_params(vit, seed=seed, dtype=dtype)
        head = agg.init_aggregator(vit.embed_dim, n_out, dtype=dtype)
        return cls(
            vit=vit,
            backbone=backbone,
            aggregator=head,
            opt_backbone=AdamW(backbone, cfg.lr_backbone, cfg.weight_decay),
            opt_aggregator=AdamW(head, cfg.lr_aggregator, cfg.weight_decay),
            init_backbone={k: v.data.copy() for k, v in backbone.items()},
            init_aggregator={k: v.data.copy() for k, v in head.items()},
        )

    @property
    def n_out(self) -> int:
        return self.aggregator["W"].shape[0]

    def snapshot(self) -> dict:
        """Deep copy of parameters and optimizer moments (for rollback)."""
        return {
            "backbone": {k: v.data.copy() for k, v in self.backbone.items()},
            "aggregator": {k: v.data.copy() for k, v in self.aggregator.items()},
            "opt_b": (copy.deepcopy(self.opt_backbone.m), copy.deepcopy(self.opt_backbone.v), self.opt_backbone.t),
            "opt_a": (copy.deepcopy(self.opt_aggregator.m), copy.deepcopy(self.opt_aggregator.v), self.opt_aggregator.t),
            "prev_update": None if self.prev_update is None else self.prev_update.copy(),
        }

    def restore(self, snap: dict) -> None:
        for k, v in self.backbone.items():
            v.data[...] = snap["backbone"][k]
        for k, v in self.aggregator.items():
            v.data[...] = snap["aggregator"][k]
        for opt, key in ((self.opt_backbone, "opt_b"), (self.opt_aggregator, "opt_a")):
            m, v, t = snap[key]
            opt.m, opt.v, opt.t = copy.deepcopy(m), copy.deepcopy(v), t
        self.prev_update = snap["prev_update"]

    def drift(self) -> tuple[float, float]:
        db = math.sqrt(sum(float(((v.data - self.init_backbone[k]) ** 2).sum()) for k, v in self.backbone.items()))
        da = math.sqrt(sum(float(((v.data - self.init_aggregator[k]) ** 2).sum()) for k, v in self.aggregator.items()))
        return db, da


def _flat(params: dict[str, Value]) -> np.ndarray:
    return np.concatenate([p.data.reshape(-1) for p in params.values()])


def _grad_norm(params: dict[str, Value]) -> float:
    return math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params.values() if p.grad is not None))


# --------------------------------------------------------------- gradients


@dataclass
class GradientSnapshot:
    """Detached aggregator-loss gradients w.r.t. tile features, weights and bag vector."""

    G_z: np.ndarray
    g_a: np.ndarray
    dL_dZ: np.ndarray

    def check_identities(self, features: np.ndarray, weights: np.ndarray, rtol: float = 1e-6) -> tuple[float, float]:
        """Max relative error of ``g_z_i = w_i dL/dZ`` and ``g_a_i = <z_i, dL/dZ>``."""
        expect_z = np.outer(weights, self.dL_dZ)
        expect_a = features @ self.dL_dZ
        err_z = _rel_err(self.G_z, expect_z)
        err_a = _rel_err(self.g_a, expect_a)
        return err_z, err_a


def _rel_err(x, y) -> float:
    x, y = np.asarray(x, np.float64), np.asarray(y, np.float64)
    scale = max(np.abs(y).max(initial=0.0), np.abs(x).max(initial=0.0), 1e-30)
    return float(np.abs(x - y).max(initial=0.0) / scale)


@dataclass
class AggregatorPass:
    graph: Graph
    features: Value
    weights: Value
    bag: Value
    probs: Value
    loss: Value
    clamped: bool


def aggregator_pass(features: np.ndarray, scores: np.ndarray, label, params: dict[str, Value],
                    cfg: TrainConfig) -> AggregatorPass:
    """Aggregator graph over detached inputs; ``features`` and the normalized
    weights are fresh leaves so their gradients can be captured."""
    g = Graph()
    Z = Value(features, requires_grad=True, name="Z_detached")
    w = Value(agg.normalize_attention(scores).astype(features.dtype), requires_grad=True, name="a_hat")
    bag = agg.aggregate_bag(Z, w, g)
    probs = agg.classify_bag(bag, params, g)
    loss, clamped = agg.aggregator_loss(probs, label, cfg.class_weights, cfg.task, cfg.alpha, graph=g)
    return AggregatorPass(g, Z, w, bag, probs, loss, clamped)


def capture_detached_gradients(ap: AggregatorPass, verify: bool = False, rtol: float = 1e-6) -> GradientSnapshot:
    """Read gradients from a completed aggregator backward and freeze them."""
    if ap.features.grad is None or ap.weights.grad is None:
        raise GraphError("aggregator backward has not run; no gradients to capture")
    snap = GradientSnapshot(
        G_z=ap.features.grad.copy(),
        g_a=ap.weights.grad.copy(),
        dL_dZ=ap.graph.grad_of(ap.bag).copy(),
    )
    if verify:
        ez, ea = snap.check_identities(ap.features.data, ap.weights.data)
        tol = rtol if ap.features.dtype == np.float64 else 1e-5
        if ez > tol or ea > tol:
            raise AssertionError(f"gradient identities violated: {ez:.3g}, {ea:.3g}")
    return snap


def task_adaptation_loss(features: Value, scores: Value, snap: GradientSnapshot, lam: float, beta: float,
                         graph: Graph) -> tuple[Value, dict[str, float]]:
    """``sum_i <z_i, g_z_i> + lam sum_i a_i g_a_i + beta sum_i (1 - cos(z_i, g_z_i))``.

    ``features`` and ``scores`` are attached to the backbone graph; the
    snapshot enters as constants. Tiles where either vector has norm below
    1e-12 contribute zero to the cosine term.
    """
    if features.shape != snap.G_z.shape:
        raise ShapeError(f"task_adaptation_loss: features {features.shape} vs G_z {snap.G_z.shape}")
    if scores.shape != snap.g_a.shape:
        raise ShapeError(f"task_adaptation_loss: scores {scores.shape} vs g_a {snap.g_a.shape}")
    g = graph
    dt = features.dtype
    Gz = snap.G_z.astype(dt)
    l_feat = g.sum(g.mul(features, Gz))
    l_att = g.sum(g.mul(scores, snap.g_a.astype(dt)))

    dots = g.sum(g.mul(features, Gz), axis=1)
    z_norm = g.sqrt(g.sum(g.mul(features, features), axis=1))
    g_norm = np.sqrt((snap.G_z.astype(np.float64) ** 2).sum(axis=1))
    valid = (z_norm.data >= ZERO_NORM) & (g_norm >= ZERO_NORM)
    safe_z = g.add(z_norm, (~valid).astype(dt))
    denom = np.where(valid, g_norm, 1.0).astype(dt)
    cos = g.mul(g.div(dots, g.mul(safe_z, denom)), valid.astype(dt))
    l_reg = g.sub(np.asarray(float(valid.sum()), dtype=dt), g.sum(cos))

    total = g.add(g.add(l_feat, g.scale(l_att, lam)), g.scale(l_reg, beta))
    parts = {
        "L_feature": float(l_feat.data),
        "L_attention": float(l_att.data),
        "L_reg": float(l_reg.data),
        "L_PFM": float(total.data),
    }
    return total, parts


# --------------------------------------------------------------------- steps


@dataclass
class StepDiagnostics:
    L_agg: float = float("nan")
    L_feature: float = 0.0
    L_attention: float = 0.0
    L_reg: float = 0.0
    L_PFM: float = 0.0
    drift_backbone: float = 0.0
    drift_aggregator: float = 0.0
    grad_norm_backbone: float = 0.0
    grad_norm_aggregator: float = 0.0
    update_cosine: float = float("nan")
    clamped: bool = False
    skipped: bool = False
    rolled_back: bool = False
    stage1_touched_backbone: bool | None = None
    stage2_touched_aggregator: bool | None = None
    identity_error_z: float = float("nan")
    identity_error_a: float = float("nan")
    forward_work: int = 0

    COLUMNS = ("L_agg", "L_feature", "L_attention", "L_reg", "L_PFM", "drift_backbone", "drift_aggregator",
               "grad_norm_backbone", "grad_norm_aggregator", "update_cosine", "clamped", "skipped", "rolled_back")

    def row(self) -> list:
        return [getattr(self, c) for c in self.COLUMNS]


def _record_update(state: ModelState, before: np.ndarray, diag: StepDiagnostics) -> None:
    delta = _flat(state.backbone) - before
    d64 = delta.astype(np.float64)
    n = np.linalg.norm(d64)
    if state.prev_update is not None and n > 0:
        prev = state.prev_update.astype(np.float64)
        pn = np.linalg.norm(prev)
        if pn > 0:
            diag.update_cosine = float(d64 @ prev / (n * pn))
    if n > 0:
        state.prev_update = delta


def _finish(state: ModelState, diag: StepDiagnostics) -> StepDiagnostics:
    diag.drift_backbone, diag.drift_aggregator = state.drift()
    state.step += 1
    return diag


def tapfm_step(tiles: np.ndarray, label, state: ModelState, cfg: TrainConfig, lr_factor: float = 1.0) -> StepDiagnostics:
    """One decoupled update on one bag of (already sampled) tiles."""
    diag = StepDiagnostics()
    snap_state = state.snapshot()
    track = cfg.verify

    gb = Graph()
    out = forward_tiles(tiles, state.backbone, state.vit, gb)
    scores = cls_attention_scores(out)
    diag.forward_work = gb.work
    Z_det, a_det = detach(out.features), detach(scores)
    if not (np.all(np.isfinite(Z_det.data)) and np.all(np.isfinite(a_det.data))):
        return _rollback(state, snap_state, diag)

    ap = aggregator_pass(Z_det.data, a_det.data, label, state.aggregator, cfg)
    diag.L_agg = float(ap.loss.data)
    diag.clamped = ap.clamped
    if not math.isfinite(diag.L_agg):
        return _rollback(state, snap_state, diag)
    state.opt_aggregator.zero_grad()
    ap.graph.backward(ap.loss, retain=[ap.bag])
    diag.grad_norm_aggregator = _grad_norm(state.aggregator)

    # stage 1: aggregator only
    before_b = _flat(state.backbone) if track else None
    if not state.opt_aggregator.step(lr_factor):
        return _rollback(state, snap_state, diag)
    if track:
        diag.stage1_touched_backbone = not np.array_equal(before_b, _flat(state.backbone))

    snap = capture_detached_gradients(ap)
    if track:
        diag.identity_error_z, diag.identity_error_a = snap.check_identities(Z_det.data, ap.weights.data)

    # stage 2: backbone only
    loss_pfm, parts = task_adaptation_loss(out.features, scores, snap, cfg.lam, cfg.beta, gb)
    for k, v in parts.items():
        setattr(diag, k, v)
    if not math.isfinite(parts["L_PFM"]):
        return _rollback(state, snap_state, diag)
    state.opt_backbone.zero_grad()
    gb.backward(loss_pfm)
    diag.grad_norm_backbone = _grad_norm(state.backbone)
    before_a = _flat(state.aggregator) if track else None
    before = _flat(state.backbone)
    if not state.opt_backbone.step(lr_factor):
        return _rollback(state, snap_state, diag)
    if track:
        diag.stage2_touched_aggregator = not np.array_equal(before_a, _flat(state.aggregator))
    _record_update(state, before, diag)
    return _finish(state, diag)


def joint_forward(tiles: np.ndarray, label, state: ModelState, cfg: TrainConfig, graph: Graph):
    """Single graph from pixels to loss, normalization included."""
    g = graph
    out = forward_tiles(tiles, state.backbone, state.vit, g)
    a = cls_attention_scores(out)
    lo, hi = g.min(a), g.max(a)
    if hi.data == lo.data:
        s = np.zeros_like(a.data)
    else:
        s = g.div(g.sub(a, lo), g.sub(hi, lo))
    w = g.softmax(s, axis=0)
    bag = g.matmul(w, out.features)
    probs = agg.classify_bag(bag, state.aggregator, g)
    loss, clamped = agg.aggregator_loss(probs, label, cfg.class_weights, cfg.task, cfg.alpha, graph=g)
    return loss, clamped


def joint_step(tiles: np.ndarray, label, state: ModelState, cfg: TrainConfig, lr_factor: float = 1.0) -> StepDiagnostics:
    """Conventional end-to-end update: one backward, both parameter sets move."""
    diag = StepDiagnostics()
    snap_state = state.snapshot()
    g = Graph()
    loss, diag.clamped = joint_forward(tiles, label, state, cfg, g)
    diag.L_agg = float(loss.data)
    if not math.isfinite(diag.L_agg):
        return _rollback(state, snap_state, diag)
    state.opt_backbone.zero_grad()
    state.opt_aggregator.zero_grad()
    g.backward(loss)
    diag.grad_norm_backbone = _grad_norm(state.backbone)
    diag.grad_norm_aggregator = _grad_norm(state.aggregator)
    if not (state.opt_backbone.grads_finite() and state.opt_aggregator.grads_finite()):
        return _rollback(state, snap_state, diag)
    before = _flat(state.backbone)
    state.opt_aggregator.step(lr_factor)
    state.opt_backbone.step(lr_factor)
    _record_update(state, before, diag)
    return _finish(state, diag)


def _rollback(state: ModelState, snap: dict, diag: StepDiagnostics) -> StepDiagnostics:
    state.restore(snap)
    diag.rolled_back = True
    diag.skipped = True
    return diag


# ------------------------------------------------------------------ training


def bag_probabilities(bags: Iterable[TileBag], state: ModelState, chunk: int = 256) -> np.ndarray:
    """Full-bag inference (every tile, no augmentation): M×n_out probabilities."""
    probs = []
    for bag in bags:
        feats, scores = extract_features(np.asarray(bag.tiles), state.backbone, state.vit, chunk)
        probs.append(agg.predict_bag(feats, scores, state.aggregator).probs)
    return np.array(probs, dtype=np.float64).reshape(len(probs), -1)


def evaluate_bags(bags: list[TileBag], state: ModelState, epoch: int | None = None):
    labels = np.array([np.atleast_1d(b.label) for b in bags])
    probs = bag_probabilities(bags, state)
    report = macro_auc(probs, labels, epoch=epoch)
    return report, probs


@dataclass
class TrainResult:
    best_state: ModelState
    final_state: ModelState
    history: list[dict]
    best_epoch: int
    best_metric: float
    steps: list[StepDiagnostics] = field(default_factory=list)


def loss_weights(labels: np.ndarray, task: str) -> tuple[list, list | None]:
    """Class weights (and per-class alpha for multi-label) from training labels."""
    if task == "binary":
        return agg.binary_class_weights(labels[:, 0]).tolist(), None
    return agg.multilabel_class_weights(labels).tolist(), agg.multilabel_alpha(labels).tolist()


def train(train_bags: list[TileBag], val_bags: list[TileBag], cfg: TrainConfig, vit: ViTConfig,
          state: ModelState | None = None, on_epoch: Callable | None = None,
          on_step: Callable | None = None, keep_steps: bool = False, history: list[dict] | None = None) -> TrainResult:
    """Epoch loop: shuffled single-bag steps, full-bag validation, best-checkpoint selection.

    ``on_epoch(state, row, is_best)`` is called after validation; pass a state
    restored from a checkpoint (with ``state.epoch`` set) to resume.
    """
    if not train_bags or not val_bags:
        raise ValueError("train and validation splits must be nonempty")
    labels = np.array([np.atleast_1d(b.label) for b in train_bags])
    if cfg.class_weights is None:
        cw, alpha = loss_weights(labels, cfg.task)
        cfg = replace(cfg, class_weights=cw, alpha=alpha)
    n_out = labels.shape[1]
    if state is None:
        state = ModelState.create(vit, n_out=n_out, seed=cfg.seed, cfg=cfg)
    if state.n_out != n_out:
        raise ValueError(f"model has {state.n_out} outputs but labels have {n_out} classes")
    step_fn = tapfm_step if cfg.mode == "decoupled" else joint_step

    history = list(history or [])
    best_metric, best_epoch, best = -np.inf, -1, None
    for row in history:
        if row["val_metric"] > best_metric:
            best_metric, best_epoch = row["val_metric"], row["epoch"]
    steps: list[StepDiagnostics] = []
    for epoch in range(state.epoch, cfg.epochs):
        factor = warm_restart_factor(epoch, cfg.t0, cfg.t_mult)
        order = np.random.default_rng([cfg.seed, epoch, 0]).permutation(len(train_bags))
        sums = {k: 0.0 for k in ("L_agg", "L_feature", "L_attention", "L_reg", "L_PFM")}
        ucos, n_ok, n_skip = [], 0, 0
        for i in order:
            bag = train_bags[i]
            idx = sample_bag_tiles(bag.K, cfg.tiles_per_bag, bag_rng(cfg.seed, epoch, bag.index, 1))
            tiles = np.asarray(bag.tiles[idx], dtype=np.float32)
            if cfg.augment:
                tiles = augment_bag(tiles, bag_rng(cfg.seed, epoch, bag.index, 2))
            diag = step_fn(tiles, bag.label, state, cfg, factor)
            if on_step is not None:
                on_step(state, diag)
            if keep_steps:
                steps.append(diag)
            if diag.skipped:
                n_skip += 1
                continue
            n_ok += 1
            for k in sums:
                sums[k] += getattr(diag, k)
            if math.isfinite(diag.update_cosine):
                ucos.append(diag.update_cosine)
        state.epoch = epoch + 1
        report, _ = evaluate_bags(val_bags, state, epoch=epoch + 1)
        drift_b, drift_a = state.drift()
        row = {
            "epoch": epoch + 1,
            "lr_factor": factor,
            "train_loss": sums["L_agg"] / max(n_ok, 1),
            "train_L_feature": sums["L_feature"] / max(n_ok, 1),
            "train_L_attention": sums["L_attention"] / max(n_ok, 1),
            "train_L_reg": sums["L_reg"] / max(n_ok, 1),
            "train_L_PFM": sums["L_PFM"] / max(n_ok, 1),
            "skipped_steps": n_skip,
            "mean_update_cosine": float(np.mean(ucos)) if ucos else float("nan"),
            "drift_backbone": drift_b,
            "drift_aggregator": drift_a,
            "val_metric": report.macro,
            "val_auc": report.per_class,
        }
        is_best = report.macro > best_metric
        if is_best:
            best_metric, best_epoch = report.macro, epoch + 1
            best = clone_state(state)
        row["best"] = is_best
        history.append(row)
        if on_epoch is not None:
            on_epoch(state, row, is_best)
    if best is None:
        best = clone_state(state)
    return TrainResult(best_state=best, final_state=state, history=history, best_epoch=best_epoch,
                       best_metric=float(best_metric), steps=steps)


def clone_state(state: ModelState) -> ModelState:
    return copy.deepcopy(state)
