"""MIL head: attention normalization, bag pooling, classifier and weighted loss.

Also holds the two frozen-feature references: ABMIL and mean pooling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Graph, ShapeError, Value

EPS = 1e-7


@dataclass
class BagPrediction:
    normalized_attention: np.ndarray
    bag_vector: np.ndarray
    probs: np.ndarray
    loss: float | None = None
    clamped: bool = False


def init_aggregator(embed_dim: int, n_out: int = 1, dtype=np.float32) -> dict[str, Value]:
    """Zero-initialised linear head ``W`` (n_out×D) and ``b`` (n_out)."""
    return {
        "W": Value(np.zeros((n_out, embed_dim), dtype=dtype), requires_grad=True, name="W"),
        "b": Value(np.zeros(n_out, dtype=dtype), requires_grad=True, name="b"),
    }


def minmax_scale(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def normalize_attention(a) -> np.ndarray:
    """Min-max scale raw scores to [0, 1], then softmax over the bag.

    A constant score vector scales to all zeros and hence a uniform result.
    """
    a = np.asarray(a)
    if a.ndim != 1 or a.size == 0:
        raise ShapeError(f"normalize_attention: expected a nonempty vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise FloatingPointError("normalize_attention: non-finite attention scores")
    s = minmax_scale(a)
    e = np.exp(s - s.max())
    return e / e.sum()


def aggregate_bag(features, weights, graph: Graph | None = None):
    """Bag vector ``sum_i w_i z_i``. Arrays in, array out, unless a graph is given."""
    f_shape = np.shape(features.data if isinstance(features, Value) else features)
    w_shape = np.shape(weights.data if isinstance(weights, Value) else weights)
    if len(f_shape) != 2 or w_shape != (f_shape[0],):
        raise ShapeError(f"aggregate_bag: incompatible shapes {f_shape} and {w_shape}")
    if graph is None:
        return np.asarray(weights) @ np.asarray(features)
    return graph.matmul(weights, features)


def classify_bag(bag_vector, params: dict[str, Value], graph: Graph | None = None):
    """``sigmoid(W Z + b)``, elementwise over outputs."""
    if graph is None:
        logits = params["W"].data @ np.asarray(bag_vector) + params["b"].data
        return _sigmoid(logits)
    logits = graph.add(graph.matmul(params["W"], bag_vector), params["b"])
    return graph.sigmoid(logits)


def _sigmoid(x):
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def binary_class_weights(labels) -> np.ndarray:
    """Inverse-frequency weights ``w_y = M / (2 M_y)`` for y in {0, 1}."""
    labels = np.asarray(labels).reshape(-1)
    M = labels.size
    counts = np.array([(labels == 0).sum(), (labels == 1).sum()], dtype=np.float64)
    if np.any(counts == 0):
        raise ValueError("both classes must be present to compute class weights")
    return M / (2.0 * counts)


def multilabel_alpha(labels) -> np.ndarray:
    """Per-class ``alpha_j = M / M_j+`` (inverse positive ratio)."""
    labels = np.asarray(labels)
    pos = labels.sum(axis=0).astype(np.float64)
    if np.any(pos == 0):
        raise ValueError("every class needs at least one positive example")
    return labels.shape[0] / pos


def multilabel_class_weights(labels) -> np.ndarray:
    """C×2 array of per-class inverse-frequency weights (columns: y=0, y=1)."""
    labels = np.asarray(labels)
    return np.stack([binary_class_weights(labels[:, j]) for j in range(labels.shape[1])])


def aggregator_loss(probs, y, class_weights=None, task: str = "binary", alpha=None, graph: Graph | None = None):
    """Weighted binary cross-entropy, summed over outputs with ``alpha`` for multi-label.

    ``class_weights`` is a length-2 vector (binary) or C×2 array (multi-label),
    indexed by the true label. Probabilities are clamped to [EPS, 1-EPS]; the
    returned flag reports whether clamping was active.
    Returns ``(loss, clamped)``; ``loss`` is a Value when ``graph`` is given.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    p_arr = probs.data if isinstance(probs, Value) else np.asarray(probs)
    p_arr = p_arr.reshape(-1)
    if p_arr.shape != y.shape:
        raise ShapeError(f"aggregator_loss: prediction shape {p_arr.shape} vs label shape {y.shape}")
    n = y.size
    if task == "binary":
        if n != 1:
            raise ShapeError("binary task expects a single output")
        cw = np.ones(2) if class_weights is None else np.asarray(class_weights, dtype=np.float64).reshape(2)
        w = cw[y.astype(int)]
        coef = w
    elif task == "multilabel":
        cw = np.ones((n, 2)) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
        w = cw[np.arange(n), y.astype(int)]
        al = np.ones(n) if alpha is None else np.asarray(alpha, dtype=np.float64)
        coef = al * w
    else:
        raise ValueError(f"unknown task {task!r}")
    clamped = bool(np.any((p_arr < EPS) | (p_arr > 1 - EPS)))

    if graph is None:
        p = np.clip(p_arr.astype(np.float64), EPS, 1 - EPS)
        per = -(y * np.log(p) + (1 - y) * np.log(1 - p))
        return float(np.sum(coef * per)), clamped

    dtype = p_arr.dtype
    p = probs
    if clamped:
        # clamp as a constant offset so the gradient passes through unchanged
        p = graph.add(p, (np.clip(p_arr, EPS, 1 - EPS) - p_arr).astype(dtype))
    one_minus = graph.sub(np.ones_like(p_arr), p)
    ll = graph.add(
        graph.mul(y.astype(dtype), graph.log(p)),
        graph.mul((1 - y).astype(dtype), graph.log(one_minus)),
    )
    loss = graph.sum(graph.mul((-coef).astype(dtype), ll))
    return loss, clamped


def predict_bag(features: np.ndarray, scores: np.ndarray, params: dict[str, Value]) -> BagPrediction:
    """Inference path: normalize, pool, classify. Plain arrays throughout."""
    w = normalize_attention(scores)
    bag = aggregate_bag(features, w)
    return BagPrediction(normalized_attention=w, bag_vector=bag, probs=classify_bag(bag, params))


# ---------------------------------------------------------------- baselines


def init_abmil(embed_dim: int, hidden: int = 32, n_out: int = 1, seed: int = 0, dtype=np.float32) -> dict[str, Value]:
    """Attention-MIL parameters (Ilse et al.); ``U`` is only used by the gated variant."""
    rng = np.random.default_rng(seed)
    lim_v = np.sqrt(6.0 / (embed_dim + hidden))
    lim_w = np.sqrt(6.0 / (hidden + 1))
    arrays = {
        "V": rng.uniform(-lim_v, lim_v, (hidden, embed_dim)),
        "U": rng.uniform(-lim_v, lim_v, (hidden, embed_dim)),
        "w": rng.uniform(-lim_w, lim_w, hidden),
        "W": np.zeros((n_out, embed_dim)),
        "b": np.zeros(n_out),
    }
    return {k: Value(v.astype(dtype), requires_grad=True, name=k) for k, v in arrays.items()}


def abmil_forward(features, params: dict[str, Value], graph: Graph, gated: bool = False):
    """Returns ``(weights, bag_vector, probs)`` as Values on ``graph``.

    Attention logits are ``w^T (tanh(V z_i) * sigmoid(U z_i))`` with gating,
    ``w^T tanh(V z_i)`` without.
    """
    g = graph
    Vt = g.transpose(params["V"])
    h = g.tanh(g.matmul(features, Vt))
    if gated:
        h = g.mul(h, g.sigmoid(g.matmul(features, g.transpose(params["U"]))))
    logits = g.matmul(h, params["w"])
    weights = g.softmax(logits, axis=0)
    bag = g.matmul(weights, features)
    probs = classify_bag(bag, params, g)
    return weights, bag, probs


def abmil_baseline(features: np.ndarray, params: dict[str, Value], gated: bool = False) -> BagPrediction:
    g = Graph(enabled=False)
    weights, bag, probs = abmil_forward(features, params, g, gated=gated)
    return BagPrediction(weights.data, bag.data, probs.data)


def mean_pool_baseline(features: np.ndarray, params: dict[str, Value]) -> BagPrediction:
    K = features.shape[0]
    w = np.full(K, 1.0 / K)
    bag = aggregate_bag(features, w)
    return BagPrediction(w, bag, classify_bag(bag, params))
