"""Minimal reverse-mode differentiation over numpy arrays.

A :class:`Graph` is an append-only tape. Every differentiable op evaluated
through it records one node holding the inputs and a closure that maps the
output gradient to input gradients. :meth:`Graph.backward` walks the tape in
reverse append order. :func:`detach` returns a provenance-free copy, which is
how the backbone and aggregator keep separate computation graphs.

Leaves (parameters) are :class:`Value` objects with ``requires_grad=True`` and
no graph; gradients accumulate additively into ``leaf.grad``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Value",
    "Graph",
    "GraphError",
    "ShapeError",
    "NonFiniteError",
    "detach",
    "finite_diff_gradient",
]


class GraphError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Value:
    """A dense array that may carry gradient provenance."""

    __slots__ = ("data", "requires_grad", "grad", "graph", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.graph: Graph | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.graph is None

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Value(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"


def detach(v: Value | np.ndarray) -> Value:
    """Copy of ``v`` with identical data and no provenance."""
    data = v.data if isinstance(v, Value) else np.asarray(v)
    return Value(data.copy(), requires_grad=False)


@dataclass
class _Node:
    kind: str
    out: Value
    inputs: tuple[Value, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class Graph:
    """Append-only tape of differentiable operations.

    ``enabled=False`` evaluates ops without recording (inference mode).
    ``strict=True`` rejects non-finite inputs at every op.
    """

    def __init__(self, *, strict: bool = False, enabled: bool = True):
        self.strict = strict
        self.enabled = enabled
        self.nodes: list[_Node] = []
        self.work = 0  # elements produced by ops, a deterministic op-count proxy
        self._retained: dict[int, np.ndarray] = {}

    # ------------------------------------------------------------------ core

    def _wrap(self, x) -> Value:
        if isinstance(x, Value):
            if x.graph is not None and x.graph is not self:
                raise GraphError("input value belongs to a different graph")
            return x
        return Value(x)

    def _record(self, kind: str, data: np.ndarray, inputs: tuple[Value, ...], backward) -> Value:
        self.work += int(np.size(data))
        needs = self.enabled and any(v.requires_grad for v in inputs)
        out = Value(data, requires_grad=needs)
        if needs:
            out.graph = self
            self.nodes.append(_Node(kind, out, inputs, backward))
        return out

    def _check(self, kind: str, *values: Value) -> None:
        if self.strict:
            for v in values:
                if not np.all(np.isfinite(v.data)):
                    raise NonFiniteError(f"{kind}: non-finite input of shape {v.shape}")

    def evaluate(self, kind: str, *inputs, **attrs) -> Value:
        """Dispatch ``kind`` (e.g. ``"matmul"``) to the matching op."""
        fn = getattr(self, kind, None)
        if fn is None or kind.startswith("_") or kind in _NOT_OPS:
            raise GraphError(f"unknown op {kind!r}")
        return fn(*inputs, **attrs)

    def backward(self, root: Value, seed=None, retain: Sequence[Value] = ()) -> None:
        """Propagate ``seed`` (default 1 for scalars) from ``root`` to all leaves.

        Gradients of intermediate values listed in ``retain`` remain queryable
        through :meth:`grad_of` afterwards.
        """
        if root.graph is not self:
            raise GraphError("root is not on this graph")
        if seed is None:
            if root.data.size != 1:
                raise ShapeError(f"backward: non-scalar root {root.shape} needs an explicit seed")
            seed = np.ones_like(root.data)
        seed = np.asarray(seed, dtype=root.dtype)
        if seed.shape != root.shape:
            raise ShapeError(f"backward: seed shape {seed.shape} does not match root {root.shape}")
        keep = {id(v) for v in retain}
        grads: dict[int, np.ndarray] = {id(root): seed}
        self._retained = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            if id(node.out) in keep:
                self._retained[id(node.out)] = g
            in_grads = node.backward(g)
            for v, gi in zip(node.inputs, in_grads):
                if gi is None or not v.requires_grad:
                    continue
                if v.graph is self:
                    prev = grads.get(id(v))
                    grads[id(v)] = gi if prev is None else prev + gi
                elif v.graph is None:
                    gi = np.asarray(gi, dtype=v.dtype)
                    v.grad = gi.copy() if v.grad is None else v.grad + gi

    def grad_of(self, v: Value) -> np.ndarray:
        """Gradient of an intermediate value retained in the last backward."""
        if v.is_leaf:
            if v.grad is None:
                raise GraphError("leaf has no gradient")
            return v.grad
        try:
            return self._retained[id(v)]
        except KeyError:
            raise GraphError("gradient was not retained; pass the value in backward(retain=...)") from None

    # ------------------------------------------------------- elementwise ops

    def _binary(self, kind, a, b, fwd, ga, gb) -> Value:
        a, b = self._wrap(a), self._wrap(b)
        self._check(kind, a, b)
        try:
            out = fwd(a.data, b.data)
        except ValueError:
            raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None
        sa, sb = a.shape, b.shape
        ad, bd = a.data, b.data

        def backward(g):
            return (
                _unbroadcast(ga(g, ad, bd, out), sa) if a.requires_grad else None,
                _unbroadcast(gb(g, ad, bd, out), sb) if b.requires_grad else None,
            )

        return self._record(kind, out, (a, b), backward)

    def add(self, a, b) -> Value:
        return self._binary("add", a, b, np.add, lambda g, *_: g, lambda g, *_: g)

    def sub(self, a, b) -> Value:
        return self._binary("sub", a, b, np.subtract, lambda g, *_: g, lambda g, *_: -g)

    def mul(self, a, b) -> Value:
        return self._binary(
            "mul", a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x
        )

    def div(self, a, b) -> Value:
        return self._binary(
            "div", a, b, np.divide,
            lambda g, x, y, o: g / y,
            lambda g, x, y, o: -g * o / y,
        )

    def scale(self, a, c: float) -> Value:
        a = self._wrap(a)
        self._check("scale", a)
        c = float(c)
        out = a.data * np.asarray(c, dtype=a.dtype)
        return self._record("scale", out, (a,), lambda g: (g * np.asarray(c, dtype=g.dtype),))

    def neg(self, a) -> Value:
        return self.scale(a, -1.0)

    def _unary(self, kind, a, fwd, grad) -> Value:
        a = self._wrap(a)
        self._check(kind, a)
        x = a.data
        out = fwd(x)
        return self._record(kind, out, (a,), lambda g: (grad(g, x, out),))

    def exp(self, a) -> Value:
        return self._unary("exp", a, np.exp, lambda g, x, o: g * o)

    def log(self, a) -> Value:
        return self._unary("log", a, np.log, lambda g, x, o: g / x)

    def sqrt(self, a) -> Value:
        return self._unary("sqrt", a, np.sqrt, lambda g, x, o: g * 0.5 / o)

    def tanh(self, a) -> Value:
        return self._unary("tanh", a, np.tanh, lambda g, x, o: g * (1.0 - o * o))

    def sigmoid(self, a) -> Value:
        def fwd(x):
            # two-branch form avoids overflow in exp for large |x|
            e = np.exp(-np.abs(x))
            return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

        return self._unary("sigmoid", a, fwd, lambda g, x, o: g * o * (1.0 - o))

    def gelu(self, a) -> Value:
        a = self._wrap(a)
        self._check("gelu", a)
        x = a.data
        cdf = (0.5 * (1.0 + erf(x * (1.0 / math.sqrt(2.0))))).astype(x.dtype)
        out = x * cdf

        def backward(g):
            pdf = np.exp(-0.5 * x * x) * np.asarray(1.0 / math.sqrt(2.0 * math.pi), dtype=x.dtype)
            return (g * (cdf + x * pdf),)

        return self._record("gelu", out, (a,), backward)

    # ------------------------------------------------------ structured ops

    def matmul(self, a, b) -> Value:
        a, b = self._wrap(a), self._wrap(b)
        self._check("matmul", a, b)
        if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        try:
            out = np.matmul(a.data, b.data)
        except ValueError:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
        if a.ndim > 2 and b.ndim == 2:
            # fold batch dims into rows: one GEMM each way instead of a batched product
            a2 = a.data.reshape(-1, a.shape[-1])

            def backward(g):
                g2 = g.reshape(-1, b.shape[-1])
                ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
                gb = a2.T @ g2 if b.requires_grad else None
                return ga, gb

            return self._record("matmul", out, (a, b), backward)

        ad = a.data if a.ndim > 1 else a.data[None, :]
        bd = b.data if b.ndim > 1 else b.data[:, None]
        full = np.matmul(ad, bd).shape

        def backward(g):
            g = g.reshape(full)
            ga = gb = None
            if a.requires_grad:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape).reshape(a.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape).reshape(b.shape)
            return ga, gb

        return self._record("matmul", out, (a, b), backward)

    def softmax(self, a, axis: int = -1) -> Value:
        a = self._wrap(a)
        self._check("softmax", a)
        x = a.data
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return self._record("softmax", out, (a,), backward)

    def layer_norm(self, a, eps: float = 1e-6, axis: int = -1) -> Value:
        """Normalize to zero mean, unit variance along ``axis`` (no affine part)."""
        a = self._wrap(a)
        self._check("layer_norm", a)
        x = a.data
        mu = x.mean(axis=axis, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
        xhat = xc * inv

        def backward(g):
            gm = g.mean(axis=axis, keepdims=True)
            gx = (g * xhat).mean(axis=axis, keepdims=True)
            return (inv * (g - gm - xhat * gx),)

        return self._record("layer_norm", xhat.astype(x.dtype), (a,), backward)

    def sum(self, a, axis=None, keepdims: bool = False) -> Value:
        a = self._wrap(a)
        self._check("sum", a)
        shape = a.shape
        axes = _norm_axes(axis, a.ndim)
        out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims))

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, shape).copy(),)

        return self._record("sum", out, (a,), backward)

    def mean(self, a, axis=None, keepdims: bool = False) -> Value:
        a = self._wrap(a)
        axes = _norm_axes(axis, a.ndim)
        count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
        return self.scale(self.sum(a, axis=axes, keepdims=keepdims), 1.0 / count)

    def _extreme(self, kind, a, axis, keepdims, argfn) -> Value:
        a = self._wrap(a)
        self._check(kind, a)
        x = a.data
        if axis is None:
            flat = int(argfn(x.reshape(-1)))
            out = np.asarray(x.reshape(-1)[flat])
            if keepdims:
                out = out.reshape((1,) * x.ndim)

            def backward(g):
                gx = np.zeros_like(x).reshape(-1)
                gx[flat] = np.asarray(g).reshape(())
                return (gx.reshape(x.shape),)
        else:
            ax = axis % x.ndim
            # first attaining index wins on ties
            idx = np.expand_dims(argfn(x, axis=ax), ax)
            out = np.take_along_axis(x, idx, axis=ax)
            if not keepdims:
                out = np.squeeze(out, axis=ax)

            def backward(g):
                gx = np.zeros_like(x)
                gk = g if keepdims else np.expand_dims(g, ax)
                np.put_along_axis(gx, idx, gk, axis=ax)
                return (gx,)

        return self._record(kind, out, (a,), backward)

    def max(self, a, axis: int | None = None, keepdims: bool = False) -> Value:
        return self._extreme("max", a, axis, keepdims, np.argmax)

    def min(self, a, axis: int | None = None, keepdims: bool = False) -> Value:
        return self._extreme("min", a, axis, keepdims, np.argmin)

    def concat(self, values: Sequence, axis: int = 0) -> Value:
        vals = tuple(self._wrap(v) for v in values)
        self._check("concat", *vals)
        try:
            out = np.concatenate([v.data for v in vals], axis=axis)
        except ValueError:
            shapes = ", ".join(str(v.shape) for v in vals)
            raise ShapeError(f"concat: incompatible shapes {shapes}") from None
        bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

        def backward(g):
            return tuple(np.split(g, bounds, axis=axis))

        return self._record("concat", out, vals, backward)

    def getitem(self, a, index) -> Value:
        a = self._wrap(a)
        self._check("getitem", a)
        x = a.data
        out = np.array(x[index])

        basic = all(isinstance(i, (int, np.integer, slice)) for i in (index if isinstance(index, tuple) else (index,)))

        def backward(g):
            gx = np.zeros_like(x)
            if basic:
                gx[index] = g
            else:
                np.add.at(gx, index, g)
            return (gx,)

        return self._record("getitem", out, (a,), backward)

    def reshape(self, a, shape) -> Value:
        a = self._wrap(a)
        src = a.shape
        try:
            out = a.data.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {src} to {shape}") from None
        return self._record("reshape", out, (a,), lambda g: (g.reshape(src),))

    def transpose(self, a, axes=None) -> Value:
        a = self._wrap(a)
        axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
        inverse = tuple(np.argsort(axes))
        out = np.transpose(a.data, axes)
        return self._record("transpose", out, (a,), lambda g: (np.transpose(g, inverse),))


_NOT_OPS = {"evaluate", "backward", "grad_of"}


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, in float64."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
