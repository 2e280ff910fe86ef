import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tapfm.autograd import Graph, GraphError, NonFiniteError, ShapeError, Value, detach, finite_diff_gradient


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


def check(build, *arrays_, tol=1e-4):
    """Compare backward gradients of sum(build(...) * weights) with central differences."""
    rng = np.random.default_rng(0)
    probe = {}

    def scalar(g, vals):
        out = build(g, *vals)
        if out.data.size == 1:
            return g.sum(out)
        if "w" not in probe:
            probe["w"] = rng.normal(size=out.shape)
        return g.sum(g.mul(out, probe["w"]))

    leaves = [Value(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays_]
    g = Graph()
    g.backward(scalar(g, leaves))
    for i, leaf in enumerate(leaves):
        def f(x, i=i):
            vals = [Value(x) if j == i else Value(l.data) for j, l in enumerate(leaves)]
            return float(scalar(Graph(enabled=False), vals).data)
        num = finite_diff_gradient(f, leaf.data)
        assert leaf.grad is not None, f"input {i} got no gradient"
        assert rel_err(leaf.grad, num) <= tol


RNG = np.random.default_rng(1)


def U(*shape):
    return RNG.uniform(-2, 2, size=shape)


UNARY = {
    "exp": lambda g, a: g.exp(a),
    "tanh": lambda g, a: g.tanh(a),
    "sigmoid": lambda g, a: g.sigmoid(a),
    "gelu": lambda g, a: g.gelu(a),
    "neg": lambda g, a: g.neg(a),
    "scale": lambda g, a: g.scale(a, -1.7),
    "softmax0": lambda g, a: g.softmax(a, axis=0),
    "softmax1": lambda g, a: g.softmax(a, axis=-1),
    "layer_norm": lambda g, a: g.layer_norm(a),
    "sum_axis": lambda g, a: g.sum(a, axis=1),
    "mean_tuple": lambda g, a: g.mean(a, axis=(0, 1)),
    "max": lambda g, a: g.max(a, axis=1),
    "min_all": lambda g, a: g.min(a),
    "getitem_slice": lambda g, a: g.getitem(a, (slice(1, 3), 0)),
    "getitem_fancy": lambda g, a: g.getitem(a, np.array([0, 0, 2])),
    "reshape": lambda g, a: g.reshape(a, (4, 3)),
    "transpose": lambda g, a: g.transpose(a),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_finite_differences(name):
    check(UNARY[name], U(3, 4))


def test_positive_domain_ops():
    x = RNG.uniform(0.5, 2.0, size=(3, 4))
    check(lambda g, a: g.log(a), x)
    check(lambda g, a: g.sqrt(a), x)


BINARY = {
    "add_broadcast": (lambda g, a, b: g.add(a, b), (3, 4), (4,)),
    "sub": (lambda g, a, b: g.sub(a, b), (3, 4), (3, 1)),
    "mul": (lambda g, a, b: g.mul(a, b), (3, 4), (3, 4)),
    "matmul_2d": (lambda g, a, b: g.matmul(a, b), (3, 4), (4, 2)),
    "matmul_batch_2d": (lambda g, a, b: g.matmul(a, b), (2, 3, 4), (4, 5)),
    "matmul_batch": (lambda g, a, b: g.matmul(a, b), (2, 3, 4), (2, 4, 2)),
    "matmul_vec": (lambda g, a, b: g.matmul(a, b), (3, 4), (4,)),
    "vec_matmul": (lambda g, a, b: g.matmul(a, b), (3,), (3, 4)),
    "concat": (lambda g, a, b: g.concat([a, b], axis=0), (2, 4), (3, 4)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_ops_match_finite_differences(name):
    fn, sa, sb = BINARY[name]
    check(fn, U(*sa), U(*sb))


def test_div_matches_finite_differences():
    check(lambda g, a, b: g.div(a, b), U(3, 4), RNG.uniform(0.5, 2.0, size=(3, 4)))


def test_forward_examples():
    g = Graph()
    assert g.sigmoid(0.0).data == 0.5
    np.testing.assert_allclose(g.softmax(np.zeros(2)).data, [0.5, 0.5])
    out = g.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_product_rule():
    x, y = Value(3.0, requires_grad=True), Value(4.0, requires_grad=True)
    g = Graph()
    g.backward(g.mul(x, y), seed=1.0)
    assert x.grad == 4.0 and y.grad == 3.0


def test_sigmoid_gradient_at_zero():
    w = Value(0.0, requires_grad=True)
    g = Graph()
    g.backward(g.sigmoid(g.mul(w, 1.0)))
    num = finite_diff_gradient(lambda x: 1 / (1 + math.exp(-x[()])), np.array(0.0))
    assert w.grad == pytest.approx(0.25)
    assert float(num) == pytest.approx(0.25, abs=1e-10)


def test_detach_only_attached_factor_contributes():
    x = Value([2.0], requires_grad=True)
    g = Graph()
    g.backward(g.sum(g.mul(detach(x), x)))
    np.testing.assert_array_equal(x.grad, [2.0])


def test_detach_blocks_gradient_entirely():
    x = Value(np.ones(3), requires_grad=True)
    g = Graph()
    h = g.exp(x)
    y = g.sum(g.mul(detach(h), 2.0))
    assert not y.requires_grad
    assert x.grad is None
    d = detach(h)
    assert d.graph is None and not d.requires_grad
    np.testing.assert_array_equal(d.data, h.data)


def test_gradients_accumulate_over_paths():
    x = Value(np.array([1.5, -0.5]), requires_grad=True)
    g = Graph()
    y = g.sum(g.add(g.mul(x, x), g.scale(x, 3.0)))
    g.backward(y)
    np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)


def test_leaf_gradients_accumulate_across_backward_calls():
    x = Value(np.array([1.0]), requires_grad=True)
    for _ in range(2):
        g = Graph()
        g.backward(g.sum(g.scale(x, 2.0)))
    np.testing.assert_array_equal(x.grad, [4.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_rejects_foreign_root():
    x = Value(1.0, requires_grad=True)
    g1, g2 = Graph(), Graph()
    y = g1.exp(x)
    with pytest.raises(GraphError):
        g2.backward(y)


def test_non_scalar_root_needs_seed():
    x = Value(np.ones(3), requires_grad=True)
    g = Graph()
    y = g.exp(x)
    with pytest.raises(ShapeError):
        g.backward(y)
    with pytest.raises(ShapeError):
        g.backward(y, seed=np.ones(2))
    g.backward(y, seed=np.ones(3))
    np.testing.assert_allclose(x.grad, np.e)


def test_shape_errors_name_op_and_shapes():
    g = Graph()
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        g.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError, match="add"):
        g.add(np.ones((2, 3)), np.ones((4,)))


def test_strict_graph_rejects_non_finite():
    g = Graph(strict=True)
    with pytest.raises(NonFiniteError):
        g.exp(np.array([np.nan]))
    Graph().exp(np.array([np.nan]))  # lenient by default


def test_backward_visits_nodes_in_reverse_append_order():
    seen = []
    x = Value(np.ones(2), requires_grad=True)
    g = Graph()
    g.sum(g.exp(g.tanh(x)))
    for node in g.nodes:
        inner = node.backward
        node.backward = (lambda f, k: lambda gr: (seen.append(k), f(gr))[1])(inner, node.kind)
    g.backward(g.nodes[-1].out)
    assert seen == [n.kind for n in reversed(g.nodes)]


def test_inputs_without_grad_are_not_recorded():
    g = Graph()
    g.exp(np.ones(3))
    assert g.nodes == []
    assert g.work == 3


def test_retained_intermediate_gradient():
    x = Value(np.array([0.3, -0.2]), requires_grad=True)
    g = Graph()
    h = g.scale(x, 2.0)
    y = g.sum(g.mul(h, h))
    g.backward(y, retain=[h])
    np.testing.assert_allclose(g.grad_of(h), 2 * h.data)
    with pytest.raises(GraphError):
        g.grad_of(y)


def test_unknown_op_rejected():
    with pytest.raises(GraphError):
        Graph().evaluate("backward", Value(1.0))
    assert Graph().evaluate("sigmoid", 0.0).data == 0.5


def test_finite_diff_on_quadratic():
    assert float(finite_diff_gradient(lambda x: float(x[()] ** 2), np.array(3.0))) == pytest.approx(6.0, abs=1e-8)


def test_ties_route_extreme_gradient_to_first_index():
    x = Value(np.array([1.0, 3.0, 3.0]), requires_grad=True)
    g = Graph()
    g.backward(g.max(x))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_determinism():
    def run():
        x = Value(np.linspace(-1, 1, 12).reshape(3, 4), requires_grad=True)
        g = Graph()
        g.backward(g.sum(g.gelu(g.layer_norm(g.matmul(x, np.ones((4, 4)) * 0.3)))))
        return x.grad
    np.testing.assert_array_equal(run(), run())


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)),
              elements=st.floats(-2, 2, allow_nan=False)))
def test_softmax_layer_norm_property(a):
    g = Graph()
    s = g.softmax(a, axis=-1).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(s >= 0)
    if a.shape[-1] > 1:
        ln = g.layer_norm(a).data
        np.testing.assert_allclose(ln.mean(axis=-1), 0.0, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-2, 2, allow_nan=False)))
def test_random_inputs_gelu_sigmoid_gradients(a):
    check(lambda g, x: g.gelu(g.sigmoid(x)), a)
