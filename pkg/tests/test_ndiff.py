import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from peclr.ndiff import Graph, GraphError, NonFiniteError, backward, forward, grad_check


def naive_conv(x, w, b, stride):
    n, h, wd, cin = x.shape
    cout = w.shape[3]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    out = np.zeros((n, ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, i * stride:i * stride + 3, j * stride:j * stride + 3, :]
            out[:, i, j, :] = np.einsum("nabc,abcd->nd", patch, w) + b
    return out


def test_dense_identity():
    g = Graph()
    x = g.input("x", (1, 2))
    g.output("y", g.dense(x, g.param("w", np.eye(2)), g.param("b", np.zeros(2))))
    assert np.array_equal(forward(g, {"x": np.array([[1.0, 2.0]])})["y"], [[1.0, 2.0]])


def test_relu_forward():
    g = Graph()
    x = g.input("x", (2,))
    g.output("y", g.relu(x))
    assert np.array_equal(forward(g, {"x": np.array([-1.0, 2.0])})["y"], [0.0, 2.0])


def test_zero_kernel_conv_is_zero():
    g = Graph()
    x = g.input("x", (2, 8, 8, 3))
    g.output("y", g.conv2d(x, g.param("w", np.zeros((3, 3, 3, 4)))))
    y = forward(g, {"x": np.random.default_rng(0).normal(size=(2, 8, 8, 3))})["y"]
    assert y.shape == (2, 8, 8, 4)
    assert not y.any()


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_loop(stride):
    rng = np.random.default_rng(stride)
    x = rng.normal(size=(2, 7, 6, 3))
    w, b = rng.normal(size=(3, 3, 3, 5)), rng.normal(size=5)
    g = Graph()
    xi = g.input("x", x.shape)
    g.output("y", g.conv2d(xi, g.param("w", w), g.param("b", b), stride=stride))
    np.testing.assert_allclose(forward(g, {"x": x})["y"], naive_conv(x, w, b, stride), atol=1e-12)


def test_square_gradient():
    g = Graph()
    x = g.param("x", np.array(3.0))
    g.output("f", g.mul(x, x))
    forward(g, {})
    assert backward(g, {"f": 1.0})["x"] == 6.0


def test_relu_sum_gradient():
    g = Graph()
    x = g.param("x", np.array([-1.0, 2.0]))
    g.output("f", g.sum(g.relu(x)))
    forward(g, {})
    assert np.array_equal(backward(g, {"f": 1.0})["x"], [0.0, 1.0])


def test_backward_before_forward():
    g = Graph()
    x = g.param("x", np.ones(2))
    g.output("f", g.sum(x))
    with pytest.raises(GraphError):
        backward(g, {"f": 1.0})


def test_unreachable_param_gets_zero():
    g = Graph()
    x = g.param("x", np.ones(3))
    g.param("unused", np.ones((2, 2)))
    g.output("f", g.sum(x))
    forward(g, {})
    grads = backward(g, {"f": 1.0})
    assert np.array_equal(grads["unused"], np.zeros((2, 2)))


def test_input_shape_mismatch():
    g = Graph()
    x = g.input("x", (2, 3))
    g.output("y", g.relu(x))
    with pytest.raises(GraphError):
        forward(g, {"x": np.zeros((3, 2))})


def test_nonfinite_reports_node():
    g = Graph()
    x = g.input("x", (2,))
    lg = g.log(x)
    g.output("y", lg)
    with pytest.raises(NonFiniteError) as e:
        forward(g, {"x": np.array([1.0, 0.0])})
    assert e.value.node_id == lg.id


def test_bad_shapes_rejected_at_build():
    g = Graph()
    x = g.input("x", (2, 3))
    with pytest.raises(GraphError):
        g.dense(x, g.param("w", np.zeros((4, 2))))
    with pytest.raises(GraphError):
        g.add(x, g.const(np.zeros((3, 2))))


def test_grad_check_linear():
    g = Graph()
    x = np.array([0.3, -1.2, 2.0])
    w = g.param("w", np.array([1.0, 2.0, -0.5]))
    g.output("f", g.sum(g.mul(w, g.const(x))))
    rep = grad_check(g, {})
    assert rep.max_rel_error < 1e-8
    assert rep.checked == 3


def test_grad_check_flags_kink():
    g = Graph()
    w = g.param("w", np.array([0.0, 1.5]))
    g.output("f", g.sum(g.relu(w)))
    rep = grad_check(g, {})
    assert rep.skipped == [("w", 0)]
    assert rep.checked == 1
    assert rep.max_rel_error < 1e-8


def test_grad_check_step_must_be_positive():
    g = Graph()
    g.output("f", g.sum(g.param("w", np.ones(2))))
    with pytest.raises(ValueError):
        grad_check(g, {}, step=0.0)


def _mlp_cosine_graph(seed):
    """2-layer MLP on two inputs scored by cosine similarity."""
    rng = np.random.default_rng(seed)
    g = Graph()
    a, b = g.input("a", (4, 5)), g.input("b", (4, 5))
    w1, b1 = g.param("w1", rng.normal(size=(5, 6))), g.param("b1", rng.normal(size=6) * 0.1)
    w2, b2 = g.param("w2", rng.normal(size=(6, 3))), g.param("b2", rng.normal(size=3) * 0.1)
    ha = g.dense(g.relu(g.dense(a, w1, b1)), w2, b2)
    hb = g.dense(g.relu(g.dense(b, w1, b1)), w2, b2)
    cos = g.sum(g.mul(g.l2norm(ha, axis=1), g.l2norm(hb, axis=1)), axis=1)
    g.output("f", g.sum(cos))
    inputs = {"a": rng.normal(size=(4, 5)), "b": rng.normal(size=(4, 5))}
    return g, inputs


@pytest.mark.parametrize("seed", range(3))
def test_mlp_cosine_head_gradients(seed):
    g, inputs = _mlp_cosine_graph(seed)
    assert grad_check(g, inputs, max_coords=None).max_rel_error < 1e-4


def _primitive_graphs():
    rng = np.random.default_rng(7)
    cases = {}

    def make(name, build, shape, lo=-1.0, hi=1.0):
        g = Graph()
        p = g.param("p", rng.uniform(lo, hi, size=shape))
        g.output("f", build(g, p))
        cases[name] = g

    make("dense", lambda g, p: g.dense(p, g.param("w", rng.normal(size=(3, 2))), g.param("b", rng.normal(size=2))), (4, 3))
    make("conv2d", lambda g, p: g.conv2d(p, g.param("w", rng.normal(size=(3, 3, 2, 3))), g.param("b", rng.normal(size=3)), stride=2), (2, 5, 6, 2))
    make("relu", lambda g, p: g.relu(p), (3, 4))
    make("mean_pool", lambda g, p: g.mean_pool(p), (2, 3, 3, 2))
    make("flatten", lambda g, p: g.flatten(p), (2, 3, 2))
    make("reshape", lambda g, p: g.reshape(p, (3, 4)), (2, 6))
    make("add_bias", lambda g, p: g.add(p, g.param("b", rng.normal(size=4))), (3, 4))
    make("mul", lambda g, p: g.mul(p, g.param("q", rng.normal(size=(3, 4)))), (3, 4))
    make("matmul", lambda g, p: g.matmul(p, g.param("q", rng.normal(size=(4, 2)))), (3, 4))
    make("matmul_t", lambda g, p: g.matmul(p, p, trans_b=True), (3, 4))
    make("sum_axis", lambda g, p: g.sum(p, axis=1), (3, 4))
    make("mean_keep", lambda g, p: g.mean(p, axis=0, keepdims=True), (3, 4))
    make("l2norm", lambda g, p: g.l2norm(p, axis=1), (3, 4))
    make("log", lambda g, p: g.log(p), (3, 4), 0.5, 2.0)
    make("exp", lambda g, p: g.exp(p), (3, 4))
    make("softmax", lambda g, p: g.softmax(p, axis=1), (3, 4))
    make("concat", lambda g, p: g.concat([p, g.param("q", rng.normal(size=(3, 2)))], axis=1), (3, 4))
    make("abs", lambda g, p: g.abs(p), (3, 4), 0.2, 1.0)
    return cases


@pytest.mark.parametrize("name", sorted(_primitive_graphs()))
def test_primitive_gradients(name):
    g = _primitive_graphs()[name]
    rep = grad_check(g, {}, max_coords=None, seed=3)
    assert rep.max_rel_error < 1e-4, (name, rep.worst)


def test_backward_linear_in_output_grad():
    g, inputs = _mlp_cosine_graph(5)
    forward(g, inputs)
    g1 = backward(g, {"f": 1.0})
    g2 = backward(g, {"f": 2.0})
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=0, atol=1e-12)


def test_forward_deterministic():
    g, inputs = _mlp_cosine_graph(9)
    a = forward(g, inputs)["f"].tobytes()
    b = forward(g, inputs)["f"].tobytes()
    assert a == b


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=20, size=(3, 5))
    g = Graph()
    xi = g.input("x", x.shape)
    g.output("y", g.softmax(xi, axis=1))
    y = forward(g, {"x": x})["y"]
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)


def test_l2norm_zero_row_is_error():
    g = Graph()
    x = g.input("x", (2, 3))
    g.output("y", g.l2norm(x, axis=1))
    with pytest.raises((NonFiniteError, ValueError)):
        forward(g, {"x": np.zeros((2, 3))})
