import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokenmark import numgrad as ng
from tokenmark.numgrad.gradcheck import max_relative_error, numerical_grad

from graphs import n_params, random_graph


def t64(a, grad=True):
    return ng.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def test_softmax_uniform():
    out = ng.softmax(ng.Tensor(np.zeros(4)), -1)
    np.testing.assert_allclose(out.data, [0.25] * 4)


def test_matmul_identity(rng):
    x = rng.standard_normal((3, 5)).astype(np.float32)
    out = ng.matmul(ng.Tensor(np.eye(3, dtype=np.float32)), ng.Tensor(x))
    assert np.array_equal(out.data, x)


def test_sigmoid_zero():
    assert float(ng.sigmoid(ng.Tensor(np.zeros(1))).data[0]) == 0.5


def test_square_grad():
    x = t64([3.0])
    (x * x).sum().backward()
    assert x.grad[0] == 6.0


def test_sum_softmax_grad_is_zero(rng):
    x = t64(rng.standard_normal(6))
    ng.softmax(x, -1).sum().backward()
    np.testing.assert_allclose(x.grad, 0.0, atol=1e-12)


def test_backward_accumulates_without_zero_grad():
    x = t64([2.0])
    (x * x).sum().backward()
    (x * x).sum().backward()
    assert x.grad[0] == 8.0
    x.zero_grad()
    assert x.grad[0] == 0.0


def test_backward_errors():
    x = t64(np.ones(3))
    with pytest.raises(ng.GraphError):
        (x * 2.0).backward()  # non-scalar
    with pytest.raises(ng.GraphError):
        ng.Tensor(np.ones(1)).backward()  # no graph


def test_shape_error_names_primitive():
    with pytest.raises(ng.ShapeError, match="matmul"):
        ng.matmul(ng.Tensor(np.ones((2, 3))), ng.Tensor(np.ones((2, 3))))


def test_grad_buffer_present_iff_requires_grad():
    assert ng.Tensor(np.ones(2)).grad is None
    t = ng.Tensor(np.ones((2, 3)), requires_grad=True)
    assert t.grad.shape == (2, 3)


def test_reverse_topological_order():
    x = t64([1.0])
    a = x * 2.0
    b = a + x
    c = b * a
    order = c.sum().topo_order()
    pos = {id(n): i for i, n in enumerate(order)}
    assert pos[id(x)] < pos[id(a)] < pos[id(b)] < pos[id(c)]


@pytest.mark.parametrize("seed", range(10))
def test_random_graph_gradients(seed):
    f, leaves, _ = random_graph(seed)
    assert n_params(leaves) <= 500
    f().backward()
    for leaf in leaves:
        assert max_relative_error(leaf.grad, numerical_grad(f, leaf, 1e-4)) <= 1e-3


def test_backward_linearity(rng):
    x = t64(rng.standard_normal((3, 4)))
    f = lambda: ng.tanh(x).sum()  # noqa: E731
    g = lambda: (ng.sigmoid(x) * x).mean()  # noqa: E731
    f().backward()
    gf = x.grad.copy()
    x.zero_grad()
    g().backward()
    gg = x.grad.copy()
    x.zero_grad()
    (f() * 2.0 + g() * -3.0).backward()
    np.testing.assert_allclose(x.grad, 2.0 * gf - 3.0 * gg, atol=1e-6)


def test_determinism_bitwise():
    outs = []
    for _ in range(2):
        f, leaves, _ = random_graph(3)
        y = f()
        y.backward()
        outs.append((y.data.copy(), [leaf.grad.copy() for leaf in leaves]))
    assert np.array_equal(outs[0][0], outs[1][0])
    assert all(np.array_equal(a, b) for a, b in zip(outs[0][1], outs[1][1]))


def test_float32_default_and_precision_context():
    assert ng.Tensor([1.0, 2.0]).dtype == np.float32
    with ng.precision(np.float64):
        assert ng.Tensor([1.0]).dtype == np.float64
    assert ng.Tensor([1.0]).dtype == np.float32


def test_no_grad_builds_no_graph():
    x = t64([1.0])
    with ng.no_grad():
        y = x * 3.0
    assert not y.requires_grad


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_broadcast_add_mul_grads(r, c, seed):
    rng = np.random.default_rng(seed)
    a = t64(rng.standard_normal((r, c)))
    b = t64(rng.standard_normal((1, c)))
    f = lambda: (a * b + b).sum()  # noqa: E731
    f().backward()
    np.testing.assert_allclose(a.grad, np.broadcast_to(b.data, (r, c)))
    np.testing.assert_allclose(b.grad, a.data.sum(0, keepdims=True) + r)


def test_fancy_slice_accumulates_repeated_indices():
    x = t64(np.arange(4.0))
    x[np.array([0, 0, 2])].sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0, 0.0])


# -- Adam -------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = ng.Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    opt = ng.Adam({"p": p}, lr=0.1)
    for _ in range(5):
        p.grad[:] = 0
        opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert opt.state.step == 5


def test_adam_first_step_is_lr_sign():
    p = ng.Tensor(np.zeros(3, dtype=np.float64), requires_grad=True)
    state = ng.AdamState(lr=0.01)
    ng.adam_step({"p": p}, state, {"p": np.array([2.0, -0.5, 1e-3])})
    np.testing.assert_allclose(p.data, [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_constant_gradient_fixed_point():
    # with a constant gradient, m/c1 = g and v/c2 = g^2 exactly, so every update is lr * sign(g)
    p = ng.Tensor(np.zeros(2, dtype=np.float64), requires_grad=True)
    state = ng.AdamState(lr=0.1)
    g = np.array([3.0, -0.2])
    for _ in range(200):
        before = p.data.copy()
        ng.adam_step({"p": p}, state, {"p": g})
    np.testing.assert_allclose(before - p.data, 0.1 * np.sign(g), rtol=1e-6)


def test_adam_nonfinite_gradient_aborts_and_names_param():
    a = ng.Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    b = ng.Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    state = ng.AdamState()
    with pytest.raises(ng.NonFiniteGradient) as e:
        ng.adam_step({"a": a, "b": b}, state, {"a": np.ones(2), "b": np.array([np.nan, 0.0])})
    assert e.value.param == "b"
    assert state.step == 0
    np.testing.assert_array_equal(a.data, 1.0)
