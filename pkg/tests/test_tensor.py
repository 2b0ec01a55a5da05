"""Autodiff core: value semantics, tape rules, and gradient checks.

Every primitive and composite is checked against central finite
differences at float64; tape misuse (double backward, non-scalar seed,
cross-graph mixing) must raise.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from forge import tensor as T
from forge.tensor import Graph, GraphError, ShapeError, Tensor

RTOL = 1e-4  # max relative error vs finite differences at float64


def rand(rng, *shape):
    return rng.standard_normal(shape).astype(np.float64)


def check(build_loss, params, tol=RTOL):
    err = T.gradient_check(build_loss, params)
    assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol}"


# -- value oracles -------------------------------------------------------------


def test_matmul_value():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_allclose((a @ b).numpy(), [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_identity():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_allclose((Tensor(np.eye(2)) @ m).numpy(), m.numpy())


def test_matmul_associativity():
    rng = np.random.default_rng(42)
    for _ in range(10):
        a, b, c = (Tensor(rand(rng, 4, 5)), Tensor(rand(rng, 5, 6)), Tensor(rand(rng, 6, 3)))
        lhs = ((a @ b) @ c).numpy()
        rhs = (a @ (b @ c)).numpy()
        np.testing.assert_allclose(lhs, rhs, rtol=1e-6)


def test_softmax_uniform_and_overflow():
    np.testing.assert_allclose(Tensor([0.0, 0.0, 0.0]).softmax().numpy(), np.full(3, 1 / 3), rtol=1e-6)
    out = Tensor([1000.0, 1000.0]).softmax().numpy()
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.5, 0.5], rtol=1e-6)


def test_softmax_value():
    x = Tensor(np.array([0.0, np.log(3.0)], dtype=np.float64))
    np.testing.assert_allclose(x.softmax().numpy(), [0.25, 0.75], atol=1e-12)


def test_log_softmax_matches_log_of_softmax():
    rng = np.random.default_rng(0)
    x = Tensor(rand(rng, 4, 7))
    np.testing.assert_allclose(
        x.log_softmax(axis=-1).numpy(), np.log(x.softmax(axis=-1).numpy()), atol=1e-12
    )


def test_silu_value():
    x = Tensor(np.array([2.0], dtype=np.float64))
    expected = 2.0 / (1.0 + np.exp(-2.0))
    np.testing.assert_allclose(x.silu().numpy(), [expected], atol=1e-12)


def test_sigmoid_extreme_inputs_stable():
    x = Tensor(np.array([-1000.0, 1000.0], dtype=np.float64))
    out = x.sigmoid().numpy()
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-12)


def test_softmax_rows_sum_to_one_under_shift():
    rng = np.random.default_rng(1)
    x = rand(rng, 5, 9)
    out = Tensor(x + 1e4).softmax(axis=-1).numpy()
    np.testing.assert_allclose(out.sum(-1), np.ones(5), atol=1e-12)
    np.testing.assert_allclose(out, Tensor(x).softmax(axis=-1).numpy(), atol=1e-12)


def test_embedding_gathers_rows():
    w = Tensor(np.arange(12, dtype=np.float64).reshape(4, 3))
    out = T.embedding(w, np.array([2, 0, 2]))
    np.testing.assert_allclose(out.numpy(), [[6, 7, 8], [0, 1, 2], [6, 7, 8]])


def test_where_selects():
    out = T.where(np.array([True, False]), Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    np.testing.assert_allclose(out.numpy(), [1.0, 4.0])


def test_concat_and_slice_roundtrip():
    a = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
    b = Tensor(np.arange(6, 12, dtype=np.float64).reshape(2, 3))
    c = T.concat([a, b], axis=0)
    np.testing.assert_allclose(c[0:2].numpy(), a.numpy())
    np.testing.assert_allclose(c[2:4].numpy(), b.numpy())


# -- shape and dtype contracts -------------------------------------------------


def test_broadcast_trailing_dims():
    a = Tensor(np.ones((2, 3), dtype=np.float64))
    b = Tensor(np.arange(3, dtype=np.float64))
    np.testing.assert_allclose((a + b).numpy(), [[1, 2, 3], [1, 2, 3]])


def test_incompatible_shapes_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((2, 4)))


def test_matmul_inner_dim_mismatch_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))


def test_mixed_dtypes_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.ones(3, dtype=np.float32)) + Tensor(np.ones(3, dtype=np.float64))


def test_reshape_size_mismatch_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))).reshape(4, 2)


def test_embedding_id_out_of_range_rejected():
    w = Tensor(np.ones((4, 3)))
    with pytest.raises(ShapeError):
        T.embedding(w, np.array([0, 4]))


def test_invalid_axis_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))).sum(axis=2)


# -- tape discipline -----------------------------------------------------------


def test_no_graph_no_history():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * x
    assert y.graph is None and y.grad is None


def test_backward_requires_scalar_seed():
    x = Tensor(np.ones(3), requires_grad=True)
    with Graph() as g:
        y = x * x
    with pytest.raises(GraphError):
        g.backward(y)


def test_double_backward_rejected_until_reset():
    x = Tensor(np.ones(3), requires_grad=True)
    with Graph() as g:
        y = (x * x).sum()
    g.backward(y)
    with pytest.raises(GraphError):
        g.backward(y)
    g.reset()
    g.backward(y)
    np.testing.assert_allclose(g.grad(x), 2.0 * np.ones(3))


def test_cross_graph_mixing_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Graph():
        y = x * 2.0
    with Graph():
        with pytest.raises(GraphError):
            y * 3.0


def test_nested_graphs_rejected():
    with Graph():
        with pytest.raises(GraphError):
            with Graph():
                pass


def test_tape_topological_order():
    x = Tensor(np.ones(2), requires_grad=True)
    with Graph() as g:
        y = ((x * 3.0) + 1.0).sum()
    g.backward(y)
    for nid, node in enumerate(g.nodes):
        assert all(i < nid for i in node.input_ids)


def test_backward_identity_and_square():
    x = Tensor(np.array([3.0]), requires_grad=True)
    with Graph() as g:
        y = x.sum()
    g.backward(y)
    np.testing.assert_allclose(g.grad(x), [1.0])

    v = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    with Graph() as g2:
        z = (v * v).sum()
    g2.backward(z)
    np.testing.assert_allclose(g2.grad(v), [2.0, 4.0, 6.0])


def test_grad_accumulates_over_reuse():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with Graph() as g:
        y = (x * x + x).sum()  # dy/dx = 2x + 1 = 5
    g.backward(y)
    np.testing.assert_allclose(g.grad(x), [5.0])


def test_constant_branch_gets_no_grad():
    x = Tensor(np.ones(2), requires_grad=True)
    c = Tensor(np.ones(2))  # requires_grad=False
    with Graph() as g:
        y = (x * c).sum()
    g.backward(y)
    assert g.grad(c) is None
    np.testing.assert_allclose(g.grad(x), np.ones(2))


# -- gradient checks, one per primitive ----------------------------------------


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_grad_binary_elementwise(op):
    rng = np.random.default_rng(hash(op) % 2**32)
    fn = getattr(T, op)
    a = Tensor(rand(rng, 3, 4), requires_grad=True)
    b = Tensor(rand(rng, 3, 4) + 3.0, requires_grad=True)  # keep divisors away from 0
    check(lambda p: fn(p["a"], p["b"]).sum(), {"a": a, "b": b})


@pytest.mark.parametrize("op", ["add", "mul", "div"])
def test_grad_binary_broadcast(op):
    rng = np.random.default_rng(7)
    fn = getattr(T, op)
    a = Tensor(rand(rng, 2, 3, 4), requires_grad=True)
    b = Tensor(rand(rng, 4) + 3.0, requires_grad=True)
    check(lambda p: fn(p["a"], p["b"]).sum(), {"a": a, "b": b})


def test_grad_neg():
    x = Tensor(rand(np.random.default_rng(2), 5), requires_grad=True)
    check(lambda p: T.neg(p["x"]).sum(), {"x": x})


def test_grad_exp():
    x = Tensor(rand(np.random.default_rng(3), 4), requires_grad=True)
    check(lambda p: p["x"].exp().sum(), {"x": x})


def test_grad_log():
    x = Tensor(np.abs(rand(np.random.default_rng(4), 4)) + 0.5, requires_grad=True)
    check(lambda p: p["x"].log().sum(), {"x": x})


def test_grad_pow():
    x = Tensor(np.abs(rand(np.random.default_rng(5), 4)) + 0.5, requires_grad=True)
    check(lambda p: (p["x"] ** 2.5).sum(), {"x": x})


def test_grad_sqrt():
    x = Tensor(np.abs(rand(np.random.default_rng(6), 4)) + 0.5, requires_grad=True)
    check(lambda p: p["x"].sqrt().sum(), {"x": x})


@pytest.mark.parametrize("op", ["sigmoid", "silu", "tanh"])
def test_grad_activations(op):
    x = Tensor(rand(np.random.default_rng(8), 3, 5), requires_grad=True)
    check(lambda p: getattr(p["x"], op)().sum(), {"x": x})


@pytest.mark.parametrize("axis,keepdims", [(None, False), (0, False), (1, True), (-1, False)])
def test_grad_sum_mean(axis, keepdims):
    rng = np.random.default_rng(9)
    x = Tensor(rand(rng, 3, 4), requires_grad=True)
    w = Tensor(rand(rng, 3, 4), requires_grad=True)
    check(lambda p: (p["x"].sum(axis, keepdims) * 1.0).sum(), {"x": x})
    check(lambda p: (p["w"].mean(axis, keepdims) * 1.0).sum(), {"w": w})


@pytest.mark.parametrize("axis", [None, 0, 1])
def test_grad_max(axis):
    # distinct entries so the max is differentiable at the sample point
    x = Tensor(np.linspace(-1.0, 1.0, 12).reshape(3, 4) * 1.37, requires_grad=True)
    check(lambda p: (p["x"].max(axis) * 1.0).sum(), {"x": x})


def test_grad_max_ties_split():
    x = Tensor(np.array([2.0, 2.0, 1.0]), requires_grad=True)
    with Graph() as g:
        y = x.max()
    g.backward(y)
    np.testing.assert_allclose(g.grad(x), [0.5, 0.5, 0.0])


def test_grad_matmul_2d():
    rng = np.random.default_rng(10)
    a = Tensor(rand(rng, 3, 4), requires_grad=True)
    b = Tensor(rand(rng, 4, 5), requires_grad=True)
    check(lambda p: (p["a"] @ p["b"]).sum(), {"a": a, "b": b})


def test_grad_matmul_batched():
    rng = np.random.default_rng(11)
    a = Tensor(rand(rng, 2, 3, 4), requires_grad=True)
    b = Tensor(rand(rng, 2, 4, 5), requires_grad=True)
    check(lambda p: (p["a"] @ p["b"]).sum(), {"a": a, "b": b})


def test_grad_matmul_broadcast_batch():
    rng = np.random.default_rng(12)
    a = Tensor(rand(rng, 2, 3, 4), requires_grad=True)
    b = Tensor(rand(rng, 4, 5), requires_grad=True)
    check(lambda p: (p["a"] @ p["b"]).sum(), {"a": a, "b": b})


def test_grad_transpose_reshape():
    rng = np.random.default_rng(13)
    x = Tensor(rand(rng, 2, 3, 4), requires_grad=True)
    check(lambda p: p["x"].transpose(2, 0, 1).reshape(6, 4).sum(), {"x": x})


def test_grad_concat():
    rng = np.random.default_rng(14)
    a = Tensor(rand(rng, 2, 3), requires_grad=True)
    b = Tensor(rand(rng, 2, 3), requires_grad=True)
    check(lambda p: (T.concat([p["a"], p["b"]], axis=1) ** 2.0).sum(), {"a": a, "b": b})


def test_grad_slice():
    rng = np.random.default_rng(15)
    x = Tensor(rand(rng, 4, 5), requires_grad=True)
    check(lambda p: (p["x"][1:3, ::2] ** 2.0).sum(), {"x": x})


def test_grad_embedding():
    rng = np.random.default_rng(16)
    w = Tensor(rand(rng, 6, 3), requires_grad=True)
    ids = np.array([0, 2, 2, 5])
    check(lambda p: (T.embedding(p["w"], ids) ** 2.0).sum(), {"w": w})


def test_grad_where():
    rng = np.random.default_rng(17)
    a = Tensor(rand(rng, 3, 4), requires_grad=True)
    b = Tensor(rand(rng, 3, 4), requires_grad=True)
    mask = rng.random((3, 4)) < 0.5
    check(lambda p: T.where(mask, p["a"], p["b"]).sum(), {"a": a, "b": b})


@pytest.mark.parametrize("composite", ["softmax", "log_softmax"])
def test_grad_softmax_composites(composite):
    rng = np.random.default_rng(18)
    x = Tensor(rand(rng, 3, 6), requires_grad=True)
    w = rand(rng, 3, 6)  # fixed weighting so the scalar depends on every entry
    check(lambda p: (getattr(p["x"], composite)(-1) * w).sum(), {"x": x})


def test_grad_random_fuzz_suite():
    """20 random compositions of primitives, all within tolerance."""
    rng = np.random.default_rng(19)
    for trial in range(20):
        a = Tensor(rand(rng, 3, 4), requires_grad=True)
        b = Tensor(rand(rng, 4, 3), requires_grad=True)

        def loss(p):
            h = p["a"] @ p["b"]  # (3, 3)
            h = h.silu() + h.tanh() * 0.5
            h = h.softmax(-1)
            return (h * h).sum().log()

        check(loss, {"a": a, "b": b})


# -- hypothesis properties ------------------------------------------------------


finite_floats = st.floats(min_value=-10.0, max_value=10.0, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(st.lists(finite_floats, min_size=1, max_size=8))
def test_softmax_always_normalized(xs):
    out = Tensor(np.array(xs, dtype=np.float64)).softmax().numpy()
    assert np.all(out >= 0)
    assert abs(out.sum() - 1.0) < 1e-9


@settings(max_examples=50, deadline=None)
@given(
    st.lists(finite_floats, min_size=1, max_size=8),
    st.floats(min_value=-100.0, max_value=100.0, allow_nan=False),
)
def test_softmax_shift_invariant(xs, c):
    x = np.array(xs, dtype=np.float64)
    a = Tensor(x).softmax().numpy()
    b = Tensor(x + c).softmax().numpy()
    np.testing.assert_allclose(a, b, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(finite_floats, min_size=2, max_size=6))
def test_sum_linearity(xs):
    x = np.array(xs, dtype=np.float64)
    lhs = (Tensor(x) * 3.0).sum().item()
    rhs = 3.0 * Tensor(x).sum().item()
    assert abs(lhs - rhs) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=5), st.integers(min_value=1, max_value=5))
def test_transpose_involution(n, m):
    x = np.arange(n * m, dtype=np.float64).reshape(n, m)
    np.testing.assert_array_equal(Tensor(x).transpose().transpose().numpy(), x)
