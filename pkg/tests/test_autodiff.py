import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vtm import autodiff as ad
from vtm.autodiff import DomainError, ShapeError

from fd import numeric_grad, rel_error


def param64(a):
    return ad.Node(np.array(a, dtype=np.float64), requires_grad=True)


def check_unary(op, x, weights=None, h=1e-3):
    """Gradient of sum(w * op(x)) against central differences, in float64."""
    x = np.array(x, dtype=np.float64)
    with ad.precision(np.float64):
        node = param64(x)
        out = op(node)
        w = np.random.default_rng(1).normal(size=out.shape) if weights is None else weights
        loss = ad.sum_all(ad.mul(out, ad.constant(w)))
        ad.backward(loss)
        num = numeric_grad(lambda: float((op(ad.constant(x)).value * w).sum()), x, h)
    return rel_error(node.grad, num)


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    out = ad.matmul(ad.constant([[1.0, 0.0], [0.0, 1.0]]), ad.constant([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.value, [[3.0], [4.0]])


def test_matmul_row_by_col():
    out = ad.matmul(ad.constant([[1.0, 2.0]]), ad.constant([[3.0], [4.0]]))
    assert out.value.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((2, 3))))


def test_matmul_grad_rows_are_column_sums_of_b():
    rng = np.random.default_rng(0)
    with ad.precision(np.float64):
        a = param64(rng.normal(size=(3, 4)))
        b = ad.constant(rng.normal(size=(4, 2)))
        ad.backward(ad.sum_all(ad.matmul(a, b)))
        num = numeric_grad(lambda: (a.value @ b.value).sum(), a.value)
    np.testing.assert_allclose(a.grad, np.tile(b.value.sum(axis=1), (3, 1)), rtol=1e-12)
    assert rel_error(a.grad, num) < 1e-3


def test_matmul_broadcast_weight_grad():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 4))
    with ad.precision(np.float64):
        w = param64(rng.normal(size=(4, 5)))
        ad.backward(ad.sum_all(ad.matmul(ad.constant(x), w)))
        num = numeric_grad(lambda: (x @ w.value).sum(), w.value)
    assert rel_error(w.grad, num) < 1e-6


# ---------------------------------------------------------------- softmax


def test_softmax_symmetric_row():
    np.testing.assert_allclose(ad.softmax_rows(ad.constant([[0.0, 0.0]])).value, [[0.5, 0.5]])


def test_softmax_log2_row():
    out = ad.softmax_rows(ad.constant([[np.log(2.0), 0.0]])).value
    np.testing.assert_allclose(out, [[2 / 3, 1 / 3]], atol=1e-7)


def test_softmax_gradient():
    x = np.random.default_rng(2).normal(size=(2, 5))
    assert check_unary(ad.softmax_rows, x) < 1e-3


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (3, 6), elements=st.floats(-20, 20)),
    st.floats(-50, 50),
)
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    y = ad.softmax_rows(ad.constant(x.astype(np.float32))).value
    y_shift = ad.softmax_rows(ad.constant((x + c).astype(np.float32))).value
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(y >= 0)
    np.testing.assert_allclose(y, y_shift, atol=1e-6)


# ---------------------------------------------------------------- elementwise & shape ops


@pytest.mark.parametrize(
    "op",
    [
        ad.tanh_elem,
        ad.transpose,
        ad.mean_rows,
        ad.layer_norm_rows,
        lambda a: ad.scale(a, -2.5),
        lambda a: ad.add(a, ad.constant(np.arange(4.0))),
        lambda a: ad.add(a, a),
        lambda a: ad.mul(a, a),
        lambda a: ad.gather_rows(a, [2, 0, 2, 1]),
        lambda a: ad.segment_mean(a, [0, 1, 0], [1.0, 2.0, 3.0]),
        lambda a: ad.reshape(a, (4, 3)),
        lambda a: ad.permute(ad.reshape(a, (3, 2, 2)), (1, 2, 0)),
    ],
    ids=["tanh", "transpose", "mean_rows", "layer_norm", "scale", "add_bcast", "add_self",
         "mul_self", "gather_dup", "segment_mean", "reshape", "permute"],
)
def test_primitive_gradients(op):
    x = np.random.default_rng(5).normal(size=(3, 4))
    assert check_unary(op, x) < 1e-3


def test_cross_entropy_and_mse_gradients():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 3))
    labels = np.array([0, 2, 1, 2])
    with ad.precision(np.float64):
        node = param64(x)
        ad.backward(ad.cross_entropy(node, labels))
        num = numeric_grad(lambda: ad.cross_entropy(ad.constant(x), labels).value, x)
        assert rel_error(node.grad, num) < 1e-3
        t = rng.normal(size=(4, 3))
        node = param64(x)
        ad.backward(ad.mse(node, t))
        num = numeric_grad(lambda: ad.mse(ad.constant(x), t).value, x)
        assert rel_error(node.grad, num) < 1e-3


def test_attention_core_gradients():
    rng = np.random.default_rng(11)
    shapes = (2, 2, 5, 3)
    vals = [rng.normal(size=shapes) for _ in range(3)]
    bias = rng.normal(size=(2, 5))
    w = rng.normal(size=shapes)

    def loss(q, k, v, b):
        return float((ad.attention_core(ad.constant(q), ad.constant(k), ad.constant(v), ad.constant(b), 0.7).value * w).sum())

    with ad.precision(np.float64):
        nodes = [param64(v) for v in vals] + [param64(bias)]
        out = ad.attention_core(*nodes, 0.7)
        ad.backward(ad.sum_all(ad.mul(out, ad.constant(w))))
        arrays_ = [n.value for n in nodes]
        for node, arr in zip(nodes, arrays_):
            num = numeric_grad(lambda: loss(*arrays_), arr)
            assert rel_error(node.grad, num) < 1e-3


# ---------------------------------------------------------------- segment_mean


def test_segment_mean_plain_average():
    out = ad.segment_mean(ad.constant([[2.0], [4.0], [6.0]]), [0, 0, 0], [1, 1, 1])
    assert out.value.tolist() == [[4.0]]


def test_segment_mean_singletons_are_identity():
    out = ad.segment_mean(ad.constant([[2.0], [4.0]]), [0, 1], [1, 1])
    assert out.value.tolist() == [[2.0], [4.0]]


def test_segment_mean_size_weighted():
    out = ad.segment_mean(ad.constant([[1.0], [3.0]]), [0, 0], [3, 1])
    np.testing.assert_allclose(out.value, [[1.5]])


def test_segment_mean_rejects_bad_weights_and_ids():
    x = ad.constant(np.ones((2, 1)))
    with pytest.raises(DomainError):
        ad.segment_mean(x, [0, 0], [1.0, 0.0])
    with pytest.raises(IndexError):
        ad.segment_mean(x, [0, 3], [1.0, 1.0], n_segments=2)


def test_segment_mean_backward_distributes_by_weight():
    with ad.precision(np.float64):
        x = param64([[1.0], [3.0], [5.0]])
        ad.backward(ad.sum_all(ad.segment_mean(x, [0, 0, 1], [3.0, 1.0, 2.0])))
    np.testing.assert_allclose(x.grad[:, 0], [0.75, 0.25, 1.0])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, (7, 3), elements=st.floats(-1e3, 1e3, width=32)))
def test_segment_mean_single_segment_is_mean(x):
    out = ad.segment_mean(ad.constant(x), np.zeros(7, dtype=int)).value
    np.testing.assert_allclose(out[0], x.astype(np.float64).mean(axis=0), rtol=1e-6, atol=1e-6 * max(1.0, np.abs(x).max()))


def test_gather_rows_out_of_range():
    with pytest.raises(IndexError):
        ad.gather_rows(ad.constant(np.zeros((2, 2))), [0, 2])


# ---------------------------------------------------------------- backward


def test_backward_sum_gives_ones():
    x = ad.parameter(np.random.default_rng(0).normal(size=(2, 3, 4)))
    ad.backward(ad.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_half_square_gives_x():
    x = ad.parameter(np.random.default_rng(0).normal(size=(3, 3)))
    ad.backward(ad.scale(ad.sum_all(ad.mul(x, x)), 0.5))
    np.testing.assert_allclose(x.grad, x.value, rtol=1e-6)


def test_backward_needs_scalar_root():
    with pytest.raises(ShapeError):
        ad.backward(ad.parameter(np.zeros((2, 2))))


def test_backward_is_deterministic():
    def run():
        rng = np.random.default_rng(4)
        a = ad.parameter(rng.normal(size=(5, 6)))
        b = ad.parameter(rng.normal(size=(6, 3)))
        y = ad.softmax_rows(ad.layer_norm_rows(a) @ b)
        ad.backward(ad.sum_all(ad.mul(y, y)))
        return a.grad.copy(), b.grad.copy()

    (a1, b1), (a2, b2) = run(), run()
    assert a1.tobytes() == a2.tobytes() and b1.tobytes() == b2.tobytes()


def test_unreached_parameter_gets_no_gradient():
    a = ad.parameter(np.ones((2, 2)))
    b = ad.parameter(np.ones((2, 2)))
    ad.backward(ad.sum_all(a))
    assert b.grad is None


def test_no_grad_builds_no_graph():
    a = ad.parameter(np.ones((2, 2)))
    with ad.no_grad():
        out = ad.tanh_elem(a)
    assert out.parents == () and not out.requires_grad


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, (4, 5), elements=st.floats(-30, 30, width=32)))
def test_primitives_stay_finite(x):
    node = ad.constant(x)
    for out in (ad.softmax_rows(node), ad.tanh_elem(node), ad.layer_norm_rows(node)):
        assert np.all(np.isfinite(out.value))
