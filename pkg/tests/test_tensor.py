import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alacarte import tensor as T
from alacarte.errors import ConfigError, LabelError, NumericError, ShapeError


def f64(arr, requires_grad=False):
    return T.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


def test_ops_without_tape_record_nothing():
    a = f64([[1.0, 2.0]], requires_grad=True)
    b = f64([[3.0], [4.0]], requires_grad=True)
    out = T.matmul(a, b)
    assert out.requires_grad is False
    assert out.grad is None
    np.testing.assert_allclose(out.data, [[11.0]])


def test_backward_reverse_order_and_accumulation():
    x = f64([2.0, -1.0], requires_grad=True)
    with T.GradTape() as tape:
        y = T.add(x, x)            # 2x
        z = T.scale(y, 3.0)        # 6x
        loss = T.cross_entropy(z, 0)
    tape.backward(loss)
    # d/dx of CE(6x) at x=(2,-1): 6 * (softmax(12,-6) - onehot0)
    p = np.exp([12.0, -6.0])
    p /= p.sum()
    np.testing.assert_allclose(x.grad, 6.0 * (p - np.array([1.0, 0.0])), rtol=1e-12)


def test_scalar_loss_required():
    x = f64([[1.0, 2.0]], requires_grad=True)
    with T.GradTape() as tape:
        y = T.scale(x, 2.0)
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_branch_reuse_sums_gradients():
    x = f64([1.5], requires_grad=True)
    with T.GradTape() as tape:
        a = T.scale(x, 2.0)
        b = T.scale(x, 5.0)
        s = T.add(a, b)
        loss = T.reshape(s, ())
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [7.0])


def test_matmul_shape_error_names_shapes():
    a = f64(np.zeros((2, 3)))
    b = f64(np.zeros((4, 2)))
    with pytest.raises(ShapeError, match=r"\(2, 3\)"):
        T.matmul(a, b)


def test_bias_add_sums_over_leading_axes():
    rng = np.random.default_rng(0)
    x = f64(rng.normal(size=(4, 3, 5)), requires_grad=True)
    b = f64(rng.normal(size=5), requires_grad=True)
    with T.GradTape() as tape:
        y = T.bias_add(x, b)
        loss = T.cross_entropy(T.reshape(y, (12, 5)), np.zeros(12, dtype=int))
    tape.backward(loss)
    assert b.grad.shape == (5,)
    np.testing.assert_allclose(b.grad, x.grad.reshape(-1, 5).sum(axis=0), rtol=1e-10)


def test_concat_slice_round_trip_gradients():
    a = f64(np.arange(6.0).reshape(2, 3), requires_grad=True)
    b = f64(np.arange(6.0, 14.0).reshape(2, 4), requires_grad=True)
    with T.GradTape() as tape:
        joined = T.concat([a, b], axis=1)
        left = T.slice_axis(joined, 1, 0, 3)
        loss = T.cross_entropy(left, [0, 1])
    tape.backward(loss)
    assert a.grad is not None
    np.testing.assert_allclose(b.grad, np.zeros((2, 4)))


def test_expand_leading_sums_back():
    w = f64(np.ones((2, 2)), requires_grad=True)
    with T.GradTape() as tape:
        tiled = T.expand_leading(w, 5)
        loss = T.cross_entropy(T.reshape(tiled, (10, 2)), np.zeros(10, dtype=int))
    tape.backward(loss)
    assert tiled.shape == (5, 2, 2)
    # 5 replicas of (softmax([1,1]) - onehot0) / 10 per row
    np.testing.assert_allclose(w.grad, [[-0.25, 0.25], [-0.25, 0.25]], rtol=1e-12)


def test_softmax_nan_input_rejected():
    x = f64([np.nan, 1.0])
    with pytest.raises(NumericError):
        T.softmax(x)


def test_cross_entropy_label_out_of_range():
    x = f64([[0.0, 1.0]])
    with pytest.raises(LabelError):
        T.cross_entropy(x, [2])


def test_cross_entropy_known_value():
    x = f64([1.0, 2.0, 3.0])
    loss = T.cross_entropy(x, 2)
    assert abs(loss.item() - 0.40760596) < 1e-7


def test_grad_check_requires_float64():
    p = T.parameter(np.zeros(2, dtype=np.float32))
    with pytest.raises(ConfigError):
        T.grad_check(lambda: T.cross_entropy(p, 0), [p])


def test_grad_check_composite_graph():
    rng = np.random.default_rng(7)
    w1 = T.parameter(rng.normal(size=(4, 6)).astype(np.float64))
    b1 = T.parameter(rng.normal(size=6).astype(np.float64))
    gamma = T.parameter(np.ones(6, dtype=np.float64))
    beta = T.parameter(np.zeros(6, dtype=np.float64))
    w2 = T.parameter(rng.normal(size=(6, 3)).astype(np.float64))
    x = T.constant(rng.normal(size=(5, 4)).astype(np.float64))
    labels = rng.integers(0, 3, size=5)

    def f():
        h = T.gelu(T.bias_add(T.matmul(x, w1), b1))
        h = T.layernorm(h, gamma, beta)
        probs_in = T.matmul(h, w2)
        return T.cross_entropy(T.softmax(probs_in), labels)

    err = T.grad_check(f, [w1, b1, gamma, beta, w2])
    assert err < 1e-4


def test_bmm_matches_loop_of_matmuls():
    rng = np.random.default_rng(3)
    a = f64(rng.normal(size=(3, 2, 4)), requires_grad=True)
    b = f64(rng.normal(size=(3, 4, 5)), requires_grad=True)
    with T.GradTape() as tape:
        out = T.bmm(a, b)
        loss = T.cross_entropy(T.reshape(out, (6, 5)), np.zeros(6, dtype=int))
    tape.backward(loss)
    expected = np.stack([a.data[i] @ b.data[i] for i in range(3)])
    np.testing.assert_allclose(out.data, expected, rtol=1e-12)
    assert a.grad.shape == a.shape and b.grad.shape == b.shape


def test_transpose_inverse_permutation():
    x = f64(np.arange(24.0).reshape(2, 3, 4), requires_grad=True)
    with T.GradTape() as tape:
        y = T.transpose(x, (2, 0, 1))
        loss = T.cross_entropy(T.reshape(y, (6, 4)), np.zeros(6, dtype=int))
    tape.backward(loss)
    assert y.shape == (4, 2, 3)
    assert x.grad.shape == (2, 3, 4)


@settings(deadline=None, max_examples=50)
@given(
    st.lists(st.floats(-30, 30), min_size=2, max_size=8),
    st.floats(-10, 10),
)
def test_softmax_rows_sum_to_one_and_shift_invariant(row, shift):
    x = np.asarray([row], dtype=np.float64)
    y = T.softmax(T.Tensor(x)).data
    y_shifted = T.softmax(T.Tensor(x + shift)).data
    assert abs(y.sum() - 1.0) < 1e-9
    np.testing.assert_allclose(y, y_shifted, atol=1e-9)
    assert (y > 0).all()


@settings(deadline=None, max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_layernorm_rows_zero_mean_unit_var(seed):
    rng = np.random.default_rng(seed)
    x = T.Tensor(rng.normal(scale=3.0, size=(4, 8)).astype(np.float64))
    gamma = T.constant(np.ones(8, dtype=np.float64))
    beta = T.constant(np.zeros(8, dtype=np.float64))
    y = T.layernorm(x, gamma, beta).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-7)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-4)


def test_precision_context_switches_default():
    assert T.default_dtype() == np.float32
    with T.precision("f64"):
        t = T.Tensor([1, 2, 3])
        assert t.dtype == np.float64
    assert T.default_dtype() == np.float32
