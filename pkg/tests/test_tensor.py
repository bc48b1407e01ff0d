import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chansearch import tensor as T
from chansearch.tensor import DimensionError, Tensor

from conftest import numeric_grad, rel_err


def naive_conv(x, w, b, stride, pad):
    B, C, H, W = x.shape
    F, _, k, _ = w.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad:pad + H, pad:pad + W] = x
    out = np.zeros((B, F, Ho, Wo))
    for n in range(B):
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[f] if b is not None else 0.0
                    for c in range(C):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[n, c, i * stride + u, j * stride + v] * w[f, c, u, v]
                    out[n, f, i, j] = acc
    return out


# conv2d ----------------------------------------------------------------------

def test_conv_all_ones():
    out = T.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1), 1, 0)
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 9.0


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 5, 4))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(T.conv2d(x, w, None, 1, 1).data, x)


def test_conv_matches_loop_reference(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    np.testing.assert_allclose(T.conv2d(x, w, b, 1, 1).data, naive_conv(x, w, b, 1, 1), rtol=0, atol=1e-12)


@given(B=st.integers(1, 4), C=st.integers(1, 4), F=st.integers(1, 4), H=st.integers(1, 8), W=st.integers(1, 8),
       k=st.sampled_from([1, 3]), stride=st.integers(1, 2), pad=st.integers(0, 1), seed=st.integers(0, 9999))
def test_conv_loop_reference_property(B, C, F, H, W, k, stride, pad, seed):
    if k > min(H, W) + 2 * pad:
        return
    r = np.random.default_rng(seed)
    x, w, b = r.standard_normal((B, C, H, W)), r.standard_normal((F, C, k, k)), r.standard_normal(F)
    np.testing.assert_allclose(T.conv2d(x, w, b, stride, pad).data, naive_conv(x, w, b, stride, pad),
                               rtol=0, atol=1e-12)


def test_conv_output_size_formula():
    assert T.conv_output_size(7, 3, 2, 1) == 4
    assert T.conv_output_size(32, 3, 1, 1) == 32
    assert T.conv_output_size(32, 1, 2, 0) == 16


def test_conv_channel_mismatch_names_axes():
    with pytest.raises(DimensionError, match="channel"):
        T.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((3, 5, 3, 3)), None, 1, 1)


def test_conv_kernel_larger_than_input():
    with pytest.raises(DimensionError):
        T.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 5, 5)), None, 1, 0)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv_gradients(rng, stride, pad):
    x = Tensor(rng.standard_normal((2, 2, 5, 5)), True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), True)
    b = Tensor(rng.standard_normal(3), True)
    proj = rng.standard_normal(T.conv2d(x, w, b, stride, pad).shape)

    def f():
        return float((T.conv2d(x.data, w.data, b.data, stride, pad).data * proj).sum())

    T.backward(T.sum_(T.conv2d(x, w, b, stride, pad) * proj))
    for t in (x, w, b):
        assert rel_err(t.grad, numeric_grad(f, t.data)) < 1e-4


# elementwise and reductions --------------------------------------------------

def _check_unary(op, data):
    a = Tensor(data.copy(), True)
    proj = np.random.default_rng(5).standard_normal(op(Tensor(data)).shape)
    T.backward(T.sum_(op(a) * proj))
    num = numeric_grad(lambda: float((op(Tensor(a.data)).data * proj).sum()), a.data)
    return rel_err(a.grad, num)


@pytest.mark.parametrize("name,op,lo", [
    ("exp", T.exp, -2.0), ("log", T.log, 0.5), ("relu", T.relu, -2.0),
    ("square", lambda t: t ** 2, -2.0), ("softmax", lambda t: T.softmax(t, -1), -2.0),
    ("mean", lambda t: T.mean(t, axis=1), -2.0), ("reshape", lambda t: t.reshape(6, 2) * 3.0, -2.0),
    ("recip", lambda t: 1.0 / t, 0.5), ("neg", lambda t: -t, -2.0),
])
def test_unary_gradients(rng, name, op, lo):
    data = rng.uniform(lo, lo + 3.0, size=(3, 4))
    if name == "relu":
        data[np.abs(data) < 1e-3] = 0.5  # stay off the kink
    assert _check_unary(op, data) < 1e-4


@given(seed=st.integers(0, 10_000), shape_a=st.sampled_from([(3, 4), (1, 4), (3, 1), (4,), ()]))
def test_broadcast_binary_gradients(seed, shape_a):
    r = np.random.default_rng(seed)
    a = Tensor(r.uniform(0.5, 2.0, shape_a), True)
    b = Tensor(r.uniform(0.5, 2.0, (3, 4)), True)
    for op in (T.add, T.sub, T.mul, T.div):
        a.grad = b.grad = None
        T.backward(T.sum_(op(a, b)))
        for t in (a, b):
            num = numeric_grad(lambda: float(op(a.data, b.data).data.sum()), t.data)
            assert t.grad.shape == t.shape
            assert rel_err(t.grad, num) < 1e-4


def test_matmul_and_linear_gradients(rng):
    x = Tensor(rng.standard_normal((3, 4)), True)
    w = Tensor(rng.standard_normal((5, 4)), True)
    b = Tensor(rng.standard_normal(5), True)
    proj = rng.standard_normal((3, 5))
    T.backward(T.sum_(T.linear(x, w, b) * proj))
    f = lambda: float(((x.data @ w.data.T + b.data) * proj).sum())
    for t in (x, w, b):
        assert rel_err(t.grad, numeric_grad(f, t.data)) < 1e-4

    v = Tensor(rng.standard_normal(4), True)
    m = Tensor(rng.standard_normal((4, 2)), True)
    T.backward(T.sum_(v @ m))
    np.testing.assert_allclose(v.grad, m.data.sum(axis=1))
    np.testing.assert_allclose(m.grad, np.repeat(v.data[:, None], 2, axis=1))


def test_stack_gradient(rng):
    parts = [Tensor(rng.standard_normal(3), True) for _ in range(4)]
    proj = rng.standard_normal((4, 3))
    T.backward(T.sum_(T.stack(parts) * proj))
    for i, p in enumerate(parts):
        np.testing.assert_allclose(p.grad, proj[i])


def test_relu_values():
    np.testing.assert_array_equal(T.relu(np.array([-1.0, 2.0])).data, [0.0, 2.0])


def test_global_avg_pool_constant():
    out = T.global_avg_pool(np.full((2, 3, 4, 5), 1.75))
    np.testing.assert_array_equal(out.data, np.full((2, 3), 1.75))


def test_global_avg_pool_gradient(rng):
    x = Tensor(rng.standard_normal((2, 3, 2, 2)), True)
    proj = rng.standard_normal((2, 3))
    T.backward(T.sum_(T.global_avg_pool(x) * proj))
    assert rel_err(x.grad, np.repeat(np.repeat(proj[:, :, None, None] / 4, 2, 2), 2, 3)) < 1e-12


# cross-entropy -------------------------------------------------------------

def test_cross_entropy_uniform():
    assert abs(float(T.softmax_cross_entropy(np.zeros((1, 2)), [0]).data) - np.log(2)) < 1e-15


def test_cross_entropy_is_batch_mean(rng):
    logits = rng.standard_normal((5, 3))
    labels = np.array([0, 2, 1, 1, 0])
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    ref = -np.mean(np.log(p[np.arange(5), labels]))
    assert abs(float(T.softmax_cross_entropy(logits, labels).data) - ref) < 1e-12


def test_cross_entropy_gradient(rng):
    z = Tensor(rng.standard_normal((4, 3)), True)
    y = np.array([2, 0, 1, 2])
    T.backward(T.softmax_cross_entropy(z, y))
    num = numeric_grad(lambda: float(T.softmax_cross_entropy(z.data, y).data), z.data)
    assert rel_err(z.grad, num) < 1e-4


def test_cross_entropy_stable_for_large_logits():
    loss = T.softmax_cross_entropy(np.array([[1000.0, 0.0]]), [0])
    assert np.isfinite(loss.data) and float(loss.data) < 1e-12


@pytest.mark.parametrize("bad", [[-1, 0], [0, 3]])
def test_cross_entropy_label_range(bad):
    with pytest.raises(ValueError, match="class range"):
        T.softmax_cross_entropy(np.zeros((2, 3)), bad)


# dropout ---------------------------------------------------------------------

def test_dropout_p0_identity(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(T.dropout(x, 0.0, True, rng).data, x)


def test_dropout_eval_identity(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(T.dropout(x, 0.2, False).data, x)


def test_dropout_keep_rate_and_scaling():
    r = np.random.default_rng(0)
    out = T.dropout(np.ones(200_000), 0.5, True, r).data
    kept = out != 0
    assert abs(kept.mean() - 0.5) < 0.02
    np.testing.assert_array_equal(out[kept], 2.0)


def test_dropout_gradient_uses_same_mask():
    x = Tensor(np.ones(1000), True)
    out = T.dropout(x, 0.3, True, np.random.default_rng(1))
    T.backward(T.sum_(out))
    np.testing.assert_array_equal(x.grad, out.data)


@pytest.mark.parametrize("p", [1.0, 1.5, -0.1])
def test_dropout_rejects_bad_p(p):
    with pytest.raises(ValueError):
        T.dropout(np.ones(3), p, True, np.random.default_rng(0))


def test_dropout_training_needs_rng():
    with pytest.raises(ValueError, match="rng"):
        T.dropout(np.ones(3), 0.5, True, None)


# backward --------------------------------------------------------------------

def test_square_sum_gradient():
    w = Tensor(np.array([3.0]), True)
    T.backward(T.sum_(w * w))
    np.testing.assert_array_equal(w.grad, [6.0])


def test_constant_loss_zero_grads():
    w = Tensor(np.array([1.0, -2.0]), True)
    T.backward(T.sum_(w * 0.0) + 4.0)
    np.testing.assert_array_equal(w.grad, [0.0, 0.0])


def test_backward_rejects_non_scalar():
    w = Tensor(np.ones(3), True)
    with pytest.raises(DimensionError):
        T.backward(w * 2.0)


def test_backward_rejects_non_finite():
    w = Tensor(np.array([0.0]), True)
    with pytest.raises(FloatingPointError), np.errstate(divide="ignore"):
        T.backward(T.sum_(T.log(w)))


@given(k=st.integers(1, 6), seed=st.integers(0, 1000))
def test_sum_of_copies_scales_gradient(k, seed):
    r = np.random.default_rng(seed)
    data = r.standard_normal((2, 3))

    def grad_of(copies):
        w = Tensor(data.copy(), True)
        total = None
        for _ in range(copies):
            term = T.sum_(T.exp(w) * w)
            total = term if total is None else total + term
        T.backward(total)
        return w.grad

    np.testing.assert_allclose(grad_of(k), k * grad_of(1), rtol=1e-13)


def test_shared_subexpression_gradient():
    w = Tensor(np.array([2.0]), True)
    h = w * w
    T.backward(T.sum_(h * h + h))  # w^4 + w^2
    np.testing.assert_allclose(w.grad, [4 * 8 + 2 * 2])


def test_graph_cleared_after_backward():
    w = Tensor(np.array([1.0]), True)
    loss = T.sum_(w * 3.0)
    T.backward(loss)
    assert loss._parents == () and loss._backward is None


def test_grads_accumulate_across_backwards():
    w = Tensor(np.array([1.0]), True)
    T.backward(T.sum_(w * 2.0))
    T.backward(T.sum_(w * 3.0))
    np.testing.assert_array_equal(w.grad, [5.0])
