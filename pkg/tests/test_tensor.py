import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gated_res2net import tensor as T
from gated_res2net.gradcheck import primitive_cases
from gated_res2net.tensor import DimensionError, Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_add_broadcast_gradient_sums_over_expanded_axes():
    a = leaf(np.ones((2, 3)))
    b = leaf(np.ones(3))
    T.sum_all(T.add(a, b)).backward()
    np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
    np.testing.assert_array_equal(b.grad, np.full(3, 2.0))


def test_mul_and_operators():
    a = leaf([1.0, 2.0])
    b = leaf([3.0, 4.0])
    loss = T.sum_all(a * b - (-a) + 1.0)
    loss.backward()
    np.testing.assert_array_equal(a.grad, [4.0, 5.0])
    np.testing.assert_array_equal(b.grad, [1.0, 2.0])


def test_gradients_accumulate_across_reuse():
    a = leaf([2.0])
    T.sum_all(a * a * a).backward()
    np.testing.assert_allclose(a.grad, [12.0])


def test_backward_needs_scalar():
    a = leaf(np.ones(3))
    with pytest.raises(DimensionError):
        T.relu(a).backward()


def test_backward_seed_shape_checked():
    a = leaf(np.ones(3))
    out = T.relu(a)
    with pytest.raises(DimensionError):
        out.backward(np.ones(2))


def test_no_grad_records_nothing():
    a = leaf([1.0])
    with T.no_grad():
        out = a * a
    assert not out.requires_grad
    assert out._parents == ()


def test_relu_is_zero_below_and_identity_above():
    x = leaf([-1.0, 0.0, 2.0])
    out = T.relu(x)
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])
    T.sum_all(out).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_sigmoid_strictly_inside_unit_interval_at_extremes():
    for dtype in (np.float32, np.float64):
        s = T.sigmoid(Tensor(np.array([-1e4, -50.0, 0.0, 50.0, 1e4], dtype=dtype))).data
        assert np.all(s > 0) and np.all(s < 1)
        assert s[2] == 0.5


def test_log_softmax_matches_closed_form():
    x = np.array([[1.0, -1.0], [3.0, 3.0]])
    out = T.log_softmax(Tensor(x)).data
    np.testing.assert_allclose(out[0, 0], -np.log1p(np.exp(-2.0)), rtol=1e-14)
    np.testing.assert_allclose(out[1], [-np.log(2)] * 2, rtol=1e-14)


def test_log_softmax_stable_for_large_logits():
    out = T.log_softmax(Tensor(np.array([1000.0, 0.0]))).data
    assert np.all(np.isfinite(out))
    assert out[0] == 0.0


def test_mean_over_empty_axes_is_identity():
    x = leaf(np.arange(6.0).reshape(2, 3))
    assert T.mean_over(x, ()) is x


def test_split_channels_requires_divisibility():
    x = Tensor(np.zeros((1, 6, 2, 2)))
    with pytest.raises(DimensionError):
        T.split_channels(x, 4)


def test_split_then_concat_roundtrip():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 8, 3, 3)))
    parts = T.split_channels(x, 4)
    assert [p.shape[1] for p in parts] == [2, 2, 2, 2]
    np.testing.assert_array_equal(T.concat_channels(parts).data, x.data)


def test_channel_mul_shape_checks():
    with pytest.raises(DimensionError):
        T.channel_mul(Tensor(np.zeros((2, 3, 4, 4))), Tensor(np.zeros((2, 4))))


def test_dense_shapes_and_values():
    x = np.array([[1.0, 2.0]])
    w = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, 1.0]])
    out = T.dense(Tensor(x), Tensor(w), Tensor(np.array([0.5, 0.5, 0.5])))
    np.testing.assert_array_equal(out.data, [[1.5, 2.5, 4.5]])
    with pytest.raises(DimensionError):
        T.dense(Tensor(np.zeros((1, 3))), Tensor(w))


def test_conv2d_identity_kernel():
    x = np.random.default_rng(1).standard_normal((1, 1, 4, 5))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(w)).data, x)


def test_conv2d_unbatched_input():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 5, 5))
    w = rng.standard_normal((2, 3, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(w))
    np.testing.assert_allclose(out.data, T.conv2d(Tensor(x[None]), Tensor(w)).data[0])


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_batch_norm_normalises_each_channel():
    x = np.random.default_rng(3).standard_normal((4, 3, 5, 5)) * 3 + 2
    out, mean, var = T.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), var / (var + 1e-5), rtol=1e-10)
    np.testing.assert_allclose(mean, x.mean(axis=(0, 2, 3)), rtol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_primitive_gradients(seed):
    for name, f, xs in primitive_cases(np.random.default_rng(seed)):
        err = T.grad_check(f, xs)
        assert err <= 1e-6, (name, err)


def test_grad_check_detects_wrong_gradient():
    def bad(x):
        out = x.data * 2
        return T._result(out.sum(keepdims=False).reshape(()), (x,), lambda g: (np.full(x.shape, 3.0) * g,))

    assert T.grad_check(bad, leaf(np.ones(3))) > 0.1


def test_grad_check_restores_state():
    x = leaf(np.ones(2))
    x.requires_grad = False
    T.grad_check(lambda t: T.sum_all(t * t), x)
    assert x.requires_grad is False and x.grad is None


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-30, 30)))
def test_sigmoid_range_property(v):
    s = T.sigmoid(Tensor(v)).data
    assert np.all((s > 0) & (s < 1))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 5)), elements=st.floats(-50, 50)))
def test_log_softmax_rows_normalise(v):
    out = T.log_softmax(Tensor(v)).data
    np.testing.assert_allclose(np.exp(out).sum(axis=-1), 1.0, rtol=1e-12)
    assert np.all(out <= 0)
