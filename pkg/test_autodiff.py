"""
Reverse-mode differentiation tests

Every op is checked against central finite differences in float64 on
randomized shapes; tape bookkeeping and loss errors are checked directly.
"""

import gc
import weakref

import numpy as np
import pytest

from src import autodiff as ad
from src.autodiff import Tape, Tensor
from src.errors import LabelError, ShapeError, UsageError

TRIALS = 20
EPS = 1e-6


def _numeric_grad(fn, arrays, index, projection):
    """d/d arrays[index] of sum(fn(*arrays) * projection) by central differences."""
    target = arrays[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        saved = target[i]
        target[i] = saved + EPS
        plus = float(np.sum(fn(*[Tensor(a) for a in arrays]).data * projection))
        target[i] = saved - EPS
        minus = float(np.sum(fn(*[Tensor(a) for a in arrays]).data * projection))
        target[i] = saved
        grad[i] = (plus - minus) / (2 * EPS)
    return grad


def check_gradients(fn, arrays, rng, tolerance=1e-4):
    """Compare tape gradients of a random projection of fn's output with finite differences."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape():
        out = fn(*tensors)
        projection = rng.standard_normal(out.shape)
        ad.backward(ad.sum_all(ad.mul(out, Tensor(projection))))
    for index, tensor in enumerate(tensors):
        numeric = _numeric_grad(fn, arrays, index, projection)
        scale = max(float(np.max(np.abs(numeric))), 1e-6)
        error = float(np.max(np.abs(tensor.grad - numeric))) / scale
        assert error < tolerance, f"input {index}: relative error {error:.2e}"


def _shape(rng, rank=4, low=1, high=4):
    return tuple(int(v) for v in rng.integers(low, high + 1, size=rank))


def test_add_sub_mul_with_broadcasting():
    rng = np.random.default_rng(0)
    for _ in range(TRIALS):
        shape = _shape(rng)
        small = (1, shape[1], 1, 1)
        a, b, c = rng.standard_normal(shape), rng.standard_normal(small), rng.standard_normal(shape)
        check_gradients(lambda x, y, z: ad.mul(ad.sub(ad.add(x, y), z), y), [a, b, c], rng)


def test_relu_and_leaky_relu():
    rng = np.random.default_rng(1)
    for _ in range(TRIALS):
        x = rng.standard_normal(_shape(rng))
        check_gradients(ad.relu, [x], rng)
        check_gradients(lambda t: ad.leaky_relu(t, 0.1), [x], rng)


def test_conv2d_with_stride_dilation_and_padding():
    rng = np.random.default_rng(2)
    for _ in range(TRIALS):
        n, c_in, c_out = (int(v) for v in rng.integers(1, 3, size=3))
        kernel = int(rng.integers(1, 4))
        stride, dilation = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        padding = int(rng.integers(0, 3))
        size = int(rng.integers(dilation * (kernel - 1) + 1, 8))
        x = rng.standard_normal((n, c_in, size, size + 1))
        w = rng.standard_normal((c_out, c_in, kernel, kernel))
        b = rng.standard_normal(c_out)
        check_gradients(
            lambda xt, wt, bt: ad.conv2d(xt, wt, bt, (stride, stride), (dilation, dilation), (padding, padding)),
            [x, w, b], rng,
        )


def test_conv2d_with_asymmetric_dilation():
    rng = np.random.default_rng(3)
    for _ in range(TRIALS):
        x = rng.standard_normal((1, 2, 7, 9))
        w = rng.standard_normal((2, 2, 3, 3))
        rate = (int(rng.integers(1, 4)), int(rng.integers(1, 5)))
        check_gradients(lambda xt, wt: ad.conv2d(xt, wt, None, (1, 1), rate, rate), [x, w], rng)


def test_pointwise_conv():
    rng = np.random.default_rng(4)
    for _ in range(TRIALS):
        shape = _shape(rng)
        w = rng.standard_normal((int(rng.integers(1, 4)), shape[1], 1, 1))
        check_gradients(ad.pointwise_conv, [rng.standard_normal(shape), w], rng)


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm(training):
    rng = np.random.default_rng(5)
    for _ in range(TRIALS):
        n, c, h, w = int(rng.integers(2, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 4)), int(rng.integers(2, 4))
        x = rng.standard_normal((n, c, h, w)) * 2 + 1
        gamma, beta = rng.standard_normal(c), rng.standard_normal(c)
        mean, var = rng.standard_normal(c), rng.uniform(0.5, 2.0, c)

        def fn(xt, gt, bt):
            return ad.batch_norm(xt, gt, bt, mean.copy(), var.copy(), training=training)

        check_gradients(fn, [x, gamma, beta], rng)


def test_batch_norm_updates_running_statistics():
    x = Tensor(np.arange(8, dtype=np.float64).reshape(2, 1, 2, 2))
    mean, var = np.zeros(1), np.ones(1)
    ad.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), mean, var, training=True, momentum=0.5)
    assert mean[0] == pytest.approx(0.5 * 3.5)
    assert var[0] == pytest.approx(0.5 + 0.5 * np.var(np.arange(8), ddof=1))


def test_upsample_bilinear():
    rng = np.random.default_rng(6)
    for _ in range(TRIALS):
        shape = _shape(rng, high=5)
        out_h, out_w = int(rng.integers(1, 10)), int(rng.integers(1, 10))
        check_gradients(lambda t: ad.upsample_bilinear(t, out_h, out_w), [rng.standard_normal(shape)], rng)


def test_upsample_of_constant_map_stays_constant():
    x = Tensor(np.full((1, 2, 3, 5), 4.0))
    np.testing.assert_allclose(ad.upsample_bilinear(x, 12, 7).data, 4.0)


def test_concat():
    rng = np.random.default_rng(7)
    for _ in range(TRIALS):
        n, h, w = (int(v) for v in rng.integers(1, 4, size=3))
        parts = [rng.standard_normal((n, int(rng.integers(1, 4)), h, w)) for _ in range(3)]
        check_gradients(lambda a, b, c: ad.concat([a, b, c]), parts, rng)


def test_concat_rejects_mismatched_maps():
    with pytest.raises(ShapeError):
        ad.concat([Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 4, 5)))])


def test_weighted_cross_entropy():
    rng = np.random.default_rng(8)
    for _ in range(TRIALS):
        n, k, h, w = int(rng.integers(1, 3)), int(rng.integers(2, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        target = rng.integers(0, k, size=(n, h, w))
        target[rng.random((n, h, w)) < 0.2] = 255
        weights = rng.uniform(0.5, 2.0, k)
        check_gradients(lambda t: ad.weighted_cross_entropy(t, target, weights), [rng.standard_normal((n, k, h, w))], rng)


def test_cross_entropy_scales_with_class_weights():
    rng = np.random.default_rng(9)
    logits = rng.standard_normal((2, 3, 4, 4))
    target = rng.integers(0, 3, size=(2, 4, 4))
    weights = np.array([0.5, 1.0, 2.0])
    results = []
    for w in (weights, 2 * weights):
        x = Tensor(logits.copy(), requires_grad=True)
        with Tape():
            loss = ad.weighted_cross_entropy(x, target, w)
            ad.backward(loss)
        results.append((loss.item(), x.grad))
    assert results[1][0] == 2 * results[0][0]
    np.testing.assert_array_equal(results[1][1], 2 * results[0][1])


def test_cross_entropy_rejects_unknown_class():
    logits = Tensor(np.zeros((1, 3, 2, 2)))
    with pytest.raises(LabelError):
        ad.weighted_cross_entropy(logits, np.full((1, 2, 2), 3), np.ones(3))


def test_cross_entropy_of_fully_ignored_target_is_zero():
    logits = Tensor(np.zeros((1, 3, 2, 2)), requires_grad=True)
    with Tape():
        loss = ad.weighted_cross_entropy(logits, np.full((1, 2, 2), 255), np.ones(3))
        ad.backward(loss)
    assert loss.item() == 0.0
    assert not logits.grad.any()


# Values and linear structure
def test_relu_and_leaky_relu_values():
    assert ad.leaky_relu(Tensor(np.array([-1.0])), 0.1).data[0] == pytest.approx(-0.1)
    assert ad.relu(Tensor(np.array([-3.0]))).data[0] == 0.0
    np.testing.assert_array_equal(ad.relu(Tensor(np.array([0.0, 2.5]))).data, [0.0, 2.5])


def test_identity_convolutions_return_their_input():
    x = np.random.default_rng(10).standard_normal((2, 3, 4, 5))
    eye = np.eye(3)[:, :, None, None]
    np.testing.assert_allclose(ad.conv2d(Tensor(x), Tensor(eye)).data, x)
    np.testing.assert_allclose(ad.pointwise_conv(Tensor(x), Tensor(eye)).data, x)


def test_pointwise_conv_with_unit_weights_sums_channels():
    x = np.random.default_rng(11).standard_normal((2, 2, 3, 3))
    out = ad.pointwise_conv(Tensor(x), Tensor(np.ones((1, 2, 1, 1)))).data
    np.testing.assert_allclose(out[:, 0], x.sum(axis=1))


def test_dilated_conv_equals_zero_dilated_kernel():
    rng = np.random.default_rng(12)
    for rate in [(2, 2), (3, 3), (2, 4)]:
        x = rng.standard_normal((2, 3, 13, 15))
        w = rng.standard_normal((4, 3, 3, 3))
        spread = np.zeros((4, 3, 2 * rate[0] + 1, 2 * rate[1] + 1))
        spread[:, :, ::rate[0], ::rate[1]] = w
        dilated = ad.conv2d(Tensor(x), Tensor(w), None, (1, 1), rate, rate).data
        explicit = ad.conv2d(Tensor(x), Tensor(spread), None, (1, 1), (1, 1), rate).data
        np.testing.assert_allclose(dilated, explicit, atol=1e-12)


def test_same_padding_keeps_size_for_wide_rates():
    assert ad.conv_output_size(64, 3, 1, 6, 6) == 64
    assert ad.conv_output_size(64, 3, 1, 21, 21) == 64
    out = ad.conv2d(Tensor(np.zeros((1, 1, 64, 64))), Tensor(np.ones((1, 1, 3, 3))), None,
                    (1, 1), (6, 21), (6, 21))
    assert out.shape == (1, 1, 64, 64)


def test_upsample_two_by_two_by_hand():
    x = Tensor(np.array([[[[0.0, 4.0], [8.0, 12.0]]]]))
    expected = [[0, 1, 3, 4], [2, 3, 5, 6], [6, 7, 9, 10], [8, 9, 11, 12]]
    np.testing.assert_allclose(ad.upsample_bilinear(x, 4, 4).data[0, 0], expected)


def test_linear_composition_scales_gradients():
    """conv, pointwise conv, concat and upsample are linear in their input."""
    rng = np.random.default_rng(13)
    w3, w1 = rng.standard_normal((3, 2, 3, 3)), rng.standard_normal((2, 2, 1, 1))
    projection = rng.standard_normal((1, 5, 8, 10))

    def composite(x):
        both = ad.concat([ad.conv2d(x, Tensor(w3), None, (1, 1), (1, 1), (1, 1)), ad.pointwise_conv(x, Tensor(w1))])
        return ad.upsample_bilinear(both, 8, 10)

    def grad_of(x, alpha):
        xt = Tensor(x.copy(), requires_grad=True)
        with Tape():
            ad.backward(ad.sum_all(ad.mul(composite(xt), Tensor(alpha * projection))))
        return xt.grad

    x = rng.standard_normal((1, 2, 4, 5))
    base = grad_of(x, 1.0)
    for alpha in (0.5, -2.0, 3.0):
        np.testing.assert_allclose(grad_of(x, alpha), alpha * base, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(grad_of(alpha * x, 1.0), base, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(composite(Tensor(alpha * x)).data, alpha * composite(Tensor(x)).data,
                                   rtol=1e-10, atol=1e-12)


# Tape bookkeeping
def test_nothing_is_recorded_without_a_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    assert ad.current_tape() is None
    y = ad.mul(x, x)
    assert not y.requires_grad
    with pytest.raises(UsageError):
        ad.backward(ad.sum_all(y))


def test_backward_needs_a_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        assert ad.current_tape() is tape
        y = ad.mul(x, 2.0)
        with pytest.raises(UsageError):
            ad.backward(y)


def test_backward_releases_the_recorded_graph():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    with Tape() as tape:
        hidden = ad.relu(ad.mul(x, 2.0))
        loss = ad.sum_all(hidden)
        ad.backward(loss)
    released = weakref.ref(hidden)
    del hidden
    gc.collect()
    assert released() is None
    assert len(tape) == 0
    np.testing.assert_array_equal(x.grad, np.full((2, 3), 2.0))
    with pytest.raises(UsageError):
        ad.backward(loss)


def test_gradients_accumulate_over_reused_inputs():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    with Tape():
        ad.backward(ad.sum_all(ad.mul(x, x)))
    np.testing.assert_allclose(x.grad, [2.0, -4.0, 6.0])


def test_plain_numbers_keep_tensor_dtype():
    x = Tensor(np.ones(4, dtype=np.float32))
    assert ad.add(x, 1.5).dtype == np.float32
    assert ad.mul(0.25, x).dtype == np.float32


def test_conv_output_size():
    assert ad.conv_output_size(192, 3, 2, 1, 1) == 96
    assert ad.conv_output_size(12, 3, 1, 6, 6) == 12
