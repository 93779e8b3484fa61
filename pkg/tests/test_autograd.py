import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from oracles import naive_conv2d, naive_dense
from terracov.autograd import (
    Tensor,
    _node,
    add,
    avg_pool2d,
    backward,
    conv2d,
    dense,
    dropout,
    flatten,
    gaussian_noise,
    grad_check,
    mse_loss,
    relative_error,
    relu,
)


def random_conv_case(rng):
    n = int(rng.integers(1, 3))
    c_in = int(rng.integers(1, 4))
    c_out = int(rng.integers(1, 4))
    k = int(rng.choice([1, 2, 3]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    h = int(rng.integers(k, 8))
    w = int(rng.integers(k, 8))
    return (
        rng.normal(size=(n, c_in, h, w)),
        rng.normal(size=(c_out, c_in, k, k)),
        rng.normal(size=c_out),
        stride,
        pad,
    )


def total(t):
    """Sum of all entries as a scalar node."""
    return _node(np.array(t.data.sum()), (t,), lambda g: t._accumulate(np.full(t.shape, float(g))))


# ---------------------------------------------------------------------------
# conv2d


def test_conv_1x1_kernel_scales():
    x = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = conv2d(x, Tensor([[[[2.0]]]]), Tensor([0.0]))
    assert_array_equal(out.data[0, 0], [[2, 4], [6, 8]])


def test_conv_all_ones_sums():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9


def test_conv_matches_naive_loop_stride2_pad1():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    assert out.shape == (2, 4, 4, 4)
    assert np.max(np.abs(out - naive_conv2d(x, w, b, 2, 1))) < 1e-12


def test_conv_matches_naive_loop_random_shapes():
    rng = np.random.default_rng(1)
    for _ in range(20):
        x, w, b, s, p = random_conv_case(rng)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=s, padding=p).data
        assert np.max(np.abs(out - naive_conv2d(x, w, b, s, p))) < 1e-12


def test_conv_is_linear_without_bias():
    rng = np.random.default_rng(2)
    x, w = rng.normal(size=(1, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3))
    # a power-of-two scale is exact in floating point, so linearity holds bit for bit
    a = conv2d(Tensor(4.0 * x), Tensor(w), padding=1).data
    assert_array_equal(a, 4.0 * conv2d(Tensor(x), Tensor(w), padding=1).data)
    b = conv2d(Tensor(-1.5 * x), Tensor(w), padding=1).data
    assert_allclose(b, -1.5 * conv2d(Tensor(x), Tensor(w), padding=1).data, rtol=1e-12, atol=1e-14)


def test_conv_channel_mismatch():
    with pytest.raises(ValueError):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_conv_kernel_larger_than_input():
    with pytest.raises(ValueError):
        conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


def test_conv_floor_output_size():
    out = conv2d(Tensor(np.ones((1, 1, 32, 32))), Tensor(np.ones((1, 1, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, 1, 16, 16)


# ---------------------------------------------------------------------------
# dense and simple ops


def test_dense_identity():
    x = np.arange(6.0).reshape(2, 3)
    assert_array_equal(dense(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)


def test_dense_dot_product():
    out = dense(Tensor([[1.0, 2.0]]), Tensor([[1.0], [1.0]]), Tensor([0.5]))
    assert_array_equal(out.data, [[3.5]])


def test_dense_matches_naive_loop():
    rng = np.random.default_rng(3)
    for _ in range(10):
        n, fin, fout = rng.integers(1, 6, size=3)
        x, w, b = rng.normal(size=(n, fin)), rng.normal(size=(fin, fout)), rng.normal(size=fout)
        assert np.max(np.abs(dense(Tensor(x), Tensor(w), Tensor(b)).data - naive_dense(x, w, b))) < 1e-12


def test_dense_shape_mismatch():
    with pytest.raises(ValueError):
        dense(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 1))))


def test_relu_values_and_subgradient():
    x = Tensor([-1.0, 2.0, 3.0, -3.0, 0.0], requires_grad=True)
    y = relu(x)
    assert_array_equal(y.data, [0, 2, 3, 0, 0])
    backward(total(y))
    assert_array_equal(x.grad, [0, 1, 1, 0, 0])


def test_avg_pool_block_mean():
    out = avg_pool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2)
    assert out.data.item() == 2.5


def test_avg_pool_constant():
    assert_array_equal(avg_pool2d(Tensor(np.full((1, 2, 4, 4), 7.0)), 2).data, 7.0)


def test_avg_pool_backward_spreads():
    x = Tensor(np.zeros((1, 1, 4, 4)), requires_grad=True)
    backward(total(avg_pool2d(x, 2)))
    assert_array_equal(x.grad, 0.25)


def test_avg_pool_non_divisible():
    with pytest.raises(ValueError):
        avg_pool2d(Tensor(np.ones((1, 1, 3, 3))), 2)


def test_flatten_shape_and_backward():
    x = Tensor(np.arange(4 * 128 * 2 * 2, dtype=float).reshape(4, 128, 2, 2), requires_grad=True)
    y = flatten(x)
    assert y.shape == (4, 512)
    assert_array_equal(y.data.reshape(x.shape), x.data)
    backward(total(y))
    assert x.grad.shape == x.shape


def test_dropout_eval_is_identity():
    x = Tensor(np.ones(10))
    assert dropout(x, 0.5, train=False) is x


def test_dropout_rate_zero_identity_in_train():
    x = Tensor(np.ones(10))
    assert dropout(x, 0.0, train=True, rng=np.random.default_rng(0)) is x


def test_dropout_preserves_mean():
    out = dropout(Tensor(np.ones(10**6)), 0.5, train=True, rng=np.random.default_rng(0))
    assert abs(out.data.mean() - 1.0) < 0.01
    assert set(np.unique(out.data)) == {0.0, 2.0}


def test_dropout_rate_one_rejected():
    with pytest.raises(ValueError):
        dropout(Tensor(np.ones(3)), 1.0, train=True, rng=np.random.default_rng(0))


def test_noise_identity_cases():
    x = Tensor(np.ones(5))
    assert gaussian_noise(x, 0.0, train=True, rng=np.random.default_rng(0)) is x
    assert gaussian_noise(x, 0.3, train=False) is x


def test_noise_sample_sd():
    out = gaussian_noise(Tensor(np.zeros(10**6)), 0.05, train=True, rng=np.random.default_rng(0))
    assert abs(out.data.std() / 0.05 - 1) < 0.02


def test_noise_passes_gradient():
    x = Tensor(np.zeros(4), requires_grad=True)
    backward(total(gaussian_noise(x, 1.0, train=True, rng=np.random.default_rng(0))))
    assert_array_equal(x.grad, 1.0)


def test_mse_values():
    assert mse_loss(Tensor([1.0, 2.0]), [1.0, 2.0]).data == 0.0
    assert mse_loss(Tensor([0.0, 2.0]), [1.0, 3.0]).data == 1.0


def test_mse_gradient_formula():
    pred = Tensor([0.5, -1.0, 2.0], requires_grad=True)
    target = np.array([1.0, 1.0, 1.0])
    backward(mse_loss(pred, target))
    assert_allclose(pred.grad, 2 * (pred.data - target) / 3)


# ---------------------------------------------------------------------------
# backward


def test_backward_identity_chain():
    x = Tensor(3.0, requires_grad=True)
    backward(x)
    assert x.grad == 1.0


def test_backward_accumulates_fan_out():
    x = Tensor(3.0, requires_grad=True)
    backward(add(x, x))
    assert x.grad == 2.0


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        backward(Tensor(np.ones(2), requires_grad=True))


def test_backward_skips_constants():
    x = Tensor(np.ones((1, 2)), requires_grad=True)
    w = Tensor(np.ones((2, 1)))
    backward(mse_loss(dense(x, w), [0.0]))
    assert x.grad is not None and w.grad is None


# ---------------------------------------------------------------------------
# gradient checks


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-12, 0.0) == pytest.approx(1e-4)


def test_grad_check_linear_function_is_exact():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(3, 4)), name="x")
    w = Tensor(rng.normal(size=(4, 1)), name="w")
    target = rng.normal(size=3)
    report = grad_check(lambda: mse_loss(dense(x, w), target), [x, w])
    assert report.worst < 1e-8


def test_grad_check_relu_away_from_zero():
    x = Tensor(np.array([[-2.0, -0.5, 0.7, 1.5]]), name="x")
    w = Tensor(np.ones((4, 1)), name="w")
    report = grad_check(lambda: mse_loss(dense(relu(x), w), [0.3]), [x, w])
    assert report.passed and sum(report.skipped_kinks.values()) == 0


def test_grad_check_skips_kink_probes():
    x = Tensor(np.array([[1e-7, 1.0]]), name="x")
    w = Tensor(np.ones((2, 1)), name="w")
    report = grad_check(lambda: mse_loss(dense(relu(x), w), [0.0]), [x, w])
    assert report.skipped_kinks["x"] == 1


def test_grad_check_each_layer_type():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(2, 2, 6, 6)), name="x")
    w = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.5, name="w")
    b = Tensor(rng.normal(size=3), name="b")
    dw = Tensor(rng.normal(size=(27, 1)) * 0.3, name="dw")
    db = Tensor(rng.normal(size=1), name="db")
    target = rng.normal(size=2)
    drop_seed = 7

    def fn():
        h = gaussian_noise(x, 0.1, train=True, rng=np.random.default_rng(drop_seed))
        h = relu(conv2d(h, w, b, stride=2, padding=1))
        h = dropout(h, 0.3, train=True, rng=np.random.default_rng(drop_seed + 1))
        h = flatten(avg_pool2d(h, 1))
        return mse_loss(dense(h, dw, db), target)

    report = grad_check(fn, [x, w, b, dw, db])
    assert report.passed, report.summary()


def test_grad_check_pooling_and_stride_one():
    rng = np.random.default_rng(6)
    x = Tensor(rng.normal(size=(2, 1, 4, 4)), name="x")
    w = Tensor(rng.normal(size=(2, 1, 3, 3)), name="w")
    report = grad_check(lambda: mse_loss(flatten(avg_pool2d(conv2d(x, w, padding=1), 4)), [[0.1, 0.2], [0.3, 0.4]]), [x, w])
    assert report.passed, report.summary()
