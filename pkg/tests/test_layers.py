import numpy as np
import pytest

from polsarnet import layers as L
from polsarnet.tensor import DOUBLE, ShapeError, Tensor, make_rng


def conv2d_ref(x, kernel, bias=None):
    """Nested-loop convolution oracle with same-size zero padding."""
    n, cin, h, w = x.shape
    kout, _, kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((n, kout, h, w))
    for ni in range(n):
        for ko in range(kout):
            for i in range(h):
                for j in range(w):
                    acc = 0.0
                    for ci in range(cin):
                        for di in range(kh):
                            for dj in range(kw):
                                ii, jj = i + di - ph, j + dj - pw
                                if 0 <= ii < h and 0 <= jj < w:
                                    acc += x[ni, ci, ii, jj] * kernel[ko, ci, di, dj]
                    out[ni, ko, i, j] = acc + (bias[ko] if bias is not None else 0.0)
    return out


def depthwise_ref(x, depth, point, bias):
    """Per-channel 3x3 filtering followed by a 1x1 cross-channel mix."""
    n, c, h, w = x.shape
    mid = np.zeros((n, c, h, w))
    for ci in range(c):
        mid[:, ci] = conv2d_ref(x[:, ci : ci + 1], depth[ci][None, None], None)[:, 0]
    k = point.shape[0]
    out = np.zeros((n, k, h, w))
    for ko in range(k):
        for ci in range(c):
            out[:, ko] += point[ko, ci, 0, 0] * mid[:, ci]
        out[:, ko] += bias[ko]
    return out


def test_conv2d_matches_oracle():
    rng = np.random.default_rng(0)
    for n, c, h, w, k, ks in ((2, 3, 5, 6, 4, 3), (1, 1, 4, 4, 2, 1), (2, 2, 6, 5, 3, 5)):
        x = rng.normal(size=(n, c, h, w))
        kern = rng.normal(size=(k, c, ks, ks))
        bias = rng.normal(size=(k,))
        out = L.conv2d(
            Tensor(x.astype(DOUBLE)), Tensor(kern.astype(DOUBLE)), Tensor(bias.astype(DOUBLE))
        )
        assert np.max(np.abs(out.data - conv2d_ref(x, kern, bias))) < 1e-12


def test_conv2d_rejects_even_kernel():
    with pytest.raises(ShapeError):
        L.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))


def test_depthwise_separable_matches_oracle():
    rng = np.random.default_rng(3)
    n, c, h, w, k = 2, 4, 5, 6, 3
    x = rng.normal(size=(n, c, h, w))
    depth = rng.normal(size=(c, 3, 3))
    point = rng.normal(size=(k, c, 1, 1))
    bias = rng.normal(size=(k,))
    unit = L.DepthwiseSeparableConv2D("sep", c, k, make_rng(0), dtype=DOUBLE)
    unit.depthwise.data[:] = depth
    unit.pointwise.data[:] = point
    unit.bias.data[:] = bias
    out = unit(Tensor(x.astype(DOUBLE)))
    assert np.max(np.abs(out.data - depthwise_ref(x, depth, point, bias))) < 1e-12


def test_separable_weight_count_formula():
    # 3x3 per-channel filters plus the 1x1 mixing table, biases excluded
    unit = L.DepthwiseSeparableConv2D("sep", 9, 32, make_rng(0))
    assert unit.weight_count() == 9 * 9 + 9 * 32 == 369
    conv = L.Conv2D("conv", 9, 32, make_rng(0))
    assert conv.weight_count() == 32 * 9 * 9 == 2592


def test_max_pool_drops_trailing_odd_row_and_column():
    x = np.arange(25.0).reshape(1, 1, 5, 5)
    out = L.max_pool2d(Tensor(x))
    assert out.shape == (1, 1, 2, 2)
    assert np.array_equal(out.data[0, 0], [[6, 8], [16, 18]])


def test_max_pool_tie_routes_grad_to_first_row_major():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    L.max_pool2d(x).sum().backward()
    assert np.array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_max_pool_requires_window_eq_stride():
    with pytest.raises(ShapeError):
        L.max_pool2d(Tensor(np.zeros((1, 1, 4, 4))), window=2, stride=1)


def test_batch_norm_training_uses_biased_variance():
    rng = np.random.default_rng(5)
    x = rng.normal(2.0, 3.0, size=(6, 2, 4, 4))
    bn = L.BatchNorm2D("bn", 2, dtype=DOUBLE)
    out = bn(Tensor(x.astype(DOUBLE)), training=True)
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)  # biased, ddof=0
    ref = (x - mu) / np.sqrt(var + bn.eps)
    assert np.max(np.abs(out.data - ref)) < 1e-12


def test_batch_norm_rejects_single_sample_training():
    bn = L.BatchNorm2D("bn", 3)
    with pytest.raises(ShapeError):
        bn(Tensor(np.zeros((1, 3, 4, 4))), training=True)


def test_batch_norm_running_stats_and_eval():
    rng = np.random.default_rng(11)
    bn = L.BatchNorm2D("bn", 1, dtype=DOUBLE)
    run_mean, run_var = 0.0, 1.0
    for _ in range(5):
        x = rng.normal(1.5, 2.0, size=(8, 1, 3, 3))
        bn(Tensor(x), training=True)
        run_mean = (1 - bn.momentum) * run_mean + bn.momentum * x.mean()
        run_var = (1 - bn.momentum) * run_var + bn.momentum * x.var()
    assert np.allclose(bn.running_mean, [run_mean], atol=1e-12)
    assert np.allclose(bn.running_var, [run_var], atol=1e-12)

    x = rng.normal(size=(4, 1, 3, 3))
    out = bn(Tensor(x), training=False)
    ref = (x - run_mean) / np.sqrt(run_var + bn.eps)
    assert np.max(np.abs(out.data - ref)) < 1e-12


def test_batch_norm_scale_shift_learnable():
    bn = L.BatchNorm2D("bn", 2)
    x = Tensor(np.random.default_rng(0).normal(size=(4, 2, 3, 3)).astype(np.float32))
    bn(x, training=True).sum().backward()
    assert bn.scale.grad is not None
    assert bn.shift.grad is not None


def test_dropout_layer_eval_is_identity():
    drop = L.Dropout("d", 0.5)
    drop.seed(make_rng(0))
    x = Tensor(np.ones((3, 3)))
    out = drop(x, training=False)
    assert np.array_equal(out.data, x.data)


def test_dropout_scales_survivors():
    drop = L.Dropout("d", 0.25)
    drop.seed(make_rng(42))
    x = Tensor(np.ones((100, 100)))
    out = drop(x, training=True)
    survivor = out.data.dtype.type(1.0) / out.data.dtype.type(0.75)
    assert np.all((out.data == 0.0) | (out.data == survivor))
    # observed drop fraction within 4 sigma of p
    frac = float((out.data == 0).mean())
    assert abs(frac - 0.25) < 4 * np.sqrt(0.25 * 0.75 / 10000)


def test_dropout_zero_probability_is_identity():
    drop = L.Dropout("d", 0.0)
    x = Tensor(np.ones(5))
    assert drop(x, training=True) is x


def test_dropout_requires_seeding():
    drop = L.Dropout("d", 0.5)
    with pytest.raises(RuntimeError):
        drop(Tensor(np.ones(4)), training=True)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(2)
    out = L.softmax(Tensor(rng.normal(size=(6, 9)).astype(DOUBLE)))
    assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-12)


def test_softmax_cross_entropy_matches_manual():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(5, 3))
    labels = np.array([0, 2, 1, 1, 0])
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    ref = -np.log(p[np.arange(5), labels]).mean()
    out = L.softmax_cross_entropy(Tensor(logits.astype(DOUBLE)), labels)
    assert abs(out.item() - ref) < 1e-12


def test_softmax_cross_entropy_uniform_is_log_c():
    for c in (2, 5, 9):
        logits = Tensor(np.zeros((4, c), dtype=DOUBLE))
        out = L.softmax_cross_entropy(logits, np.zeros(4, dtype=int))
        assert abs(out.item() - np.log(c)) < 1e-12


def test_softmax_cross_entropy_rejects_bad_labels():
    logits = Tensor(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        L.softmax_cross_entropy(logits, np.array([0, 3]))


def test_weighted_sum_selector():
    a = Tensor(np.array([1.0, 2.0]))
    b = Tensor(np.array([10.0, 20.0]))
    w = Tensor(np.array([1.0, 0.0]), requires_grad=True)
    out = L.weighted_sum([a, b], w)
    assert np.array_equal(out.data, a.data)
    out.sum().backward()
    assert np.allclose(w.grad, [3.0, 30.0])


def test_weighted_sum_initialized_to_mean():
    ws = L.WeightedSum("blend", 3)
    assert np.allclose(ws.weights.data, 1 / 3)


def test_conv_unit_weight_counts():
    rng = make_rng(0)
    vanilla = L.ConvUnit("u1", "vanilla", 4, 8, 0.0, rng)
    assert vanilla.weight_count() == 8 * 4 * 9
    sep = L.ConvUnit("u2", "separable", 4, 8, 0.0, rng)
    assert sep.weight_count() == 9 * 4 + 4 * 8


def test_conv_unit_output_nonnegative():
    rng = make_rng(1)
    unit = L.ConvUnit("u", "vanilla", 3, 5, 0.0, rng)
    x = Tensor(np.random.default_rng(0).normal(size=(3, 3, 6, 6)).astype(np.float32))
    out = unit(x, training=True)
    assert out.shape == (3, 5, 6, 6)
    assert np.all(out.data >= 0)  # the unit ends in a rectifier


def test_dense_block_channel_arithmetic():
    rng = make_rng(0)
    big = L.DenseBlock("d1", 128, 16, 4, 0.0, rng)
    assert big.out_channels == 256
    small = L.DenseBlock("d2", 48, 12, 2, 0.0, rng)
    assert small.out_channels == 120


def test_dense_block_forward_shape_and_concat():
    rng = make_rng(3)
    block = L.DenseBlock("d", 6, 4, 2, 0.0, rng)
    x = Tensor(np.random.default_rng(1).normal(size=(2, 6, 5, 5)).astype(np.float32))
    out = block(x, training=False)
    assert out.shape == (2, block.out_channels, 5, 5)
    # the input passes through unchanged as the first slice of the concat
    assert np.array_equal(out.data[:, :6], x.data)


def test_dense_layer_forward():
    rng = make_rng(0)
    d = L.Dense("fc", 4, 3, rng, dtype=DOUBLE)
    x = np.random.default_rng(2).normal(size=(5, 4))
    out = d(Tensor(x))
    assert np.allclose(out.data, x @ d.weight.data + d.bias.data, atol=1e-12)


def test_he_initialization_statistics():
    rng = make_rng(123)
    conv = L.Conv2D("c", 32, 64, rng)
    std = conv.kernel.data.std()
    expect = np.sqrt(2.0 / (32 * 9))
    assert abs(std - expect) / expect < 0.05
    assert not conv.bias.data.any()
