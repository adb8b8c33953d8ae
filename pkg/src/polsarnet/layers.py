"""Network building blocks and their gradients.

Functional ops first (conv2d, depthwise conv, pooling, softmax losses),
then layer classes that own parameters. Convolutions are stride-1 with
zero padding that preserves the spatial size; pooling is the only
downsampler. Forward passes record backward closures on the tape from
`tensor.py`, so nothing here implements its own graph walking.

Shapes follow the (batch, channels, height, width) convention.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (
    SINGLE,
    ShapeError,
    Tensor,
    as_tensor,
    check_finite,
    concat,
    matmul,
    relu,
    tracking,
)

__all__ = [
    "conv2d",
    "depthwise_conv2d",
    "max_pool2d",
    "dropout",
    "softmax",
    "softmax_cross_entropy",
    "weighted_sum",
    "Conv2D",
    "DepthwiseSeparableConv2D",
    "BatchNorm2D",
    "Dropout",
    "Dense",
    "ConvUnit",
    "DenseBlock",
    "WeightedSum",
]


def _check_image(x, op):
    if x.ndim != 4:
        raise ShapeError(f"{op} expects (batch, channels, height, width), got {x.shape}")


def conv2d(x, kernel, bias=None):
    """Stride-1 cross-correlation with zero padding that keeps H and W.

    x: (N, C, H, W); kernel: (K, C, kh, kw) with odd kh, kw; bias: (K,).
    Forward lowers the padded input to a column matrix and runs one
    matmul; backward scatters the column gradient through kh*kw shifted
    adds instead of a per-pixel loop.
    """
    _check_image(x, "conv2d")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be (K, C, kh, kw), got {kernel.shape}")
    n, c, h, w = x.shape
    k, cin, kh, kw = kernel.shape
    if cin != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"conv2d bias must be ({k},), got {bias.shape}")

    ph, pw = kh // 2, kw // 2
    if ph or pw:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    else:
        xp = x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (N, C, H, W, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * kh * kw)
    wmat = kernel.data.reshape(k, c * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, h, w, k).transpose(0, 3, 1, 2)
    check_finite(out, "conv2d")

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    if not tracking(*parents):
        return Tensor(out)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * h * w, k)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(gmat.sum(axis=0))
        if kernel.requires_grad:
            kernel.accumulate_grad((gmat.T @ cols).reshape(kernel.data.shape))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, h, w, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + h, j : j + w] += dcols[:, :, :, :, i, j]
            x.accumulate_grad(dxp[:, :, ph : ph + h, pw : pw + w])

    return Tensor(out, True, parents, backward)


def depthwise_conv2d(x, kernel):
    """Per-channel stride-1 convolution (multiplier 1), size-preserving.

    x: (N, C, H, W); kernel: (C, kh, kw). Channel i of the output sees
    only channel i of the input.
    """
    _check_image(x, "depthwise_conv2d")
    if kernel.ndim != 3:
        raise ShapeError(f"depthwise kernel must be (C, kh, kw), got {kernel.shape}")
    n, c, h, w = x.shape
    ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"depthwise_conv2d: input has {c} channels but kernel expects {ck}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"depthwise kernel extents must be odd, got {kh}x{kw}")

    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (N, C, H, W, kh, kw)
    out = np.einsum("nchwij,cij->nchw", win, kernel.data, optimize=True)
    check_finite(out, "depthwise_conv2d")

    if not tracking(x, kernel):
        return Tensor(out)

    def backward(g):
        if kernel.requires_grad:
            kernel.accumulate_grad(np.einsum("nchwij,nchw->cij", win, g, optimize=True))
        if x.requires_grad:
            dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + h, j : j + w] += g * kernel.data[:, i, j][None, :, None, None]
            x.accumulate_grad(dxp[:, :, ph : ph + h, pw : pw + w])

    return Tensor(out, True, (x, kernel), backward)


def max_pool2d(x, window=2, stride=2):
    """Non-overlapping max pooling; a trailing odd row/column is dropped.

    Only window == stride is supported. Within each window, ties route
    the gradient to the first maximum in row-major order.
    """
    _check_image(x, "max_pool2d")
    if window != stride:
        raise ShapeError("max_pool2d supports window == stride only")
    if window < 1:
        raise ShapeError(f"max_pool2d window must be >= 1, got {window}")
    n, c, h, w = x.shape
    ho, wo = h // window, w // window
    if ho < 1 or wo < 1:
        raise ShapeError(f"max_pool2d: input {h}x{w} smaller than window {window}")

    xc = x.data[:, :, : ho * window, : wo * window]
    win = (
        xc.reshape(n, c, ho, window, wo, window)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, window * window)
    )
    idx = win.argmax(axis=-1)  # argmax ties -> lowest flat index, i.e. row-major first
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    check_finite(out, "max_pool2d")

    if not tracking(x):
        return Tensor(out)

    def backward(g):
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dxc = (
            dwin.reshape(n, c, ho, wo, window, window)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, ho * window, wo * window)
        )
        if dxc.shape == x.data.shape:
            x.accumulate_grad(dxc)
        else:
            dx = np.zeros_like(x.data)
            dx[:, :, : ho * window, : wo * window] = dxc
            x.accumulate_grad(dx)

    return Tensor(out, True, (x,), backward)


def dropout(x, p, rng):
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    The caller decides training vs inference; this always applies the mask.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / np.asarray(1.0 - p, dtype=x.dtype)
    out = x.data * mask
    if not tracking(x):
        return Tensor(out)

    def backward(g):
        x.accumulate_grad(g * mask)

    return Tensor(out, True, (x,), backward)


def softmax(x):
    """Row-wise softmax over the last axis, max-shifted for stability."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    check_finite(out, "softmax")
    if not tracking(x):
        return Tensor(out)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        x.accumulate_grad(out * (g - dot))

    return Tensor(out, True, (x,), backward)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy between softmax(logits) and integer labels.

    logits: (N, c); labels: (N,) with values in 0..c-1. Fusing the
    softmax keeps the backward pass the plain (p - onehot)/N form.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (N, c) logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels must be ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in 0..{c - 1}")

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)
    check_finite(loss, "softmax_cross_entropy")
    if not tracking(logits):
        return Tensor(loss)

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        logits.accumulate_grad(p * (g / n))

    return Tensor(loss, True, (logits,), backward)


def weighted_sum(parts, weights):
    """Trainable convex-ish combination: sum_i weights[i] * parts[i].

    Weights are a rank-1 tensor, one scalar per part, deliberately
    unconstrained (no renormalization).
    """
    parts = list(parts)
    if weights.shape != (len(parts),):
        raise ShapeError(f"weighted_sum needs {len(parts)} weights, got {weights.shape}")
    base = parts[0].data.shape
    for p in parts[1:]:
        if p.data.shape != base:
            raise ShapeError(f"weighted_sum parts disagree: {base} vs {p.data.shape}")

    out = np.zeros(base, dtype=parts[0].dtype)
    for i, p in enumerate(parts):
        out += weights.data[i] * p.data
    check_finite(out, "weighted_sum")

    parents = tuple(parts) + (weights,)
    if not tracking(*parents):
        return Tensor(out)

    def backward(g):
        if weights.requires_grad:
            dw = np.array([(g * p.data).sum() for p in parts], dtype=weights.dtype)
            weights.accumulate_grad(dw)
        for i, p in enumerate(parts):
            if p.requires_grad:
                p.accumulate_grad(g * weights.data[i])

    return Tensor(out, True, parents, backward)


# -- parameterized layers --------------------------------------------------


def he_std(fan_in):
    return float(np.sqrt(2.0 / fan_in))


class Layer:
    """Base: a named thing with (name, tensor) parameter pairs."""

    def __init__(self, name):
        self.name = name

    def parameters(self):
        return []

    def state(self):
        """Non-trainable arrays that inference needs (e.g. running stats)."""
        return []


class Conv2D(Layer):
    def __init__(self, name, in_channels, out_channels, rng, kernel_size=3, dtype=SINGLE):
        super().__init__(name)
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.kernel = Tensor(rng.normal(0.0, he_std(fan_in), shape).astype(dtype), True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), True)

    def __call__(self, x):
        return conv2d(x, self.kernel, self.bias)

    def parameters(self):
        return [(f"{self.name}/kernel", self.kernel), (f"{self.name}/bias", self.bias)]

    def weight_count(self):
        """Kernel entries only, biases excluded."""
        return int(self.kernel.size)


class DepthwiseSeparableConv2D(Layer):
    """Depthwise 3x3 per channel, then a 1x1 pointwise mix, then bias."""

    def __init__(self, name, in_channels, out_channels, rng, kernel_size=3, dtype=SINGLE):
        super().__init__(name)
        dshape = (in_channels, kernel_size, kernel_size)
        self.depthwise = Tensor(
            rng.normal(0.0, he_std(kernel_size * kernel_size), dshape).astype(dtype), True
        )
        pshape = (out_channels, in_channels, 1, 1)
        self.pointwise = Tensor(rng.normal(0.0, he_std(in_channels), pshape).astype(dtype), True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), True)

    def __call__(self, x):
        mid = depthwise_conv2d(x, self.depthwise)
        return conv2d(mid, self.pointwise, self.bias)

    def parameters(self):
        return [
            (f"{self.name}/depthwise", self.depthwise),
            (f"{self.name}/pointwise", self.pointwise),
            (f"{self.name}/bias", self.bias),
        ]

    def weight_count(self):
        return int(self.depthwise.size + self.pointwise.size)


class BatchNorm2D(Layer):
    """Per-channel batch normalization over (batch, height, width).

    Training normalizes with batch statistics and refreshes the running
    estimates; inference is a per-channel affine map built from the
    running estimates. Unit variance is the biased (1/m) kind throughout.
    """

    def __init__(self, name, channels, momentum=0.1, eps=1e-5, dtype=SINGLE):
        super().__init__(name)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.scale = Tensor(np.ones(channels, dtype=dtype), True)
        self.shift = Tensor(np.zeros(channels, dtype=dtype), True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x, training):
        _check_image(x, "batch_norm")
        c = x.shape[1]
        if c != self.scale.size:
            raise ShapeError(f"{self.name}: got {c} channels, expected {self.scale.size}")
        if training:
            if x.shape[0] < 2:
                raise ShapeError(f"{self.name}: batch norm training needs batch >= 2")
            return self._train_forward(x)
        return self._eval_forward(x)

    def _train_forward(self, x):
        scale, shift = self.scale, self.shift
        axes = (0, 2, 3)
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        mom = np.asarray(self.momentum, dtype=x.dtype)
        self.running_mean = (1 - mom) * self.running_mean + mom * mu
        self.running_var = (1 - mom) * self.running_var + mom * var

        ivar = 1.0 / np.sqrt(var + np.asarray(self.eps, dtype=x.dtype))
        xc = x.data - mu[None, :, None, None]
        xhat = xc * ivar[None, :, None, None]
        out = scale.data[None, :, None, None] * xhat + shift.data[None, :, None, None]
        check_finite(out, "batch_norm")

        if not tracking(x, scale, shift):
            return Tensor(out)

        def backward(g):
            if shift.requires_grad:
                shift.accumulate_grad(g.sum(axis=axes))
            if scale.requires_grad:
                scale.accumulate_grad((g * xhat).sum(axis=axes))
            if x.requires_grad:
                iv = ivar[None, :, None, None]
                dxhat = g * scale.data[None, :, None, None]
                dvar = (dxhat * xc).sum(axis=axes) * (-0.5) * ivar**3
                dmu = -(dxhat.sum(axis=axes)) * ivar + dvar * (-2.0 / m) * xc.sum(axis=axes)
                dx = (
                    dxhat * iv
                    + dvar[None, :, None, None] * (2.0 / m) * xc
                    + dmu[None, :, None, None] / m
                )
                x.accumulate_grad(dx)

        return Tensor(out, True, (x, scale, shift), backward)

    def _eval_forward(self, x):
        scale, shift = self.scale, self.shift
        ivar = 1.0 / np.sqrt(self.running_var + np.asarray(self.eps, dtype=x.dtype))
        a = (scale.data * ivar)[None, :, None, None]
        b = (shift.data - scale.data * ivar * self.running_mean)[None, :, None, None]
        out = a * x.data + b
        check_finite(out, "batch_norm")

        if not tracking(x, scale, shift):
            return Tensor(out)

        def backward(g):
            axes = (0, 2, 3)
            if shift.requires_grad:
                shift.accumulate_grad(g.sum(axis=axes))
            if scale.requires_grad:
                xhat = (x.data - self.running_mean[None, :, None, None]) * ivar[None, :, None, None]
                scale.accumulate_grad((g * xhat).sum(axis=axes))
            if x.requires_grad:
                x.accumulate_grad(g * a)

        return Tensor(out, True, (x, scale, shift), backward)

    def parameters(self):
        return [(f"{self.name}/scale", self.scale), (f"{self.name}/shift", self.shift)]

    def state(self):
        return [
            (f"{self.name}/running_mean", lambda: self.running_mean, self._set_mean),
            (f"{self.name}/running_var", lambda: self.running_var, self._set_var),
        ]

    def _set_mean(self, v):
        self.running_mean = np.asarray(v, dtype=self.running_mean.dtype).copy()

    def _set_var(self, v):
        self.running_var = np.asarray(v, dtype=self.running_var.dtype).copy()


class Dropout(Layer):
    """Dropout with its own draw stream so call order stays reproducible."""

    def __init__(self, name, p):
        super().__init__(name)
        self.p = float(p)
        self.rng = None  # seeded by the owning model

    def seed(self, rng):
        self.rng = rng

    def __call__(self, x, training):
        if not training or self.p == 0.0:
            return x
        if self.rng is None:
            raise RuntimeError(f"{self.name}: dropout stream was never seeded")
        return dropout(x, self.p, self.rng)


class Dense(Layer):
    def __init__(self, name, in_dim, out_dim, rng, dtype=SINGLE):
        super().__init__(name)
        self.weight = Tensor(rng.normal(0.0, he_std(in_dim), (in_dim, out_dim)).astype(dtype), True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), True)

    def __call__(self, x):
        if x.ndim != 2:
            raise ShapeError(f"{self.name} expects (batch, features), got {x.shape}")
        if x.shape[1] != self.weight.shape[0]:
            raise ShapeError(
                f"{self.name}: got {x.shape[1]} features, expected {self.weight.shape[0]}"
            )
        return matmul(x, self.weight) + self.bias

    def parameters(self):
        return [(f"{self.name}/weight", self.weight), (f"{self.name}/bias", self.bias)]

    def weight_count(self):
        return int(self.weight.size)


class ConvUnit(Layer):
    """Convolution -> dropout -> batch norm -> ReLU, in that order.

    `kind` picks the convolution: "vanilla" or "separable". Dropout with
    p == 0 (used for the last convolution of each block) is a no-op.
    """

    def __init__(self, name, kind, in_channels, out_channels, drop_p, rng, dtype=SINGLE):
        super().__init__(name)
        if kind == "vanilla":
            self.conv = Conv2D(f"{name}/conv", in_channels, out_channels, rng, dtype=dtype)
        elif kind == "separable":
            self.conv = DepthwiseSeparableConv2D(
                f"{name}/conv", in_channels, out_channels, rng, dtype=dtype
            )
        else:
            raise ValueError(f"unknown convolution kind {kind!r}")
        self.drop = Dropout(f"{name}/drop", drop_p)
        self.norm = BatchNorm2D(f"{name}/norm", out_channels, dtype=dtype)

    def __call__(self, x, training):
        y = self.conv(x)
        y = self.drop(y, training)
        y = self.norm(y, training)
        return relu(y)

    def parameters(self):
        return self.conv.parameters() + self.norm.parameters()

    def state(self):
        return self.norm.state()

    def dropouts(self):
        return [self.drop]

    def weight_count(self):
        return self.conv.weight_count()


class DenseBlock(Layer):
    """Densely connected fusion block.

    Every internal layer sees the concatenation of the block input and
    all earlier layer outputs. The first layer emits `multiplier * growth`
    channels, the remaining ones `growth` each, and the block output is
    the concatenation of the input with every layer output:
    C + multiplier*growth + (layers-1)*growth channels. The last layer
    skips dropout, same as the closing convolution of an ordinary block.
    """

    def __init__(self, name, in_channels, growth, multiplier, drop_p, rng, layers=5, dtype=SINGLE):
        super().__init__(name)
        if layers < 1:
            raise ValueError(f"dense block needs >= 1 layers, got {layers}")
        self.in_channels = int(in_channels)
        widths = [multiplier * growth] + [growth] * (layers - 1)
        self.units = []
        seen = in_channels
        for i, width in enumerate(widths):
            p = drop_p if i < layers - 1 else 0.0
            self.units.append(ConvUnit(f"{name}/layer{i + 1}", "vanilla", seen, width, p, rng, dtype))
            seen += width
        self.out_channels = seen

    def __call__(self, x, training):
        feats = [x]
        for unit in self.units:
            inp = feats[0] if len(feats) == 1 else concat(feats, axis=1)
            feats.append(unit(inp, training))
        return concat(feats, axis=1)

    def parameters(self):
        out = []
        for unit in self.units:
            out.extend(unit.parameters())
        return out

    def state(self):
        out = []
        for unit in self.units:
            out.extend(unit.state())
        return out

    def dropouts(self):
        return [unit.drop for unit in self.units]

    def weight_count(self):
        return sum(u.weight_count() for u in self.units)


class WeightedSum(Layer):
    """Learned blend of same-shape vectors, initialized to the plain mean."""

    def __init__(self, name, parts, dtype=SINGLE):
        super().__init__(name)
        self.weights = Tensor(np.full(parts, 1.0 / parts, dtype=dtype), True)

    def __call__(self, parts):
        return weighted_sum(parts, self.weights)

    def parameters(self):
        return [(f"{self.name}/weights", self.weights)]
