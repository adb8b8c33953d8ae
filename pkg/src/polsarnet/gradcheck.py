"""Finite-difference verification of every backward pass.

For each op we build a small double-precision graph, reduce its output
to a scalar through a fixed random projection, and compare analytic
gradients against central differences coordinate by coordinate. The
relative error uses max(|analytic|, |numeric|, floor) as denominator;
the floor (1e-4) absorbs coordinates whose true gradient is identically
zero, e.g. a convolution bias that batch normalization cancels, where
both sides are pure roundoff and a ratio would be meaningless. With the
floor, such a coordinate passes exactly when its absolute error is below
floor * tolerance = 1e-8, well above the ~1e-9 noise of double-precision
central differences at step 1e-6.

Checks that involve batch statistics run in training mode; dropout is
checked in inference mode where it must be an exact identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from .tensor import DOUBLE, Tensor, make_rng, no_grad

DEFAULT_TOLERANCE = 1e-4
# Small enough that a ReLU kink rarely falls inside the central-difference
# bracket, large enough that double-precision cancellation stays ~1e-9.
_STEP = 1e-6
_DENOM_FLOOR = 1e-4


@dataclass
class OpCheckResult:
    op: str
    case: str
    worst_rel_err: float
    tolerance: float

    @property
    def passed(self):
        return self.worst_rel_err < self.tolerance


def finite_difference_check(make_loss, tensors, rng, samples=20, step=_STEP):
    """Worst relative error between analytic and numeric gradients.

    make_loss: zero-argument callable rebuilding the scalar loss from the
    current tensor contents. tensors: the leaves to perturb, all double
    precision with requires_grad set.
    """
    for t in tensors:
        if t.dtype != DOUBLE:
            raise TypeError("finite differences need double precision leaves")
        t.grad = None
    loss = make_loss()
    loss.backward()
    grads = [None if t.grad is None else t.grad.copy() for t in tensors]

    worst = 0.0
    for t, g in zip(tensors, grads):
        if g is None:
            raise AssertionError("a leaf received no gradient")
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        count = min(samples, flat.size)
        coords = rng.choice(flat.size, size=count, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            with no_grad():
                up = make_loss().item()
            flat[c] = orig - step
            with no_grad():
                down = make_loss().item()
            flat[c] = orig
            numeric = (up - down) / (2.0 * step)
            analytic = float(gflat[c])
            denom = max(abs(analytic), abs(numeric), _DENOM_FLOOR)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def _leaf(rng, shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, shape).astype(DOUBLE), requires_grad=True)


def _projector(rng, shape):
    r = Tensor(rng.normal(0.0, 1.0, shape).astype(DOUBLE))

    def project(out):
        return (out * r).sum()

    return project


# -- one builder per op ----------------------------------------------------
# Each returns (tensors, make_loss, case description).


def _build_conv2d(rng, case):
    n, c, h, w, k = [(2, 3, 6, 6, 4), (1, 1, 5, 5, 2), (2, 5, 4, 7, 3)][case]
    x = _leaf(rng, (n, c, h, w))
    kern = _leaf(rng, (k, c, 3, 3), scale=0.5)
    bias = _leaf(rng, (k,), scale=0.2)
    project = _projector(rng, (n, k, h, w))
    return [x, kern, bias], lambda: project(layers.conv2d(x, kern, bias)), f"{n}x{c}x{h}x{w}->{k}"


def _build_separable(rng, case):
    n, c, h, w, k = [(2, 3, 5, 5, 4), (1, 4, 6, 4, 2), (2, 2, 4, 6, 5)][case]
    x = _leaf(rng, (n, c, h, w))
    dw = _leaf(rng, (c, 3, 3), scale=0.5)
    pw = _leaf(rng, (k, c, 1, 1), scale=0.5)
    bias = _leaf(rng, (k,), scale=0.2)
    project = _projector(rng, (n, k, h, w))

    def make_loss():
        return project(layers.conv2d(layers.depthwise_conv2d(x, dw), pw, bias))

    return [x, dw, pw, bias], make_loss, f"{n}x{c}x{h}x{w}->{k}"


def _build_max_pool(rng, case):
    n, c, h, w = [(2, 3, 6, 6), (1, 2, 5, 7), (2, 1, 4, 4)][case]
    x = _leaf(rng, (n, c, h, w))
    project = _projector(rng, (n, c, h // 2, w // 2))
    return [x], lambda: project(layers.max_pool2d(x)), f"{n}x{c}x{h}x{w}"


def _build_batch_norm(rng, case):
    n, c, h, w = [(4, 3, 5, 5), (2, 6, 4, 4), (6, 2, 3, 7)][case]
    norm = layers.BatchNorm2D("bn", c, dtype=DOUBLE)
    norm.scale.data = rng.normal(1.0, 0.2, c).astype(DOUBLE)
    norm.shift.data = rng.normal(0.0, 0.2, c).astype(DOUBLE)
    x = _leaf(rng, (n, c, h, w))
    project = _projector(rng, (n, c, h, w))
    return (
        [x, norm.scale, norm.shift],
        lambda: project(norm(x, training=True)),
        f"{n}x{c}x{h}x{w} training",
    )


def _build_dropout_eval(rng, case):
    shape = [(3, 4), (2, 3, 5, 5), (7,)][case]
    drop = layers.Dropout("drop", 0.5)
    drop.seed(make_rng(0))
    x = _leaf(rng, shape)
    project = _projector(rng, shape)
    return [x], lambda: project(drop(x, training=False)), f"{shape} inference"


def _build_dense(rng, case):
    n, d, k = [(4, 7, 3), (2, 12, 5), (6, 3, 2)][case]
    x = _leaf(rng, (n, d))
    w = _leaf(rng, (d, k), scale=0.5)
    b = _leaf(rng, (k,), scale=0.2)
    project = _projector(rng, (n, k))
    return [x, w, b], lambda: project((x @ w) + b), f"{n}x{d}->{k}"


def _build_softmax(rng, case):
    n, c = [(4, 5), (2, 3), (6, 10)][case]
    x = _leaf(rng, (n, c))
    project = _projector(rng, (n, c))
    return [x], lambda: project(layers.softmax(x)), f"{n}x{c}"


def _build_softmax_cross_entropy(rng, case):
    n, c = [(4, 5), (2, 3), (8, 15)][case]
    x = _leaf(rng, (n, c))
    labels = rng.integers(0, c, size=n)
    return [x], lambda: layers.softmax_cross_entropy(x, labels), f"{n}x{c}"


def _build_dense_block(rng, case):
    n, c, h, w, growth, mult, depth = [
        (2, 3, 4, 4, 2, 2, 3),
        (2, 2, 3, 3, 2, 2, 5),
        (3, 4, 5, 3, 3, 4, 2),
    ][case]
    block = layers.DenseBlock("fuse", c, growth, mult, 0.0, rng, layers=depth, dtype=DOUBLE)
    x = _leaf(rng, (n, c, h, w))
    project = _projector(rng, (n, block.out_channels, h, w))
    leaves = [x] + [t for _, t in block.parameters()]
    return leaves, lambda: project(block(x, training=True)), f"{c}ch g{growth} m{mult} L{depth}"


def _build_weighted_sum(rng, case):
    parts, shape = [(3, (4, 5)), (2, (3, 3)), (4, (2, 7))][case]
    vs = [_leaf(rng, shape) for _ in range(parts)]
    w = Tensor(rng.normal(1.0 / parts, 0.1, parts).astype(DOUBLE), requires_grad=True)
    project = _projector(rng, shape)
    return vs + [w], lambda: project(layers.weighted_sum(vs, w)), f"{parts} parts {shape}"


def _build_relu(rng, case):
    shape = [(4, 6), (2, 3, 5, 5), (9,)][case]
    x = _leaf(rng, shape)
    project = _projector(rng, shape)
    from .tensor import relu

    return [x], lambda: project(relu(x)), f"{shape}"


CHECKS = {
    "conv2d": _build_conv2d,
    "separable_conv2d": _build_separable,
    "max_pool2d": _build_max_pool,
    "batch_norm": _build_batch_norm,
    "dropout_inference": _build_dropout_eval,
    "dense": _build_dense,
    "softmax": _build_softmax,
    "softmax_cross_entropy": _build_softmax_cross_entropy,
    "dense_block": _build_dense_block,
    "weighted_sum": _build_weighted_sum,
    "relu": _build_relu,
}


def run_gradient_checks(ops=None, seed=2024, tolerance=DEFAULT_TOLERANCE, samples=20, cases=3):
    """Check each op over `cases` independent shape configurations."""
    if ops is None:
        ops = list(CHECKS)
    unknown = [op for op in ops if op not in CHECKS]
    if unknown:
        raise ValueError(f"unknown ops: {unknown}; choose from {sorted(CHECKS)}")
    results = []
    for op in ops:
        for case in range(cases):
            rng = make_rng(np.random.SeedSequence(seed, spawn_key=(hash_op(op), case)))
            tensors, make_loss, desc = CHECKS[op](rng, case)
            err = finite_difference_check(make_loss, tensors, rng, samples=samples)
            results.append(OpCheckResult(op, desc, err, tolerance))
    return results


def hash_op(op):
    # stable small integer per op name (python's hash() is salted per process)
    return sum(ord(ch) * (i + 1) for i, ch in enumerate(op)) % 100003


def all_passed(results):
    return all(r.passed for r in results)


def format_report(results):
    lines = []
    width = max(len(r.op) for r in results)
    for r in results:
        mark = "ok " if r.passed else "FAIL"
        lines.append(f"{mark} {r.op:<{width}}  rel_err={r.worst_rel_err:.3e}  ({r.case})")
    total = sum(1 for r in results if r.passed)
    lines.append(f"{total}/{len(results)} gradient checks passed")
    return "\n".join(lines)
