"""Dense real tensors with reverse-mode automatic differentiation.

Buffers are numpy arrays in float32 ("single") or float64 ("double"),
row-major. Every differentiable op records its parents and a backward
closure; ``Tensor.backward()`` replays the closures in reverse
construction order. Construction order is a valid topological order, so
gradient accumulation is deterministic across runs.

All randomness goes through explicitly seeded ``numpy.random.Generator``
objects (PCG64). Nothing here touches numpy's global RNG state.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

SINGLE = np.dtype(np.float32)
DOUBLE = np.dtype(np.float64)

_ids = itertools.count()
_grad_enabled = True
_debug_checks = False


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NumericalError(ArithmeticError):
    """Non-finite values showed up where they must not."""


def set_debug_checks(enabled):
    """Toggle post-op finiteness assertions. Slow; meant for tests."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled():
    return _debug_checks


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def check_finite(data, op):
    if _debug_checks and not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by {op}")


def validate_shape(shape):
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}: every extent must be >= 1")
    return shape


def make_rng(seed):
    """PCG64 generator from an integer seed or SeedSequence."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def derived_rng(seed, key):
    """Independent stream `key` derived from a base seed.

    Streams with different keys never overlap; the mapping is stable, so
    (seed, key) fully determines the draw sequence.
    """
    return make_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


class Tensor:
    """One node of the autodiff tape: an nd-array plus an optional grad."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        data = np.asarray(data)
        if data.dtype not in (SINGLE, DOUBLE):
            data = data.astype(SINGLE)
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = parents
        self._backward = backward
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        # First write copies: the incoming buffer may be shared with a
        # sibling (e.g. both parents of add receive the same array), and
        # later in-place accumulation must not corrupt it.
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self):
        """Backpropagate from this scalar; fills ``grad`` on ancestors."""
        if self.data.shape != ():
            raise ShapeError("backward() expects a scalar loss tensor")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that is not tracked")
        nodes = []
        seen = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        # Construction ids are monotone, so descending id is a topological
        # order of the subgraph; this fixes the accumulation order.
        nodes.sort(key=lambda t: t._id, reverse=True)
        self.grad = np.ones((), dtype=self.data.dtype)
        for t in nodes:
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    # -- shape ops ------------------------------------------------------

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def flatten2d(self):
        """Collapse all but the leading axis: (N, ...) -> (N, prod)."""
        n = self.data.shape[0]
        return reshape(self, (n, self.data.size // n))

    # -- reductions ------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)

    def max(self, axis=None):
        return tensor_max(self, axis)

    def argmax(self, axis=None):
        """Index of the largest element; ties resolve to the lowest index.

        Returns a plain integer ndarray, not a Tensor: argmax is an
        inspection, gradients do not flow through it.
        """
        return np.argmax(self.data, axis=axis)


def tracking(*tensors):
    return _grad_enabled and any(t.requires_grad for t in tensors)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else SINGLE
    return Tensor(np.asarray(x, dtype=dtype))


# -- creation ------------------------------------------------------------


def zeros(shape, dtype=SINGLE, requires_grad=False):
    return Tensor(np.zeros(validate_shape(shape), dtype=dtype), requires_grad)


def ones(shape, dtype=SINGLE, requires_grad=False):
    return Tensor(np.ones(validate_shape(shape), dtype=dtype), requires_grad)


def full(shape, value, dtype=SINGLE, requires_grad=False):
    return Tensor(np.full(validate_shape(shape), value, dtype=dtype), requires_grad)


def uniform(shape, low, high, seed, dtype=SINGLE, requires_grad=False):
    rng = make_rng(seed)
    data = rng.uniform(low, high, validate_shape(shape)).astype(dtype)
    return Tensor(data, requires_grad)


def gaussian(shape, mean, std, seed, dtype=SINGLE, requires_grad=False):
    rng = make_rng(seed)
    data = rng.normal(mean, std, validate_shape(shape)).astype(dtype)
    return Tensor(data, requires_grad)


# -- elementwise ---------------------------------------------------------


def unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    if a.dtype != b.dtype:
        raise TypeError(f"mixed precisions {a.dtype.name} and {b.dtype.name}")
    return a, b


def _apply_binary(a, b, out_data, da_fn, db_fn, op):
    check_finite(out_data, op)
    if not tracking(a, b):
        return Tensor(out_data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(unbroadcast(da_fn(g), a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(unbroadcast(db_fn(g), b.data.shape))

    return Tensor(out_data, True, (a, b), backward)


def _broadcast_guard(a, b, op):
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast") from None


def add(a, b):
    a, b = _pair(a, b)
    _broadcast_guard(a, b, "add")
    return _apply_binary(a, b, a.data + b.data, lambda g: g, lambda g: g, "add")


def sub(a, b):
    a, b = _pair(a, b)
    _broadcast_guard(a, b, "sub")
    return _apply_binary(a, b, a.data - b.data, lambda g: g, lambda g: -g, "sub")


def mul(a, b):
    a, b = _pair(a, b)
    _broadcast_guard(a, b, "mul")
    return _apply_binary(a, b, a.data * b.data, lambda g: g * b.data, lambda g: g * a.data, "mul")


def div(a, b):
    a, b = _pair(a, b)
    _broadcast_guard(a, b, "div")
    out = a.data / b.data
    return _apply_binary(
        a, b, out,
        lambda g: g / b.data,
        lambda g: -g * a.data / (b.data * b.data),
        "div",
    )


def maximum(a, b):
    """Elementwise max; on ties the gradient goes to the first operand."""
    a, b = _pair(a, b)
    _broadcast_guard(a, b, "maximum")
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)
    return _apply_binary(
        a, b, out,
        lambda g: g * pick_a,
        lambda g: g * ~pick_a,
        "maximum",
    )


def relu(x):
    out = np.maximum(x.data, 0)
    check_finite(out, "relu")
    if not tracking(x):
        return Tensor(out)

    def backward(g):
        x.accumulate_grad(g * (x.data > 0))

    return Tensor(out, True, (x,), backward)


# -- matmul --------------------------------------------------------------


def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    check_finite(out, "matmul")
    if not tracking(a, b):
        return Tensor(out)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return Tensor(out, True, (a, b), backward)


# -- reductions ----------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    check_finite(out, "sum")
    if not tracking(x):
        return Tensor(out)

    def backward(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axes)
        x.accumulate_grad(np.broadcast_to(gg, x.data.shape))

    return Tensor(out, True, (x,), backward)


def tensor_mean(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.data.shape[a]
    out = x.data.mean(axis=axes, keepdims=keepdims)
    check_finite(out, "mean")
    if not tracking(x):
        return Tensor(out)

    def backward(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axes)
        x.accumulate_grad(np.broadcast_to(gg, x.data.shape) / count)

    return Tensor(out, True, (x,), backward)


def tensor_max(x, axis=None):
    """Max reduction over all elements or one axis; ties route the
    gradient to the lowest index."""
    if axis is None:
        flat = x.data.reshape(-1)
        idx = int(np.argmax(flat))
        out = flat[idx : idx + 1].reshape(())
        check_finite(out, "max")
        if not tracking(x):
            return Tensor(out.copy())

        def backward(g):
            dx = np.zeros(x.data.size, dtype=x.dtype)
            dx[idx] = g
            x.accumulate_grad(dx.reshape(x.data.shape))

        return Tensor(out.copy(), True, (x,), backward)

    axis = axis % x.ndim
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    check_finite(out, "max")
    if not tracking(x):
        return Tensor(out)

    def backward(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        x.accumulate_grad(dx)

    return Tensor(out, True, (x,), backward)


# -- shape manipulation ---------------------------------------------------


def reshape(x, shape):
    out = x.data.reshape(shape)
    if not tracking(x):
        return Tensor(out)

    def backward(g):
        x.accumulate_grad(g.reshape(x.data.shape))

    return Tensor(out, True, (x,), backward)


def take(x, key):
    """Basic slicing/indexing with gradient scatter on the way back."""
    out = x.data[key]
    if not tracking(x):
        return Tensor(out)

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[key] = g
        x.accumulate_grad(dx)

    return Tensor(out, True, (x,), backward)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    if len({t.dtype for t in tensors}) != 1:
        raise TypeError("concat operands must share one precision")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[t.data.shape for t in tensors]} on axis {axis}"
        ) from None
    check_finite(out, "concat")
    if not tracking(*tensors):
        return Tensor(out)

    axis_n = axis % tensors[0].ndim
    sizes = [t.data.shape[axis_n] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis_n] = slice(lo, hi)
                t.accumulate_grad(g[tuple(sl)])

    return Tensor(out, True, tuple(tensors), backward)
