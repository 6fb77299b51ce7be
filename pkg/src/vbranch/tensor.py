"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every op takes and returns :class:`Value` objects.  Image tensors use the
``N, H, W, C`` layout (row-major), kernels are ``kh, kw, C_in, C_out``.

Ops record a closure that pushes the output gradient to their parents;
:meth:`Value.backward` walks the graph once in reverse topological order.
Values are never mutated after creation, apart from their ``grad`` slot.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

_GRAD_ENABLED = True
_FLOP_COUNTERS: list["FlopCounter"] = []


class FlopCounter:
    """Accumulates floating-point operation counts of executed ops.

    Conventions: a multiply-add is 2 ops; elementwise arithmetic is 1 op per
    output element; batchnorm is 4 ops per element in inference mode and
    8 per element in train mode (statistics included); pooling is 1 op per
    input element.  Constant 0/1 masking, indexing, reshapes and
    concatenation are data movement and count as 0.
    """

    def __init__(self):
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int):
        self.total += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    _FLOP_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _FLOP_COUNTERS.remove(counter)


def _flops(op: str, n: int):
    for c in _FLOP_COUNTERS:
        c.add(op, n)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Value:
    """Differentiable n-d array."""

    __array_priority__ = 100  # make ndarray <op> Value defer to Value

    def __init__(self, data, parents: tuple = (), backward: Callable | None = None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        if _GRAD_ENABLED:
            self._parents = parents
            self._backward = backward
        else:
            self._parents = ()
            self._backward = None
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Value(shape={self.shape}, op={self.op!r})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.shape)
        else:
            self.grad = self.grad + g

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Backpropagate from this node; the seed defaults to ones."""
        order: list[Value] = []
        seen: set[int] = set()
        stack: list[tuple[Value, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones(self.shape) if seed is None else np.asarray(seed, dtype=np.float64).reshape(self.shape)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Value, b: Value):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast(a, b)
    out_data = a.data + b.data
    _flops("add", out_data.size)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Value(out_data, (a, b), backward, "add")


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast(a, b)
    out_data = a.data - b.data
    _flops("sub", out_data.size)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return Value(out_data, (a, b), backward, "sub")


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast(a, b)
    out_data = a.data * b.data
    _flops("mul", out_data.size)

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Value(out_data, (a, b), backward, "mul")


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast(a, b)
    out_data = a.data / b.data
    _flops("div", out_data.size)

    def backward(g):
        a._accumulate(_unbroadcast(g / b.data, a.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Value(out_data, (a, b), backward, "div")


def relu(x: Value) -> Value:
    x = as_value(x)
    pos = x.data > 0
    out_data = np.where(pos, x.data, 0.0)
    _flops("relu", out_data.size)

    def backward(g):
        x._accumulate(g * pos)

    return Value(out_data, (x,), backward, "relu")


def vabs(x: Value) -> Value:
    x = as_value(x)
    out_data = np.abs(x.data)
    _flops("abs", out_data.size)

    def backward(g):
        x._accumulate(g * np.sign(x.data))

    return Value(out_data, (x,), backward, "abs")


def scale_mask(x: Value, mask) -> Value:
    """Multiply by a constant (non-trainable) mask broadcast over the batch.

    The mask is typically 0/1 over the channel axis.  Gradients only pass
    through the unmasked entries.
    """
    x = as_value(x)
    m = np.asarray(mask, dtype=np.float64)
    try:
        np.broadcast_shapes(x.shape, m.shape)
    except ValueError as exc:
        raise ShapeError(f"mask {m.shape} does not broadcast over {x.shape}") from exc
    out_data = x.data * m

    def backward(g):
        x._accumulate(_unbroadcast(g * m, x.shape))

    return Value(out_data, (x,), backward, "scale_mask")


# ----------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(out))


def vsum(x: Value, axis=None, keepdims=False) -> Value:
    x = as_value(x)
    axes = _norm_axis(axis, x.ndim)
    out_data = x.data.sum(axis=axes, keepdims=keepdims)
    _flops("sum", x.data.size)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        x._accumulate(np.broadcast_to(g, x.shape))

    return Value(out_data, (x,), backward, "sum")


def mean(x: Value, axis=None, keepdims=False) -> Value:
    x = as_value(x)
    axes = _norm_axis(axis, x.ndim)
    n = math.prod(x.shape[a] for a in axes)
    out_data = x.data.mean(axis=axes, keepdims=keepdims)
    _flops("mean", x.data.size)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        x._accumulate(np.broadcast_to(g / n, x.shape))

    return Value(out_data, (x,), backward, "mean")


def _extreme(x: Value, axis: int, keepdims: bool, pick_max: bool, mask=None, op="amax") -> Value:
    x = as_value(x)
    (ax,) = _norm_axis(axis, x.ndim)
    data = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != data.shape:
            raise ShapeError(f"mask {mask.shape} vs data {data.shape}")
        if not mask.any(axis=ax).all():
            raise ShapeError("masked reduction over an empty selection")
        data = np.where(mask, data, -np.inf if pick_max else np.inf)
    idx = np.argmax(data, axis=ax) if pick_max else np.argmin(data, axis=ax)
    idx = np.expand_dims(idx, ax)
    out_data = np.take_along_axis(data, idx, axis=ax)
    _flops(op, x.data.size)
    if not keepdims:
        out_data = np.squeeze(out_data, axis=ax)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        full = np.zeros(x.shape)
        np.put_along_axis(full, idx, g, axis=ax)
        x._accumulate(full)

    return Value(out_data, (x,), backward, op)


def amax(x: Value, axis: int, keepdims=False) -> Value:
    """Max along one axis; the gradient goes to the first maximiser."""
    return _extreme(x, axis, keepdims, True, op="amax")


def amin(x: Value, axis: int, keepdims=False) -> Value:
    return _extreme(x, axis, keepdims, False, op="amin")


def masked_max(x: Value, mask, axis: int) -> Value:
    return _extreme(x, axis, False, True, mask=mask, op="masked_max")


def masked_min(x: Value, mask, axis: int) -> Value:
    return _extreme(x, axis, False, False, mask=mask, op="masked_min")


# -------------------------------------------------------------------- shaping

def reshape(x: Value, shape) -> Value:
    x = as_value(x)
    try:
        out_data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return Value(out_data, (x,), backward, "reshape")


def transpose(x: Value, axes=None) -> Value:
    x = as_value(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = np.transpose(x.data, axes)

    def backward(g):
        x._accumulate(np.transpose(g, inv))

    return Value(out_data, (x,), backward, "transpose")


def concat(values: Sequence[Value], axis: int = -1) -> Value:
    values = [as_value(v) for v in values]
    if not values:
        raise ShapeError("concat of nothing")
    ndim = values[0].ndim
    (ax,) = _norm_axis(axis, ndim)
    for v in values[1:]:
        if v.ndim != ndim or any(v.shape[i] != values[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat shape mismatch: {[v.shape for v in values]}")
    out_data = np.concatenate([v.data for v in values], axis=ax)
    bounds = np.cumsum([0] + [v.shape[ax] for v in values])

    def backward(g):
        for v, lo, hi in zip(values, bounds[:-1], bounds[1:]):
            v._accumulate(np.take(g, np.arange(lo, hi), axis=ax))

    return Value(out_data, tuple(values), backward, "concat")


def take(x: Value, indices, axis: int) -> Value:
    """Select entries along ``axis``, e.g. the active neurons of a branch."""
    x = as_value(x)
    (ax,) = _norm_axis(axis, x.ndim)
    indices = np.asarray(indices, dtype=np.intp)
    out_data = np.take(x.data, indices, axis=ax)

    def backward(g):
        full = np.zeros(x.shape)
        sl = [slice(None)] * x.ndim
        sl[ax] = indices
        np.add.at(full, tuple(sl), g)
        x._accumulate(full)

    return Value(out_data, (x,), backward, "take")


# ------------------------------------------------------------------ layers

def matmul(a: Value, b: Value) -> Value:
    a, b = as_value(a), as_value(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul {a.shape} @ {b.shape}")
    out_data = a.data @ b.data
    _flops("matmul", 2 * a.shape[0] * a.shape[1] * b.shape[1])

    def backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return Value(out_data, (a, b), backward, "matmul")


def dense(x: Value, weight: Value, bias: Value) -> Value:
    """Affine map ``x @ weight + bias`` for ``x`` of shape ``[N, D]``."""
    x, weight, bias = as_value(x), as_value(weight), as_value(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} vs {weight.shape[1]} units")
    out_data = x.data @ weight.data + bias.data
    n, d = x.shape
    u = weight.shape[1]
    _flops("dense", 2 * n * d * u + n * u)

    def backward(g):
        x._accumulate(g @ weight.data.T)
        weight._accumulate(x.data.T @ g)
        bias._accumulate(g.sum(axis=0))

    return Value(out_data, (x, weight, bias), backward, "dense")


def conv_output_size(size: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)
    return (size - k) // stride + 1


def _pad_amounts(size, k, stride, padding):
    if padding == "valid":
        return 0, 0
    out = conv_output_size(size, k, stride, padding)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d(x: Value, kernel: Value, stride: int = 1, padding: str = "same") -> Value:
    """2-D cross-correlation, NHWC input and ``kh, kw, C, F`` kernel."""
    x, kernel = as_value(x), as_value(kernel)
    if padding not in ("same", "valid"):
        raise ShapeError(f"padding must be 'same' or 'valid', got {padding!r}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[3] != kernel.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} vs kernel {kernel.shape}")
    n, h, w, c = x.shape
    kh, kw, _, f = kernel.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")
    pt, pb = _pad_amounts(h, kh, stride, padding)
    pl, pr = _pad_amounts(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, ho, wo, C, kh, kw) -> (N*ho*wo, kh*kw*C) matching the kernel layout
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c)
    kmat = kernel.data.reshape(kh * kw * c, f)
    out_data = (cols @ kmat).reshape(n, ho, wo, f)
    _flops("conv2d", 2 * n * ho * wo * kh * kw * c * f)

    def backward(g):
        g2 = g.reshape(n * ho * wo, f)
        kernel._accumulate((cols.T @ g2).reshape(kernel.shape))
        dcols = (g2 @ kmat.T).reshape(n, ho, wo, kh, kw, c)
        dxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride, :] += dcols[:, :, :, i, j, :]
        x._accumulate(dxp[:, pt : pt + h, pl : pl + w, :])

    return Value(out_data, (x, kernel), backward, "conv2d")


def batchnorm(
    x: Value,
    gamma: Value,
    beta: Value,
    mode: str = "train",
    running_mean=None,
    running_var=None,
    momentum: float = 0.99,
    epsilon: float = 1e-5,
) -> Value:
    """Batch normalisation over every axis but the last (channel) one.

    In train mode batch statistics are used; in infer mode the running
    statistics (defaulting to mean 0, var 1).  Running statistics are plain
    arrays owned by the caller; see :func:`updated_running_stats`.
    ``momentum`` is only consumed there and is accepted here for symmetry.
    """
    x, gamma, beta = as_value(x), as_value(gamma), as_value(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: {c} channels vs gamma {gamma.shape}, beta {beta.shape}")
    axes = tuple(range(x.ndim - 1))
    m = math.prod(x.shape[:-1])
    if mode == "train":
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        _flops("batchnorm", 8 * x.data.size)
    elif mode == "infer":
        mu = np.zeros(c) if running_mean is None else np.asarray(running_mean, dtype=np.float64)
        var = np.ones(c) if running_var is None else np.asarray(running_var, dtype=np.float64)
        _flops("batchnorm", 4 * x.data.size)
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = (x.data - mu) * inv
    out_data = gamma.data * xhat + beta.data

    def backward(g):
        gamma._accumulate((g * xhat).sum(axis=axes))
        beta._accumulate(g.sum(axis=axes))
        dxhat = g * gamma.data
        if mode == "train":
            dx = inv / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            dx = dxhat * inv
        x._accumulate(dx)

    return Value(out_data, (x, gamma, beta), backward, "batchnorm")


def updated_running_stats(x: Value, running_mean, running_var, momentum: float = 0.99):
    """Return the new running (mean, var) after observing batch ``x``."""
    axes = tuple(range(x.ndim - 1))
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    return (momentum * running_mean + (1 - momentum) * mu,
            momentum * running_var + (1 - momentum) * var)


def global_avg_pool(x: Value) -> Value:
    x = as_value(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NHWC, got {x.shape}")
    n, h, w, c = x.shape
    out_data = x.data.mean(axis=(1, 2))
    _flops("global_avg_pool", x.data.size)

    def backward(g):
        x._accumulate(np.broadcast_to(g[:, None, None, :] / (h * w), x.shape))

    return Value(out_data, (x,), backward, "global_avg_pool")


def interpolation_matrix(src: int, dst: int) -> np.ndarray:
    """1-D linear interpolation weights with half-pixel centers (align_corners=False)."""
    if src < 1 or dst < 1:
        raise ShapeError("resize dims must be >= 1")
    r = np.zeros((dst, src))
    scale = src / dst
    for o in range(dst):
        pos = min(max((o + 0.5) * scale - 0.5, 0.0), src - 1)
        i0 = int(math.floor(pos))
        i1 = min(i0 + 1, src - 1)
        t = pos - i0
        r[o, i0] += 1.0 - t
        r[o, i1] += t
    return r


def bilinear_resize(x: Value, target: tuple[int, int]) -> Value:
    """Bilinearly resample the last two axes ``[..., H, W]`` to ``target``."""
    x = as_value(x)
    if x.ndim < 2:
        raise ShapeError("bilinear_resize needs at least 2 dims")
    th, tw = int(target[0]), int(target[1])
    h, w = x.shape[-2:]
    if (th, tw) == (h, w):
        return x
    rh = interpolation_matrix(h, th)
    rw = interpolation_matrix(w, tw)
    out_data = np.einsum("ai,...ij,bj->...ab", rh, x.data, rw)
    _flops("bilinear_resize", 2 * (x.data.size // (h * w)) * (th * h * w + th * tw * w))

    def backward(g):
        x._accumulate(np.einsum("ai,...ab,bj->...ij", rh, g, rw))

    return Value(out_data, (x,), backward, "bilinear_resize")


def pairwise_l1(e: Value) -> Value:
    """Matrix of L1 distances between the rows of ``e`` (shape ``[n, n]``)."""
    e = as_value(e)
    if e.ndim != 2:
        raise ShapeError(f"pairwise_l1 expects [N, E], got {e.shape}")
    diff = e.data[:, None, :] - e.data[None, :, :]
    out_data = np.abs(diff).sum(axis=-1)
    _flops("pairwise_l1", 3 * diff.size)

    def backward(g):
        s = np.sign(diff) * g[:, :, None]
        e._accumulate(s.sum(axis=1) - s.sum(axis=0))

    return Value(out_data, (e,), backward, "pairwise_l1")


class Parameter:
    """Named model parameter wrapping a leaf :class:`Value`.

    The optimizer swaps in a fresh leaf on every update; the shape is fixed
    at construction.
    """

    def __init__(self, name: str, data, trainable: bool = True):
        self.name = name
        self.value = Value(np.array(data, dtype=np.float64))
        self.trainable = trainable

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self):
        return self.value.grad

    def assign(self, data):
        data = np.array(data, dtype=np.float64)
        if data.shape != self.shape:
            raise ShapeError(f"{self.name}: shape is fixed at {self.shape}, got {data.shape}")
        self.value = Value(data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"
