"""Small numpy-backed tensor with reverse-mode differentiation.

Every op records its parents and a closure that pushes the output gradient
back to them.  Values are float64 throughout.  Besides the math, every op
reports its forward cost to an optional :class:`FlopCounter` and the live
data buffers are tracked so benchmarks can read a high-water mark.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


# --------------------------------------------------------------------------
# instrumentation
# --------------------------------------------------------------------------


class FlopCounter:
    """Accumulates forward floating point operations, grouped by tag.

    Conventions: a multiply-add counts as 2, every other elementwise
    arithmetic or transcendental evaluation counts as 1.  Gathers, reshapes
    and concatenations are free.
    """

    def __init__(self):
        self.by_tag: dict[str, int] = {}

    def add(self, tag: str, flops: int):
        self.by_tag[tag] = self.by_tag.get(tag, 0) + int(flops)

    @property
    def total(self) -> int:
        return sum(self.by_tag.values())

    def matching(self, prefix: str) -> int:
        return sum(v for k, v in self.by_tag.items() if k == prefix or k.startswith(prefix + "."))


class _MemoryTracker:
    def __init__(self):
        self.current = 0
        self.peak = 0

    def alloc(self, nbytes: int):
        self.current += nbytes
        if self.current > self.peak:
            self.peak = self.current

    def free(self, nbytes: int):
        self.current -= nbytes

    def reset_peak(self):
        self.peak = self.current


_counters: list[FlopCounter] = []
_tags: list[str] = ["untagged"]
memory = _MemoryTracker()


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


@contextlib.contextmanager
def flop_tag(tag: str):
    """Attribute flops recorded inside the block to ``tag`` (nested tags join with '.')."""
    parent = _tags[-1]
    _tags.append(tag if parent == "untagged" else f"{parent}.{tag}")
    try:
        yield
    finally:
        _tags.pop()


def _record(flops: int):
    if _counters:
        tag = _tags[-1]
        for c in _counters:
            c.add(tag, flops)


# --------------------------------------------------------------------------
# tensor
# --------------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_nbytes")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = _backward
        self._nbytes = arr.nbytes
        memory.alloc(self._nbytes)

    def __del__(self):
        memory.free(self._nbytes)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def backward(self, grad=None):
        backward(self, grad)

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
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> Tensor:
        return mean(self, axis, keepdims)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.data.shape}")
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor, grad=None):
    """Propagate d(loss)/d(.) to every reachable tensor that requires grad."""
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss or an explicit grad, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    loss.grad = np.asarray(grad, dtype=DTYPE) if loss.grad is None else loss.grad + grad
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node._parents:
                # interior node: free its gradient, leaves keep theirs
                node.grad = None


# --------------------------------------------------------------------------
# elementwise arithmetic
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    _record(out.size)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    _record(out.size)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    _record(out.size)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), bw)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    _record(s.size)

    def bw(g):
        _accum(x, g * s * (1.0 - s))

    return _make(s, (x,), bw)


def swish(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    out = x.data * s
    _record(2 * s.size)

    def bw(g):
        _accum(x, g * (s + x.data * s * (1.0 - s)))

    return _make(out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    _record(out.size)

    def bw(g):
        _accum(x, g * (x.data > 0))

    return _make(out, (x,), bw)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# --------------------------------------------------------------------------
# linear algebra and reductions
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes, numpy broadcasting on the rest."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)
    _record(2 * out.size * a.shape[-1])

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(out, (a, b), bw)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    _record(x.size)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape).copy())

    return _make(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / count)


# --------------------------------------------------------------------------
# shape manipulation
# --------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bw(g):
        _accum(x, g.reshape(x.shape))

    return _make(out, (x,), bw)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    out = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        _accum(x, np.transpose(g, inverse))

    return _make(out, (x,), bw)


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def broadcast_to(x: Tensor, shape) -> Tensor:
    out = np.broadcast_to(x.data, shape)

    def bw(g):
        _accum(x, _unbroadcast(g, x.shape))

    return _make(out, (x,), bw)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in parts)

    def bw(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        _accum(x, gx)

    return _make(np.array(out), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(out, tensors, bw)


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Per-batch row gather: ``out[b, ...] = x[b, index[b, ...]]``.

    ``x`` has shape [N, L, *rest]; ``index`` is an integer array [N, *q].
    """
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != x.shape[0]:
        raise ShapeError(f"gather: batch mismatch between {x.shape} and index {index.shape}")
    batch = np.arange(x.shape[0]).reshape((-1,) + (1,) * (index.ndim - 1))
    out = x.data[batch, index]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (np.broadcast_to(batch, index.shape), index), g)
        _accum(x, gx)

    return _make(out, (x,), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding id out of range [0, {vocab}): min={ids.min()}, max={ids.max()}")
    out = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accum(table, gt)

    return _make(out, (table,), bw)


def mean_pool(x: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    """Segment mean over axis 1.

    ``x`` is [N, L, d] and ``segments`` an integer array [N, L] assigning each
    row to a segment in ``[0, num_segments)``; rows marked -1 are ignored.
    Empty segments give zero rows.
    """
    segments = np.asarray(segments, dtype=np.int64)
    n, length, d = x.shape
    if segments.shape != (n, length):
        raise ShapeError(f"mean_pool: segments {segments.shape} do not match input {x.shape}")
    keep = segments >= 0
    flat = (np.arange(n)[:, None] * num_segments + segments)[keep]
    sums = np.zeros((n * num_segments, d))
    np.add.at(sums, flat, x.data[keep])
    counts = np.bincount(flat, minlength=n * num_segments).astype(DTYPE)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    out = (sums * inv[:, None]).reshape(n, num_segments, d)
    _record(int(keep.sum()) * d + n * num_segments * d)

    def bw(g):
        scaled = g.reshape(n * num_segments, d) * inv[:, None]
        gx = np.zeros_like(x.data)
        gx[keep] = scaled[flat]
        _accum(x, gx)

    return _make(out, (x,), bw)


# --------------------------------------------------------------------------
# fused layers
# --------------------------------------------------------------------------


def softmax_masked(logits: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis restricted to ``mask``.

    Masked entries are exactly zero; a row with no unmasked entry is all zero.
    ``mask`` broadcasts against ``logits``.
    """
    x = logits.data
    m = np.ones(x.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    z = np.where(m, x, -np.inf)
    rowmax = np.max(z, axis=-1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    e = np.where(m, np.exp(np.where(m, x - rowmax, 0.0)), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    out = e / np.where(total > 0, total, 1.0)
    _record(4 * x.size)

    def bw(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        _accum(logits, out * (g - dot))

    return _make(out, (logits,), bw)


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Divide each row (last axis) by its root mean square, then scale by ``gain``."""
    if x.shape[-1] != gain.shape[-1]:
        raise ShapeError(f"rmsnorm: gain {gain.shape} does not match input {x.shape}")
    inv = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    xhat = x.data * inv
    out = xhat * gain.data
    _record(4 * x.size)

    def bw(g):
        if gain.requires_grad:
            _accum(gain, _unbroadcast(g * xhat, gain.shape))
        if x.requires_grad:
            gx_hat = g * gain.data
            proj = np.mean(gx_hat * xhat, axis=-1, keepdims=True)
            _accum(x, inv * (gx_hat - xhat * proj))

    return _make(out, (x, gain), bw)


def bce_loss(pred: Tensor, labels, clamp: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy; predictions are clamped to [clamp, 1 - clamp]."""
    y = np.asarray(labels, dtype=DTYPE)
    if y.shape != pred.shape:
        raise ShapeError(f"bce_loss: labels {y.shape} vs predictions {pred.shape}")
    p = np.clip(pred.data, clamp, 1.0 - clamp)
    count = p.size
    value = -np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    _record(5 * count)

    def bw(g):
        inside = (pred.data > clamp) & (pred.data < 1.0 - clamp)
        gp = (-(y / p) + (1.0 - y) / (1.0 - p)) / count
        _accum(pred, g * gp * inside)

    return _make(np.asarray(value), (pred,), bw)


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    scale = math.sqrt(2.0 / (fan_in + fan_out))
    return parameter(rng.normal(0.0, scale, size=shape or (fan_in, fan_out)))
