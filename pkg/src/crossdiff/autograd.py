"""Minimal reverse-mode autodiff over numpy arrays.

A ``Tensor`` wraps an ndarray plus an optional backward closure; ops
chain closures into a tape that ``backward()`` walks in reverse
topological order. Inside a ``no_grad()`` block ops skip tape
construction entirely, which is what the sampling loop relies on.

Convolution forward/backward lean on the im2col/col2im kernels from
``crossdiff.kernels`` (numba or numpy, chosen at import time); matmuls
go straight to BLAS.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

from . import kernels

_GRAD_ENABLED = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable tape construction within the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without gradient requires a scalar")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- conveniences --------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, pow_const(other, -1.0))
        return mul(self, 1.0 / other)

    def __pow__(self, e):
        return pow_const(self, e)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ops ---------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out_data = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor._result(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out_data = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor._result(out_data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(-g)

    return Tensor._result(-a.data, (a,), backward)


def pow_const(a, e: float) -> Tensor:
    a = as_tensor(a)
    out_data = a.data ** e

    def backward(g):
        a._accumulate(g * (e * a.data ** (e - 1.0)))

    return Tensor._result(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return Tensor._result(out_data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g / a.data)

    return Tensor._result(np.log(a.data), (a,), backward)


def _sigmoid_raw(x: np.ndarray) -> np.ndarray:
    # clip keeps exp in range; sigmoid is saturated far beyond +-60 anyway
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out_data = _sigmoid_raw(a.data)

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return Tensor._result(out_data, (a,), backward)


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid_raw(a.data)
    out_data = a.data * s

    def backward(g):
        a._accumulate(g * (s * (1.0 + a.data * (1.0 - s))))

    return Tensor._result(out_data, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return Tensor._result(out_data, (a,), backward)


def softmax(a) -> Tensor:
    """Softmax along the last axis."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        gy = g * out_data
        a._accumulate(gy - out_data * gy.sum(axis=-1, keepdims=True))

    return Tensor._result(out_data, (a,), backward)


# -- shape ops ----------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old_shape = a.data.shape

    def backward(g):
        a._accumulate(g.reshape(old_shape))

    return Tensor._result(a.data.reshape(shape), (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(g.transpose(inv))

    return Tensor._result(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.data.shape

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, in_shape))
            return
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        a._accumulate(np.broadcast_to(g, in_shape))

    return Tensor._result(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    in_shape = a.data.shape
    if axis is None:
        n = int(a.data.size)
    else:
        n = 1
        for ax in axis if isinstance(axis, tuple) else (axis,):
            n *= int(in_shape[ax])

    def backward(g):
        gg = g / n
        if axis is None:
            a._accumulate(np.broadcast_to(gg, in_shape).astype(a.dtype, copy=False))
            return
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        a._accumulate(np.broadcast_to(gg, in_shape).astype(a.dtype, copy=False))

    return Tensor._result(out_data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accumulate(g[tuple(sl)])

    return Tensor._result(out_data, tuple(tensors), backward)


def matmul(a, b) -> Tensor:
    """Matrix product. Both operands 2-D, or both batched with equal
    leading dims (no cross-batch broadcasting)."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        if a.data.shape[:-2] != b.data.shape[:-2]:
            raise ValueError(
                f"batched matmul requires matching leading dims, got {a.shape} @ {b.shape}"
            )
    out_data = a.data @ b.data

    def backward(g):
        a._accumulate(g @ b.data.swapaxes(-1, -2))
        b._accumulate(a.data.swapaxes(-1, -2) @ g)

    return Tensor._result(out_data, (a, b), backward)


# -- structured ops ------------------------------------------------------------


def embedding(table, idx) -> Tensor:
    """Row lookup: table (T, D), idx int array -> (len(idx), D)."""
    table = as_tensor(table)
    idx = np.asarray(idx)
    out_data = table.data[idx]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        table._accumulate(gt)

    return Tensor._result(out_data, (table,), backward)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation). x (N,C,H,W), w (O,C,KH,KW)."""
    x = as_tensor(x)
    w = as_tensor(w)
    n, c, h, wd = x.data.shape
    o, ci, kh, kw = w.data.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {ci}")
    oh = kernels.conv_out_size(h, kh, stride, padding)
    ow = kernels.conv_out_size(wd, kw, stride, padding)
    cols = kernels.im2col(x.data, kh, kw, stride, padding)  # (N, C*KH*KW, OH*OW)
    wr = w.data.reshape(o, c * kh * kw)
    y = wr @ cols                                           # (N, O, OH*OW)
    if b is not None:
        b = as_tensor(b)
        y = y + b.data[None, :, None]
    out_data = y.reshape(n, o, oh, ow)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gr = g.reshape(n, o, oh * ow)
        w._accumulate(
            np.matmul(gr, cols.swapaxes(1, 2)).sum(axis=0).reshape(w.data.shape)
        )
        if b is not None:
            b._accumulate(gr.sum(axis=(0, 2)))
        dcols = wr.T @ gr                                   # (N, C*KH*KW, OH*OW)
        x._accumulate(kernels.col2im(dcols, n, c, h, wd, kh, kw, stride, padding))

    return Tensor._result(out_data, parents, backward)


def conv_transpose2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 2-D convolution, the exact adjoint of ``conv2d`` with the
    same stride/padding. x (N,C,H,W), w (C,O,KH,KW);
    output side = stride*(H-1) + KH - 2*padding."""
    x = as_tensor(x)
    w = as_tensor(w)
    n, c, h, wd = x.data.shape
    ci, o, kh, kw = w.data.shape
    if ci != c:
        raise ValueError(f"conv_transpose2d channel mismatch: input {c}, weight {ci}")
    oh = stride * (h - 1) + kh - 2 * padding
    ow = stride * (wd - 1) + kw - 2 * padding
    xr = x.data.reshape(n, c, h * wd)
    wr = w.data.reshape(c, o * kh * kw)
    cols = np.matmul(wr.T, xr)                              # (N, O*KH*KW, H*W)
    out_data = kernels.col2im(cols, n, o, oh, ow, kh, kw, stride, padding)
    if b is not None:
        b = as_tensor(b)
        out_data = out_data + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        dcols = kernels.im2col(g, kh, kw, stride, padding)  # (N, O*KH*KW, H*W)
        x._accumulate(np.matmul(wr, dcols).reshape(x.data.shape))
        w._accumulate(
            np.matmul(xr, dcols.swapaxes(1, 2)).sum(axis=0).reshape(w.data.shape)
        )
        if b is not None:
            b._accumulate(g.sum(axis=(0, 2, 3)))

    return Tensor._result(out_data, parents, backward)


def _overlap_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-stochastic area-overlap matrix (n_out, n_in): each output cell
    averages the input cells it covers, with fractional edge weights.
    Conserves total mass under the cell-area measure and maps constants
    to the same constant, for any size ratio."""
    r = n_in / n_out
    m = np.zeros((n_out, n_in), dtype=dtype)
    for o in range(n_out):
        lo = o * r
        hi = (o + 1) * r
        i0 = int(np.floor(lo))
        i1 = min(n_in, int(np.ceil(hi)))
        for i in range(i0, i1):
            m[o, i] = min(hi, i + 1) - max(lo, i)
    return m / r


_overlap_cache: dict = {}


def _overlap_cached(n_in, n_out, dtype):
    key = (n_in, n_out, np.dtype(dtype).str)
    if key not in _overlap_cache:
        _overlap_cache[key] = _overlap_matrix(n_in, n_out, dtype)
    return _overlap_cache[key]


def resample_area(x, out_hw) -> Tensor:
    """Area-weighted spatial resampling of (N, C, H, W) to (oh, ow)."""
    x = as_tensor(x)
    n, c, h, w = x.data.shape
    oh, ow = out_hw
    rh = _overlap_cached(h, oh, x.dtype)
    rw = _overlap_cached(w, ow, x.dtype)
    xr = x.data.reshape(n * c, h, w)
    y = rh @ xr @ rw.T
    out_data = y.reshape(n, c, oh, ow)

    def backward(g):
        gr = g.reshape(n * c, oh, ow)
        gx = rh.T @ gr @ rw
        x._accumulate(gx.reshape(n, c, h, w))

    return Tensor._result(out_data, (x,), backward)
