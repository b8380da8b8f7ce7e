"""Minimal reverse-mode autodiff over numpy float64 arrays.

Only the operations the captioner needs are implemented.  Tensors wrap
ndarrays; each op records a backward closure on the output node.  Gradients
are exact derivatives (no straight-through tricks), so central finite
differences can be used as an independent oracle.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

_grad_enabled = True

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class no_grad:
    """Context manager: ops executed inside build no graph."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._bwd = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars stay scalars (no Tensor wrapping)
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _node(data: np.ndarray, parents: tuple, bwd) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
    else:
        out.requires_grad = False
        out._parents = ()
        out._bwd = None
    return out


def add(a, b) -> Tensor:
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):  # tensor + scalar/ndarray constant
        bdata = b

        def bwd(g, a=a):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.data.shape))

        return _node(a.data + bdata, (a,), bwd)

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _node(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return add(a, -b if np.isscalar(b) else np.negative(b))
    if not isinstance(a, Tensor):
        return add(mul(b, -1.0), a)

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _node(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        bdata = b

        def bwd(g, a=a, bdata=bdata):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * bdata, a.data.shape))

        return _node(a.data * bdata, (a,), bwd)

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), bwd)


def div(a, b) -> Tensor:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return mul(a, 1.0 / b)
    a = as_tensor(a)
    b = as_tensor(b)

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(a.data / b.data, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    return _node(a.data @ b.data, (a, b), bwd)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def bwd(g, x=x, out_data=out_data):
        _accum(x, g * out_data)

    return _node(out_data, (x,), bwd)


def log_clamped(x: Tensor, floor: float = 1e-12) -> Tensor:
    """log(max(x, floor)); gradient is 1/x where x > floor and 0 where clamped."""
    xd = x.data

    def bwd(g, x=x, xd=xd, floor=floor):
        _accum(x, np.where(xd > floor, g / np.maximum(xd, floor), 0.0))

    return _node(np.log(np.maximum(xd, floor)), (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def bwd(g, x=x, xd=xd, cdf=cdf):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        _accum(x, g * (cdf + xd * pdf))

    return _node(xd * cdf, (x,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g, x=x, s=s, axis=axis):
        _accum(x, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _node(s, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out_data = y * gain.data + bias.data

    def bwd(g, x=x, gain=gain, bias=bias, y=y, inv=inv):
        if gain.requires_grad:
            _accum(gain, (g * y).reshape(-1, y.shape[-1]).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, y.shape[-1]).sum(axis=0))
        if x.requires_grad:
            dy = g * gain.data
            _accum(
                x,
                inv
                * (
                    dy
                    - dy.mean(axis=-1, keepdims=True)
                    - y * (dy * y).mean(axis=-1, keepdims=True)
                ),
            )

    return _node(out_data, (x, gain, bias), bwd)


def gather(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup table[idx]; duplicate indices accumulate on backward."""
    idx = np.asarray(idx, dtype=np.intp)

    def bwd(g, table=table, idx=idx):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx, g)

    return _node(table.data[idx], (table,), bwd)


def take_rows(mat: Tensor, cols: np.ndarray) -> Tensor:
    """Per-row element pick: out[t] = mat[t, cols[t]]."""
    cols = np.asarray(cols, dtype=np.intp)
    rows = np.arange(mat.data.shape[0])

    def bwd(g, mat=mat, rows=rows, cols=cols):
        if mat.grad is None:
            mat.grad = np.zeros_like(mat.data)
        np.add.at(mat.grad, (rows, cols), g)

    return _node(mat.data[rows, cols], (mat,), bwd)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(g, x=x, axis=axis, keepdims=keepdims):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape))

    return _node(x.data.sum(axis=axis, keepdims=keepdims), (x,), bwd)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    def bwd(g, x=x):
        _accum(x, g.reshape(x.data.shape))

    return _node(x.data.reshape(shape), (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    inv_axes = tuple(np.argsort(axes))

    def bwd(g, x=x, inv_axes=inv_axes):
        _accum(x, g.transpose(inv_axes))

    return _node(x.data.transpose(axes), (x,), bwd)


def backward(root: Tensor) -> None:
    """Accumulate gradients of a scalar root into every reachable leaf."""
    if root.data.size != 1:
        raise ValueError("backward expects a scalar loss")
    if not root.requires_grad:
        return
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._bwd is not None:
            node._bwd(node.grad)
