"""Reverse-mode autodiff over numpy arrays.

Each primitive records its inputs and a vector-Jacobian closure on the output
tensor; the tape is this implicit graph. `Tensor.backward()` replays it in
reverse topological order and accumulates gradients on every tensor that
requires them. Data buffers are treated as immutable once a tensor is built.

Float width is carried by the underlying array: float64 for oracle/gradient
tests, float32 for training speed.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import kernels

_grad_enabled = True

MASK_OFF = -1e30  # additive mask value; exp() underflows to exactly 0


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    # -- introspection ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    # -- autodiff -----------------------------------------------------------

    def backward(self):
        """Accumulate gradients of this scalar into every reachable tensor."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ValueError("loss is detached: nothing on the tape requires grad")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for t in reversed(order):
            if t._vjp is None:
                continue
            gs = t._vjp(t.grad)
            for p, g in zip(t._parents, gs):
                if not p.requires_grad or g is None:
                    continue
                if p.grad is None:
                    p.grad = g.astype(p.data.dtype, copy=True)
                else:
                    p.grad += g

    def zero_grad(self):
        self.grad = None

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), -self)

    def __truediv__(self, other):
        return div(self, other)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or not isinstance(shape[0], tuple) else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def swap_last(self):
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(self, tuple(axes))


def _topo_order(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad:
                stack.append((p, False))
    return order


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, vjp):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise primitives --------------------------------------------------


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    data = a.data + b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    data = a.data * b.data
    return _make(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    data = a.data / b.data
    return _make(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def pow_scalar(a, p):
    a = _as_tensor(a)
    p = float(p)
    data = a.data**p
    return _make(data, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a):
    a = _as_tensor(a)
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,))


def log(a):
    a = _as_tensor(a)
    data = np.log(a.data)
    return _make(data, (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = _as_tensor(a)
    data = np.sqrt(a.data)
    return _make(data, (a,), lambda g: (g * (0.5 / data),))


def abs_(a):
    a = _as_tensor(a)
    data = np.abs(a.data)
    return _make(data, (a,), lambda g: (g * np.sign(a.data),))


def relu(a):
    a = _as_tensor(a)
    data = np.maximum(a.data, 0)
    return _make(data, (a,), lambda g: (g * (a.data > 0),))


# -- reductions and shape ops -------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(a.dtype, copy=False),)

    return _make(data, (a,), vjp)


def mean_(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(n))


def reshape(a, shape):
    a = _as_tensor(a)
    data = a.data.reshape(shape)
    return _make(data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    a = _as_tensor(a)
    data = a.data.transpose(axes)
    inv = np.argsort(axes)
    return _make(data, (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tensors, vjp)


def take(a, key):
    """Basic indexing/slicing (no repeated elements) with scatter adjoint."""
    a = _as_tensor(a)
    data = a.data[key]

    def vjp(g):
        buf = np.zeros_like(a.data)
        buf[key] += g
        return (buf,)

    return _make(data, (a,), vjp)


def index_select(a, idx):
    """Gather rows along axis 0; idx is an integer array (may repeat)."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    data = a.data[idx]

    def vjp(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        return (buf,)

    return _make(data, (a,), vjp)


def scatter_rows(vals, idx, dim0):
    """Place rows of vals at positions idx of a zero (dim0, ...) tensor.

    idx must not repeat; the adjoint is a plain gather.
    """
    vals = _as_tensor(vals)
    idx = np.asarray(idx, dtype=np.intp)
    data = np.zeros((dim0,) + vals.shape[1:], dtype=vals.dtype)
    data[idx] = vals.data
    return _make(data, (vals,), lambda g: (g[idx],))


# -- linear algebra ------------------------------------------------------------


def matmul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs 2-D+ operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
            gb = _unbroadcast(gb, b.shape)
        return (_unbroadcast(ga, a.shape), gb)

    return _make(data, (a, b), vjp)


# -- softmax family ------------------------------------------------------------


def softmax(a, axis=-1, mask=None):
    """Shift-invariant softmax; optional additive mask (use MASK_OFF to drop)."""
    a = _as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ValueError("empty logits")
    x = a.data if mask is None else a.data + mask
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - dot),)

    return _make(p, (a,), vjp)


def log_softmax(a, axis=-1):
    a = _as_tensor(a)
    if a.data.size == 0:
        raise ValueError("empty logits")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(ls) * g.sum(axis=axis, keepdims=True),)

    return _make(ls, (a,), vjp)


def layer_norm(x, gain, bias, eps=1e-6):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = _as_tensor(x)
    gain = _as_tensor(gain, x.dtype)
    bias = _as_tensor(bias, x.dtype)
    d = x.shape[-1]
    if gain.shape[-1] != d or bias.shape[-1] != d:
        raise ValueError(f"layer_norm length mismatch: x has {d}, gain {gain.shape[-1]}, bias {bias.shape[-1]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def vjp(g):
        gg = g * gain.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        dgain = (g * xhat).sum(axis=lead) if lead else g * xhat
        dbias = g.sum(axis=lead) if lead else g
        return (gx.astype(x.dtype, copy=False), _unbroadcast(dgain, gain.shape), _unbroadcast(dbias, bias.shape))

    return _make(data, (x, gain, bias), vjp)


# -- attention -----------------------------------------------------------------


def scaled_dot_attention(q, k, v):
    """Dot-product attention.

    q: (..., n, d), k: (..., m, d), v: (..., m, dv). Returns the attended
    output and the row-stochastic weight matrix (..., n, m).
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"attention dim mismatch: Q {q.shape} vs K {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention key/value mismatch: K {k.shape} vs V {v.shape}")
    scores = mul(matmul(q, k.swap_last()), 1.0 / math.sqrt(q.shape[-1]))
    weights = softmax(scores, axis=-1)
    return matmul(weights, v), weights


# -- convolution ---------------------------------------------------------------


def _same_pad(size, k, s):
    if size % s != 0:
        raise ValueError(f"extent {size} not divisible by stride {s}")
    total = max((size // s - 1) * s + k - size, 0)
    return total // 2, total - total // 2


def im2col_op(x, kh, kw, sh, sw, pads):
    x = _as_tensor(x)
    b, h, w, c = x.shape
    ph0, ph1, pw0, pw1 = pads
    data = kernels.im2col(np.ascontiguousarray(x.data), kh, kw, sh, sw, ph0, ph1, pw0, pw1)

    def vjp(g):
        return (kernels.col2im(np.ascontiguousarray(g), b, h, w, c, kh, kw, sh, sw, ph0, ph1, pw0, pw1),)

    return _make(data, (x,), vjp)


def conv2d(x, w, b, stride):
    """Strided conv with same-style zero padding so out extent = in extent / stride.

    x: (B, H, W, Cin), w: (kh, kw, Cin, Cout), b: (Cout,).
    """
    x = _as_tensor(x)
    bsz, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ph = _same_pad(h, kh, stride)
    pw = _same_pad(wd, kw, stride)
    cols = im2col_op(x, kh, kw, stride, stride, ph + pw)
    y = add(matmul(cols, reshape(w, (kh * kw * cin, cout))), b)
    return reshape(y, (bsz, h // stride, wd // stride, cout))


# -- distributions -------------------------------------------------------------


@dataclass
class DiagGaussian:
    """Diagonal Gaussian held as (mu, logvar) tensors of equal length."""

    mu: Tensor
    logvar: Tensor

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise ValueError(f"mu/logvar shape mismatch: {self.mu.shape} vs {self.logvar.shape}")
        if not np.all(np.isfinite(self.logvar.data)):
            raise ValueError("logvar must be finite")


def kl_diag_gaussian_to_standard(q: DiagGaussian):
    """KL(q || N(0, I)) summed over the last axis: 0.5*sum(exp(lv) + mu^2 - 1 - lv)."""
    term = add(add(exp(q.logvar), mul(q.mu, q.mu)), -1.0)
    return mul(sum_(add(term, -q.logvar), axis=-1), 0.5)


def gradients(loss, wrt):
    """Backward pass returning one gradient array per tensor in wrt."""
    for t in wrt:
        t.zero_grad()
    loss.backward()
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in wrt]
