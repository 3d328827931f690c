"""Layers and parameter bookkeeping on top of the autodiff core.

Initialization conventions: linear weights uniform in +-1/sqrt(fan_in),
biases zero, embedding tables N(0, 0.02^2). Every stochastic draw comes from
an explicitly threaded numpy Generator.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T


class Module:
    """Minimal parameter container: children and parameters found by attribute walk."""

    def named_parameters(self, prefix=""):
        out = []
        for name, value in vars(self).items():
            path = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            if isinstance(value, T.Tensor) and value.requires_grad:
                out.append((path, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(path))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{path}.{i}"))
                    elif isinstance(item, T.Tensor) and item.requires_grad:
                        out.append((f"{path}.{i}", item))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]


def uniform_init(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return T.Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def normal_init(rng, shape, std, dtype):
    return T.Tensor((rng.normal(0.0, std, size=shape)).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype):
    return T.Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype):
    return T.Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, dtype, zero_init=False):
        if zero_init:
            self.w = zeros_param((d_in, d_out), dtype)
        else:
            self.w = uniform_init(rng, (d_in, d_out), d_in, dtype)
        self.b = zeros_param((d_out,), dtype)

    def __call__(self, x):
        return T.add(T.matmul(x, self.w), self.b)


class LayerNorm(Module):
    def __init__(self, d, dtype, eps=1e-6):
        self.gain = ones_param((d,), dtype)
        self.bias = zeros_param((d,), dtype)
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Mlp(Module):
    """Two-layer MLP with ReLU, the FFN/expert shape used throughout."""

    def __init__(self, d_in, d_hidden, d_out, rng, dtype, zero_last=False):
        self.fc1 = Linear(d_in, d_hidden, rng, dtype)
        self.fc2 = Linear(d_hidden, d_out, rng, dtype, zero_init=zero_last)

    def __call__(self, x):
        return self.fc2(T.relu(self.fc1(x)))


class Embedding(Module):
    def __init__(self, n, d, rng, dtype, std=0.02):
        self.table = normal_init(rng, (n, d), std, dtype)

    def __call__(self, idx):
        return T.index_select(self.table, np.asarray(idx, dtype=np.intp))


class MultiHeadAttention(Module):
    """Projected dot-product attention; returns output and head-averaged weights.

    Single head by default; with h heads the model width is split evenly.
    """

    def __init__(self, d_model, n_heads, rng, dtype):
        if d_model % n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = Linear(d_model, d_model, rng, dtype)
        self.wk = Linear(d_model, d_model, rng, dtype)
        self.wv = Linear(d_model, d_model, rng, dtype)
        self.wo = Linear(d_model, d_model, rng, dtype)

    def _split(self, x, b, s):
        # (B, S, D) -> (B, H, S, Dh)
        return T.transpose(T.reshape(x, (b, s, self.n_heads, self.d_head)), (0, 2, 1, 3))

    def __call__(self, q, kv):
        """q: (B, n, D), kv: (B, m, D) -> ((B, n, D), weights (B, n, m))."""
        b, n, _ = q.shape
        m = kv.shape[1]
        qh = self._split(self.wq(q), b, n)
        kh = self._split(self.wk(kv), b, m)
        vh = self._split(self.wv(kv), b, m)
        out, w = T.scaled_dot_attention(qh, kh, vh)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, n, self.n_heads * self.d_head))
        return self.wo(out), T.mean_(w, axis=1)
