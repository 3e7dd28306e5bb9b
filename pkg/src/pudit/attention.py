"""Multi-head attention, zero-initialized projections and the gate MLP."""

from __future__ import annotations

import copy
import math

import numpy as np

from .errors import ShapeMismatch
from .nn import Module, normal, zeros
from .tensor import Tensor, gelu, permute, reshape, scale, sigmoid, softmax_lastaxis


class MultiHeadAttentionParams(Module):
    """Bias-free Q/K/V/O projections, each ``[d, d]``."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator | None = None):
        if d % heads:
            raise ShapeMismatch(f"d={d} is not divisible by heads={heads}")
        self.heads = heads
        std = 1.0 / math.sqrt(d)
        make = (lambda: normal(rng, (d, d), std)) if rng is not None else (lambda: zeros(d, d))
        self.wq = make()
        self.wk = make()
        self.wv = make()
        self.wo = make()

    @property
    def d(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    def clone(self) -> "MultiHeadAttentionParams":
        """Deep copy; tensors never alias the original."""
        twin = copy.copy(self)
        for name in ("wq", "wk", "wv", "wo"):
            src = getattr(self, name)
            setattr(twin, name, Tensor(src.data.copy(), dtype=src.dtype))
        return twin

    def __call__(self, q_in: Tensor, kv_in: Tensor | None = None) -> Tensor:
        return mha(q_in, q_in if kv_in is None else kv_in, self)


def mha(q_in: Tensor, kv_in: Tensor, p: MultiHeadAttentionParams) -> Tensor:
    """softmax(Q K^T / sqrt(head_dim)) V per head, concatenated, then W_o."""
    if q_in.ndim != 3 or kv_in.ndim != 3:
        raise ShapeMismatch(f"mha expects [N,S,d] inputs, got {q_in.shape} and {kv_in.shape}")
    n, s, d = q_in.shape
    if kv_in.shape[0] != n or kv_in.shape[2] != d or d != p.d:
        raise ShapeMismatch(f"mha: q {q_in.shape}, kv {kv_in.shape}, params d={p.d}")
    t = kv_in.shape[1]
    h, hd = p.heads, p.head_dim
    q = permute(reshape(q_in @ p.wq, (n, s, h, hd)), (0, 2, 1, 3))
    k = permute(reshape(kv_in @ p.wk, (n, t, h, hd)), (0, 2, 3, 1))
    v = permute(reshape(kv_in @ p.wv, (n, t, h, hd)), (0, 2, 1, 3))
    weights = softmax_lastaxis(scale(q @ k, 1.0 / math.sqrt(hd)))
    out = reshape(permute(weights @ v, (0, 2, 1, 3)), (n, s, d))
    return out @ p.wo


class ZeroLinearParams(Module):
    def __init__(self, d: int):
        self.weight = zeros(d, d)
        self.bias = zeros(d)

    def __call__(self, x: Tensor) -> Tensor:
        return zero_linear(x, self)


def zero_linear(x: Tensor, p: ZeroLinearParams) -> Tensor:
    if x.shape[-1] != p.weight.shape[0]:
        raise ShapeMismatch(f"zero_linear: trailing extent {x.shape[-1]} != {p.weight.shape[0]}")
    return x @ p.weight + p.bias


class GateProjParams(Module):
    """Two-layer MLP with GELU inside and a sigmoid on the output."""

    def __init__(self, d: int, hidden: int | None = None, rng: np.random.Generator | None = None):
        hidden = d if hidden is None else hidden
        if rng is None:
            self.w1, self.w2 = zeros(d, hidden), zeros(hidden, d)
        else:
            self.w1 = normal(rng, (d, hidden), 1.0 / math.sqrt(d))
            self.w2 = normal(rng, (hidden, d), 1.0 / math.sqrt(hidden))
        self.b1 = zeros(hidden)
        self.b2 = zeros(d)

    def __call__(self, ctx: Tensor) -> Tensor:
        return gate_project(ctx, self)


def gate_project(ctx: Tensor, p: GateProjParams) -> Tensor:
    if ctx.shape[-1] != p.w1.shape[0]:
        raise ShapeMismatch(f"gate_project: trailing extent {ctx.shape[-1]} != {p.w1.shape[0]}")
    return sigmoid(gelu(ctx @ p.w1 + p.b1) @ p.w2 + p.b2)
