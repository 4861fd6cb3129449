"""Small nn.Module building blocks written against the numerics primitives."""

from __future__ import annotations

import math

import torch
from torch import nn

from . import numerics as nx


class Dense(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True, zero_init: bool = False):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_in, d_out))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None
        if zero_init:
            nn.init.zeros_(self.weight)
        else:
            bound = 1.0 / math.sqrt(d_in)
            nn.init.uniform_(self.weight, -bound, bound)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = nx.matmul(x, self.weight)
        return nx.add(y, self.bias) if self.bias is not None else y


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nx.layer_norm(x, self.weight, self.bias, self.eps)


class FeedForward(nn.Module):
    """Pre-norm residual MLP."""

    def __init__(self, d: int, mult: int = 4):
        super().__init__()
        self.norm = LayerNorm(d)
        self.up = Dense(d, mult * d)
        self.down = Dense(mult * d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.down(nx.gelu(self.up(self.norm(x))))


class ResidualBlock(nn.Module):
    """Two-layer MLP with a linear skip: ``W2 gelu(W1 x) + Wr x``."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.hidden = Dense(d_in, d_hidden)
        self.out = Dense(d_hidden, d_out)
        self.skip = Dense(d_in, d_out, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(nx.gelu(self.hidden(x))) + self.skip(x)


class MultiHeadAttention(nn.Module):
    """Pre-norm multi-head attention returning the residual update only.

    ``forward(x_q, x_kv, mask)`` with x_q ``[..., Lq, D]``, x_kv ``[..., Lk, D]``
    and mask ``[..., Lq, Lk]`` (bool allow or additive). ``positions`` turns on
    rotary phases for queries and keys.
    """

    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ValueError(f"hidden dim {d} not divisible by {heads} heads")
        self.d, self.heads = d, heads
        self.norm_q = LayerNorm(d)
        self.norm_kv = LayerNorm(d)
        self.q = Dense(d, d, bias=False)
        self.k = Dense(d, d, bias=False)
        self.v = Dense(d, d, bias=False)
        self.o = Dense(d, d, bias=False)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, length, _ = x.shape
        return x.reshape(*lead, length, self.heads, self.d // self.heads).transpose(-3, -2)

    def forward(self, x_q, x_kv=None, mask=None, positions=None, return_weights=False):
        self_attn = x_kv is None
        hq = self.norm_q(x_q)
        hkv = hq if self_attn else self.norm_kv(x_kv)
        q, k, v = self._split(self.q(hq)), self._split(self.k(hkv)), self._split(self.v(hkv))
        if positions is not None:
            q = nx.apply_rotary(q, positions)
            k = nx.apply_rotary(k, positions)
        out = nx.attention(q, k, v, mask, return_weights=return_weights)
        if return_weights:
            out, w = out
        *lead, h, length, dh = out.shape
        out = self.o(out.transpose(-3, -2).reshape(*lead, length, h * dh))
        return (out, w) if return_weights else out
