"""Single-head scaled dot-product attention and channel-split multi-head
attention with a final mapping weight.

All maps are bias-free. The softmax scaling divisor defaults to the full
inner width d of the enclosing multi-head layer, shared by every head; a
per-head sqrt(d/n) convention is available behind ``per_head_scale``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import ContractError, ShapeError, Tensor


@dataclass
class MultiHeadWeights:
    """Projection weights of one multi-head attention layer.

    w_q, w_k, w_v: [C, d]; w_map: [d, C]; n_heads splits the d channels into
    contiguous chunks of d/n.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_map: Tensor
    n_heads: int = 4
    per_head_scale: bool = False

    def __post_init__(self):
        c, d = self.w_q.shape
        for name, w in (("w_k", self.w_k), ("w_v", self.w_v)):
            if w.shape != (c, d):
                raise ShapeError(f"{name} shape {w.shape} != w_q shape {(c, d)}")
        if self.w_map.shape != (d, c):
            raise ShapeError(f"w_map shape {self.w_map.shape}, expected {(d, c)}")
        if self.n_heads < 1 or d % self.n_heads:
            raise ContractError(f"head count {self.n_heads} does not divide d={d}")
        for name, w in (("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v), ("w_map", self.w_map)):
            if not np.all(np.isfinite(w.data)):
                raise ContractError(f"{name} contains non-finite values")

    @property
    def c_in(self):
        return self.w_q.shape[0]

    @property
    def inner_dim(self):
        return self.w_q.shape[1]

    @property
    def head_dim(self):
        return self.inner_dim // self.n_heads


def init_multi_head(rng, c, d, n_heads=4, dtype=np.float32, per_head_scale=False):
    """Glorot-normal initialized MultiHeadWeights."""

    def w(fan_in, fan_out):
        std = math.sqrt(2.0 / (fan_in + fan_out))
        return Tensor((rng.normal(size=(fan_in, fan_out)) * std).astype(dtype), requires_grad=True)

    return MultiHeadWeights(w(c, d), w(c, d), w(c, d), w(d, c), n_heads, per_head_scale)


def attention(q, k, v, scale_dim=None, return_weights=False):
    """softmax(q k^T / sqrt(scale_dim)) v over the trailing two axes.

    ``scale_dim`` defaults to the channel width of q; the enclosing
    multi-head layer passes its own inner width d here. Leading axes are
    batch-like.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention channel widths differ: q {q.shape} vs k {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention k/v sequence lengths differ: {k.shape} vs {v.shape}")
    if scale_dim is None:
        scale_dim = q.shape[-1]
    kt = tt.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    scores = tt.mul(tt.matmul(q, kt), 1.0 / math.sqrt(scale_dim))
    weights = tt.softmax(scores, axis=-1)
    out = tt.matmul(weights, v)
    if return_weights:
        return out, weights
    return out


def _split_heads(x, n):
    """[..., N, d] -> [..., n, N, d/n] using contiguous channel chunks."""
    lead = x.shape[:-2]
    n_seq, d = x.shape[-2], x.shape[-1]
    y = tt.reshape(x, lead + (n_seq, n, d // n))
    r = y.ndim
    perm = tuple(range(r - 3)) + (r - 2, r - 3, r - 1)
    return tt.transpose(y, perm)


def _merge_heads(x):
    """[..., n, N, d/n] -> [..., N, d]."""
    lead = x.shape[:-3]
    n, n_seq, dh = x.shape[-3], x.shape[-2], x.shape[-1]
    r = x.ndim
    perm = tuple(range(r - 3)) + (r - 2, r - 3, r - 1)
    y = tt.transpose(x, perm)
    return tt.reshape(y, lead + (n_seq, n * dh))


def multi_head(x_q, x_kv, w, return_weights=False):
    """Multi-head attention: project, split channels into n heads, attend,
    concatenate, map back to C. Self-attention is the x_kv = x_q case.
    """
    if x_q.shape[-1] != w.c_in or x_kv.shape[-1] != w.c_in:
        raise ShapeError(
            f"multi_head input widths {x_q.shape}/{x_kv.shape} do not match weights C={w.c_in}"
        )
    q = tt.linear(x_q, w.w_q)
    k = tt.linear(x_kv, w.w_k)
    v = tt.linear(x_kv, w.w_v)
    n = w.n_heads
    scale_dim = w.head_dim if w.per_head_scale else w.inner_dim
    qh, kh, vh = _split_heads(q, n), _split_heads(k, n), _split_heads(v, n)
    att = attention(qh, kh, vh, scale_dim=scale_dim, return_weights=return_weights)
    if return_weights:
        att, attn_w = att
    out = tt.linear(_merge_heads(att), w.w_map)
    if return_weights:
        return out, attn_w
    return out
