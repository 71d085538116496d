"""General interaction modeler: window process, context self-attention,
target cross-attention, block composition, and an analytic MAC counter.

The window process groups a [B, H, W, C] map into non-overlapping win x win
neighborhoods: element (b, p, l, c) of the result holds the pixel at
in-window offset p (row-major inside the window) of window l (row-major over
the H/win x W/win grid). Attention then runs over the window-grid axis of
length H*W/win^2, with B and win^2 batch-like, which is what keeps the score
cost linear in H*W at fixed grid size.
"""

from __future__ import annotations

import math
from collections import namedtuple
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as tt
from .attention import MultiHeadWeights, init_multi_head, multi_head
from .tensor import ContractError, DivisibilityError, ShapeError, Tensor


@dataclass
class WindowedFeature:
    """A feature map partitioned into win x win groups.

    data: [B, win^2, L, C] with L = orig_h * orig_w / win^2.
    """

    data: Tensor
    orig_h: int
    orig_w: int
    win: int

    def __post_init__(self):
        if self.orig_h % self.win or self.orig_w % self.win:
            raise DivisibilityError(
                f"({self.orig_h},{self.orig_w}) not divisible by win={self.win}"
            )
        b, p, l, c = self.data.shape
        if p != self.win * self.win or l * p != self.orig_h * self.orig_w:
            raise ContractError(
                f"windowed data {self.data.shape} inconsistent with "
                f"{self.orig_h}x{self.orig_w}, win={self.win}"
            )

    @property
    def channels(self):
        return self.data.shape[-1]


def window_partition(f, win):
    """[B,H,W,C] -> WindowedFeature with data [B, win^2, HW/win^2, C]."""
    if f.ndim != 4:
        raise ShapeError(f"window_partition needs [B,H,W,C], got {f.shape}")
    b, h, w, c = f.shape
    if h % win or w % win:
        raise DivisibilityError(f"feature {h}x{w} not divisible by win={win}")
    gh, gw = h // win, w // win
    x = tt.reshape(f, (b, gh, win, gw, win, c))
    x = tt.transpose(x, (0, 2, 4, 1, 3, 5))  # b, wr, wc, gr, gc, c
    x = tt.reshape(x, (b, win * win, gh * gw, c))
    return WindowedFeature(x, h, w, win)


def window_merge(fw):
    """Exact inverse of window_partition."""
    b = fw.data.shape[0]
    c = fw.channels
    win, h, w = fw.win, fw.orig_h, fw.orig_w
    gh, gw = h // win, w // win
    x = tt.reshape(fw.data, (b, win, win, gh, gw, c))
    x = tt.transpose(x, (0, 3, 1, 4, 2, 5))  # b, gr, wr, gc, wc, c
    return tt.reshape(x, (b, h, w, c))


def csa(fw, w):
    """Residual self-attention over the window-grid axis."""
    if fw.channels != w.c_in:
        raise ShapeError(f"csa channels {fw.channels} != weights C={w.c_in}")
    out = tt.add(fw.data, multi_head(fw.data, fw.data, w))
    return WindowedFeature(out, fw.orig_h, fw.orig_w, fw.win)


def tca(fx, fz, w, return_weights=False):
    """Residual cross-attention: queries from the candidate stream, keys and
    values from the reference stream. Output shape matches ``fx``."""
    if fx.win != fz.win:
        raise ContractError(f"tca window sizes differ: {fx.win} vs {fz.win}")
    if fx.channels != fz.channels:
        raise ContractError(f"tca channel widths differ: {fx.channels} vs {fz.channels}")
    if fx.channels != w.c_in:
        raise ShapeError(f"tca channels {fx.channels} != weights C={w.c_in}")
    mh = multi_head(fx.data, fz.data, w, return_weights=return_weights)
    if return_weights:
        mh, attn_w = mh
    out = WindowedFeature(tt.add(fx.data, mh), fx.orig_h, fx.orig_w, fx.win)
    if return_weights:
        return out, attn_w
    return out


# ---------------------------------------------------------------------------
# Optional Swin-style sublayers (pre-norm + ratio-4 MLP), default off


@dataclass
class SublayerExtras:
    norm1_gain: Tensor
    norm1_bias: Tensor
    norm2_gain: Tensor
    norm2_bias: Tensor
    mlp_w1: Tensor
    mlp_w2: Tensor


def init_sublayer_extras(rng, c, dtype=np.float32, ratio=4):
    def lin(fan_in, fan_out):
        std = math.sqrt(2.0 / (fan_in + fan_out))
        return Tensor((rng.normal(size=(fan_in, fan_out)) * std).astype(dtype), requires_grad=True)

    one = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
    zero = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
    one2 = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
    zero2 = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
    return SublayerExtras(one, zero, one2, zero2, lin(c, ratio * c), lin(ratio * c, c))


def _layernorm(x, gain, bias, eps=1e-5):
    mu = tt.mean(x, axis=-1, keepdims=True)
    centered = tt.sub(x, mu)
    var = tt.mean(tt.mul(centered, centered), axis=-1, keepdims=True)
    inv = tt.div(1.0, tt.sqrt(tt.add(var, eps)))
    return tt.add(tt.mul(tt.mul(centered, inv), gain), bias)


def _swin_attention_sublayer(xw, kvw, mhw, ex):
    xq = _layernorm(xw.data, ex.norm1_gain, ex.norm1_bias)
    xkv = xq if kvw is None else _layernorm(kvw.data, ex.norm1_gain, ex.norm1_bias)
    x = tt.add(xw.data, multi_head(xq, xkv, mhw))
    u = _layernorm(x, ex.norm2_gain, ex.norm2_bias)
    x = tt.add(x, tt.linear(tt.relu(tt.linear(u, ex.mlp_w1)), ex.mlp_w2))
    return WindowedFeature(x, xw.orig_h, xw.orig_w, xw.win)


# ---------------------------------------------------------------------------
# GIM block


@dataclass
class GimWeights:
    """One block: CSA weights (shared across streams unless csa_ref is set),
    optional TCA weights, optional Swin-style sublayer extras."""

    csa: MultiHeadWeights
    tca: Optional[MultiHeadWeights] = None
    csa_ref: Optional[MultiHeadWeights] = None
    swin_style: bool = False
    csa_extras: Optional[SublayerExtras] = None
    tca_extras: Optional[SublayerExtras] = None

    def __post_init__(self):
        if self.swin_style and self.csa_extras is None:
            raise ContractError("swin_style requires sublayer extras")
        if self.swin_style and self.tca is not None and self.tca_extras is None:
            raise ContractError("swin_style with TCA requires tca extras")


def init_gim(rng, c, d=None, n_heads=4, with_tca=False, dtype=np.float32, share_csa=True, swin_style=False):
    d = c if d is None else d
    w_csa = init_multi_head(rng, c, d, n_heads, dtype)
    w_tca = init_multi_head(rng, c, d, n_heads, dtype) if with_tca else None
    w_ref = None if share_csa else init_multi_head(rng, c, d, n_heads, dtype)
    ex = init_sublayer_extras(rng, c, dtype) if swin_style else None
    ex_t = init_sublayer_extras(rng, c, dtype) if (swin_style and with_tca) else None
    return GimWeights(w_csa, w_tca, w_ref, swin_style, ex, ex_t)


def gim_block(fx, fz, w, win):
    """Window both streams, self-attend each, optionally cross-attend the
    candidate stream against the reference's post-CSA feature, merge back.

    ``fz`` may be None (single-stream use); the reference stream never
    receives cross-attention. Returns (fx', fz' or None).
    """
    fxw = window_partition(fx, win)
    fzw = window_partition(fz, win) if fz is not None else None
    w_ref = w.csa_ref if w.csa_ref is not None else w.csa
    if w.swin_style:
        fxw = _swin_attention_sublayer(fxw, None, w.csa, w.csa_extras)
        if fzw is not None:
            fzw = _swin_attention_sublayer(fzw, None, w_ref, w.csa_extras)
        if w.tca is not None and fzw is not None:
            fxw = _swin_attention_sublayer(fxw, fzw, w.tca, w.tca_extras)
    else:
        fxw = csa(fxw, w.csa)
        if fzw is not None:
            fzw = csa(fzw, w_ref)
        if w.tca is not None and fzw is not None:
            fxw = tca(fxw, fzw, w.tca)
    out_x = window_merge(fxw)
    out_z = window_merge(fzw) if fzw is not None else None
    return out_x, out_z


# ---------------------------------------------------------------------------
# Complexity accounting

MacCount = namedtuple("MacCount", ["attention", "projections", "total"])


def count_macs_csa(h, w, c, d, win):
    """Analytic multiply-accumulate count of one CSA layer (batch 1).

    Attention term: score + value aggregation, 2 * (H^2 W^2 / win^2) * d.
    Projection term: Q, K, V and the output map, 4 * H * W * C * d.
    """
    if h % win or w % win:
        raise DivisibilityError(f"({h},{w}) not divisible by win={win}")
    seq = (h * w) // (win * win)
    attention_macs = 2 * (win * win) * seq * seq * d
    projection_macs = 4 * h * w * c * d
    return MacCount(attention_macs, projection_macs, attention_macs + projection_macs)
