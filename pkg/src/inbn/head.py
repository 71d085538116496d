"""Depth-wise correlation matching and the classification/regression heads.

The correlation treats the reference feature map as a per-channel kernel and
slides it over the candidate map (valid region, no kernel flip). Each score
position then goes through a 1x1 adapter and two three-layer MLPs: one
classification logit and one (cx, cy, w, h) box, sigmoid-squashed into (0,1)
candidate-crop-normalized coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import ShapeError, Tensor


@dataclass
class HeadWeights:
    adapter: Tensor  # [C_corr, width]
    cls: tuple  # 3 linear layers width->width->width->1
    reg: tuple  # 3 linear layers width->width->width->4

    def __post_init__(self):
        if len(self.cls) != 3 or len(self.reg) != 3:
            raise ShapeError("heads must have exactly 3 layers each")

    @property
    def width(self):
        return self.adapter.shape[1]


def init_head(rng, c_in, width=256, dtype=np.float32):
    def w(fan_in, fan_out):
        std = math.sqrt(2.0 / (fan_in + fan_out))
        return Tensor((rng.normal(size=(fan_in, fan_out)) * std).astype(dtype), requires_grad=True)

    cls = (w(width, width), w(width, width), w(width, 1))
    reg = (w(width, width), w(width, width), w(width, 4))
    return HeadWeights(w(c_in, width), cls, reg)


def depthwise_xcorr(fx, fz):
    """Per-channel valid 2-D cross-correlation of the candidate map with the
    reference map as kernel: out[b,i,j,c] = sum_uv fx[b,i+u,j+v,c] * fz[b,u,v,c].
    """
    if fx.ndim != 4 or fz.ndim != 4:
        raise ShapeError(f"depthwise_xcorr needs [B,H,W,C] inputs, got {fx.shape}, {fz.shape}")
    b, hx, wx, c = fx.shape
    bz, hz, wz, cz = fz.shape
    if bz != b or cz != c:
        raise ShapeError(f"depthwise_xcorr batch/channel mismatch: {fx.shape} vs {fz.shape}")
    if hz > hx or wz > wx:
        raise ShapeError(f"kernel {hz}x{wz} larger than input {hx}x{wx}")
    patches = tt.extract_patches(fx, hz, wz, 1, 0)  # [B, H', W', hz*wz*C]
    ho, wo = hx - hz + 1, wx - wz + 1
    patches = tt.reshape(patches, (b, ho, wo, hz * wz, c))
    kernel = tt.reshape(fz, (b, 1, 1, hz * wz, c))
    return tt.sum_(tt.mul(patches, kernel), axis=3)


def _mlp3(x, layers):
    h = tt.relu(tt.linear(x, layers[0]))
    h = tt.relu(tt.linear(h, layers[1]))
    return tt.linear(h, layers[2])


def predict(corr, w):
    """Per-position classification logits [B,H,W] and sigmoid-normalized
    regression boxes [B,H,W,4]."""
    if corr.shape[-1] != w.adapter.shape[0]:
        raise ShapeError(f"correlation width {corr.shape} != adapter input {w.adapter.shape}")
    h = tt.linear(corr, w.adapter)
    cls = tt.reshape(_mlp3(h, w.cls), corr.shape[:-1])
    reg = tt.sigmoid(_mlp3(h, w.reg))
    return cls, reg
