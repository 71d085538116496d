"""Two-stream hierarchical backbone: stage embeddings, stacked interaction
blocks with cross-attention in the last block of every stage, reference
feature caching, and stride-8 multi-stage fusion.

The reference stream runs self-attention only, so it can be computed once
and cached; the candidate stream consumes the cached post-CSA reference
feature of the same block wherever cross-attention is configured. The
convolution variant maps each stage's native channels down to a fixed
interaction width before its blocks, so attention always runs at that width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import tensor as tt
from .gim import (
    GimWeights,
    _swin_attention_sublayer,
    csa,
    init_gim,
    tca,
    window_merge,
    window_partition,
)
from .tensor import ContractError, DivisibilityError, ShapeError, Tensor


@dataclass
class StageConfig:
    """One stage of the backbone recipe: embedding kind, patch stride,
    output channels, and block count (cross-attention in the last block)."""

    kind: str  # "patch_embed" | "conv_block"
    patch: int
    channels: int
    gim_count: int
    tca_in_last_only: bool = True

    def __post_init__(self):
        if self.kind not in ("patch_embed", "conv_block"):
            raise ContractError(f"unknown stage kind {self.kind!r}")
        if self.patch < 1 or self.channels < 1 or self.gim_count < 1:
            raise ContractError("stage parameters must be positive")


@dataclass
class BackboneConfig:
    stages: tuple
    win: int = 7
    fused_channels: int = 256
    candidate_size: int = 224
    reference_size: int = 112
    in_channels: int = 3
    n_heads: int = 4
    gim_channels: int = 256  # interaction width of conv_block stages
    share_csa: bool = True
    swin_style: bool = False
    pad_windows: bool = False
    tca_enabled: bool = True

    def stage_widths(self):
        """Channel width at which each stage's blocks run (= stage output width)."""
        return [
            s.channels if s.kind == "patch_embed" else self.gim_channels
            for s in self.stages
        ]

    def strides(self):
        out, s = [], 1
        for st in self.stages:
            s *= st.patch
            out.append(s)
        return out


@dataclass
class PatchEmbedWeights:
    w: Tensor  # [P*P*C_in, C_out]


@dataclass
class ConvBlockWeights:
    w1: Tensor  # [9*C_in, C_out]
    w2: Tensor  # [9*C_out, C_out]


@dataclass
class StageWeights:
    embed: Union[PatchEmbedWeights, ConvBlockWeights]
    gims: list
    stage_map: Optional[Tensor] = None  # conv stages: [C_native, gim_channels]


@dataclass
class FusionWeights:
    per_stage: list  # [C_stage_i, fused] each
    mix: Tensor  # [n_stages * fused, fused]


@dataclass
class BackboneWeights:
    stages: list
    fusion: FusionWeights


@dataclass
class StageOutputs:
    """Per-stage candidate and reference features with their strides."""

    candidate: list
    reference: list
    strides: list


@dataclass
class RefCache:
    """Reference-side features cached by a one-shot reference pass."""

    stage_feats: list  # final reference feature of each stage
    tca_feats: list  # post-CSA reference feature at each stage's TCA block (or None)
    strides: list


# ---------------------------------------------------------------------------
# Stage primitives


def patch_embed(x, w, p):
    """Flatten non-overlapping PxP patches (row, col, channel order) and map
    them linearly to the output width. No bias."""
    if x.ndim != 4:
        raise ShapeError(f"patch_embed needs [B,H,W,C], got {x.shape}")
    b, h, wd, c = x.shape
    if h % p or wd % p:
        raise DivisibilityError(f"input {h}x{wd} not divisible by patch stride {p}")
    if w.shape[0] != p * p * c:
        raise ShapeError(f"patch weight {w.shape} does not match P={p}, C_in={c}")
    y = tt.reshape(x, (b, h // p, p, wd // p, p, c))
    y = tt.transpose(y, (0, 1, 3, 2, 4, 5))
    y = tt.reshape(y, (b, h // p, wd // p, p * p * c))
    return tt.linear(y, w)


def conv_block(x, w1, w2, p):
    """3x3 stride-P convolution (zero pad 1) + ReLU, then 3x3 stride-1
    convolution + ReLU. Deliberate 2-layer stand-in for a residual trunk."""
    if x.ndim != 4:
        raise ShapeError(f"conv_block needs [B,H,W,C], got {x.shape}")
    h, wd = x.shape[1], x.shape[2]
    if h % p or wd % p:
        raise DivisibilityError(f"input {h}x{wd} not divisible by conv stride {p}")
    y = tt.relu(tt.linear(tt.extract_patches(x, 3, 3, p, 1), w1))
    return tt.relu(tt.linear(tt.extract_patches(y, 3, 3, 1, 1), w2))


def _embed_stage(f, sc, sw, stage_idx):
    try:
        if sc.kind == "patch_embed":
            return patch_embed(f, sw.embed.w, sc.patch)
        return conv_block(f, sw.embed.w1, sw.embed.w2, sc.patch)
    except DivisibilityError as e:
        raise DivisibilityError(f"stage {stage_idx}: {e}") from e


def _pad_to_window(f, win):
    h, w = f.shape[1], f.shape[2]
    ph = (-h) % win
    pw = (-w) % win
    if ph or pw:
        return tt.pad2d(f, ph, pw), (h, w)
    return f, None


def _check_window(f, win, stage_idx, pad_windows):
    if pad_windows:
        return
    if f.shape[1] % win or f.shape[2] % win:
        raise DivisibilityError(
            f"stage {stage_idx}: feature {f.shape[1]}x{f.shape[2]} not divisible by win={win}"
        )


# ---------------------------------------------------------------------------
# Forward passes


def _self_attend(fw_feature, gw):
    if gw.swin_style:
        return _swin_attention_sublayer(fw_feature, None, gw.csa, gw.csa_extras)
    return csa(fw_feature, gw.csa)


def _cross_attend(fxw, fzw, gw):
    if gw.swin_style:
        return _swin_attention_sublayer(fxw, fzw, gw.tca, gw.tca_extras)
    return tca(fxw, fzw, gw.tca)


def forward_reference_stages(z, cfg, weights):
    """Run the reference stream once, caching per-stage outputs and the
    post-CSA features consumed by candidate-side cross-attention."""
    f = z
    stage_feats, tca_feats, strides = [], [], []
    stride = 1
    for i, (sc, sw) in enumerate(zip(cfg.stages, weights.stages)):
        f = _embed_stage(f, sc, sw, i)
        stride *= sc.patch
        if sw.stage_map is not None:
            f = tt.linear(f, sw.stage_map)
        _check_window(f, cfg.win, i, cfg.pad_windows)
        tca_feat = None
        for gw in sw.gims:
            padded, orig = _pad_to_window(f, cfg.win)
            w_ref = gw.csa_ref if gw.csa_ref is not None else gw.csa
            ref_gw = GimWeights(
                w_ref,
                None,
                None,
                gw.swin_style,
                gw.csa_extras,
                None,
            )
            fw_feature = window_partition(padded, cfg.win)
            fw_feature = _self_attend(fw_feature, ref_gw)
            f = window_merge(fw_feature)
            if orig is not None:
                f = tt.crop2d(f, orig[0], orig[1])
            if gw.tca is not None:
                tca_feat = f
        stage_feats.append(f)
        tca_feats.append(tca_feat)
        strides.append(stride)
    return RefCache(stage_feats, tca_feats, strides)


def forward_candidate_stages(x, cache, cfg, weights, trace=None):
    """Run the candidate stream against a cached reference.

    ``trace``, when given, collects ("csa" | "tca", stage, block, feature)
    tuples of merged candidate activations.
    """
    f = x
    feats, strides = [], []
    stride = 1
    for i, (sc, sw) in enumerate(zip(cfg.stages, weights.stages)):
        f = _embed_stage(f, sc, sw, i)
        stride *= sc.patch
        if sw.stage_map is not None:
            f = tt.linear(f, sw.stage_map)
        _check_window(f, cfg.win, i, cfg.pad_windows)
        for j, gw in enumerate(sw.gims):
            padded, orig = _pad_to_window(f, cfg.win)
            fxw = window_partition(padded, cfg.win)
            fxw = _self_attend(fxw, gw)
            if trace is not None:
                merged = window_merge(fxw)
                if orig is not None:
                    merged = tt.crop2d(merged, orig[0], orig[1])
                trace.append(("csa", i, j, merged))
            if gw.tca is not None:
                fz = cache.tca_feats[i]
                if fz is None:
                    raise ContractError(f"stage {i}: cache lacks a reference feature for TCA")
                fz_padded, _ = _pad_to_window(fz, cfg.win)
                fzw = window_partition(fz_padded, cfg.win)
                fxw = _cross_attend(fxw, fzw, gw)
                if trace is not None:
                    merged = window_merge(fxw)
                    if orig is not None:
                        merged = tt.crop2d(merged, orig[0], orig[1])
                    trace.append(("tca", i, j, merged))
            f = window_merge(fxw)
            if orig is not None:
                f = tt.crop2d(f, orig[0], orig[1])
        feats.append(f)
        strides.append(stride)
    return feats, strides


def forward_two_stream(x, z, cfg, weights, trace=None):
    """Full two-stream pass: the reference runs once, then the candidate
    consumes its cached features (so this is bitwise-identical to the
    cached inference path)."""
    cache = forward_reference_stages(z, cfg, weights)
    feats, strides = forward_candidate_stages(x, cache, cfg, weights, trace=trace)
    return StageOutputs(feats, cache.stage_feats, strides)


def fuse(feats, strides, weights):
    """Map every stage to the fused width, resample to the stride-8 grid of
    the shared input, concatenate along channels, and mix back down."""
    if len(feats) != len(weights.per_stage):
        raise ContractError(
            f"fuse expects {len(weights.per_stage)} stage features, got {len(feats)}"
        )
    input_sizes = {(f.shape[1] * s, f.shape[2] * s) for f, s in zip(feats, strides)}
    if len(input_sizes) != 1:
        raise ContractError(f"stage features disagree on input size: {sorted(input_sizes)}")
    (in_h, in_w) = next(iter(input_sizes))
    if in_h % 8 or in_w % 8:
        raise DivisibilityError(f"input {in_h}x{in_w} has no stride-8 grid")
    target = (in_h // 8, in_w // 8)
    mapped = []
    for f, w in zip(feats, weights.per_stage):
        mapped.append(tt.resample(tt.linear(f, w), target))
    return tt.linear(tt.concat(mapped, axis=-1), weights.mix)


# ---------------------------------------------------------------------------
# Initialization


def _glorot(rng, fan_in, fan_out, dtype):
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return Tensor((rng.normal(size=(fan_in, fan_out)) * std).astype(dtype), requires_grad=True)


def init_backbone(cfg, rng, dtype=np.float32):
    stages = []
    c_in = cfg.in_channels
    for sc in cfg.stages:
        if sc.kind == "patch_embed":
            embed = PatchEmbedWeights(_glorot(rng, sc.patch * sc.patch * c_in, sc.channels, dtype))
            stage_map = None
            gim_c = sc.channels
        else:
            embed = ConvBlockWeights(
                _glorot(rng, 9 * c_in, sc.channels, dtype),
                _glorot(rng, 9 * sc.channels, sc.channels, dtype),
            )
            stage_map = _glorot(rng, sc.channels, cfg.gim_channels, dtype)
            gim_c = cfg.gim_channels
        gims = []
        for j in range(sc.gim_count):
            last = j == sc.gim_count - 1
            with_tca = cfg.tca_enabled and (last if sc.tca_in_last_only else True)
            gims.append(
                init_gim(
                    rng,
                    gim_c,
                    n_heads=cfg.n_heads,
                    with_tca=with_tca,
                    dtype=dtype,
                    share_csa=cfg.share_csa,
                    swin_style=cfg.swin_style,
                )
            )
        stages.append(StageWeights(embed, gims, stage_map))
        c_in = gim_c
    widths = cfg.stage_widths()
    fusion = FusionWeights(
        [_glorot(rng, w, cfg.fused_channels, dtype) for w in widths],
        _glorot(rng, len(widths) * cfg.fused_channels, cfg.fused_channels, dtype),
    )
    return BackboneWeights(stages, fusion)
