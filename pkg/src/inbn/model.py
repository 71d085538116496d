"""Model assembly: backbone + fusion + heads as one named-parameter tree,
standard configurations, and the matching forward pipeline used by both
training and tracking.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tt
from .backbone import (
    BackboneConfig,
    StageConfig,
    forward_candidate_stages,
    forward_reference_stages,
    fuse,
    init_backbone,
)
from .head import depthwise_xcorr, init_head, predict
from .tensor import ContractError


@dataclass
class TrackerParams:
    """Online-tracking constants (all recorded conventions, configurable)."""

    window_weight: float = 0.3
    penalty_k: float = 0.04
    ref_context: float = 1.0
    cand_context: float = 2.0


@dataclass
class ModelConfig:
    backbone: BackboneConfig
    head_width: int = 256
    tracker: TrackerParams = field(default_factory=TrackerParams)


@dataclass
class TrackModel:
    cfg: ModelConfig
    backbone: object
    head: object

    def named_parameters(self):
        """Ordered name -> Tensor map of every trainable parameter."""
        params = {}

        def put(name, t):
            if t is None:
                return
            if name in params:
                raise ContractError(f"duplicate parameter name {name}")
            params[name] = t

        def put_mh(prefix, w):
            if w is None:
                return
            put(f"{prefix}.w_q", w.w_q)
            put(f"{prefix}.w_k", w.w_k)
            put(f"{prefix}.w_v", w.w_v)
            put(f"{prefix}.w_map", w.w_map)

        def put_extras(prefix, ex):
            if ex is None:
                return
            put(f"{prefix}.norm1_gain", ex.norm1_gain)
            put(f"{prefix}.norm1_bias", ex.norm1_bias)
            put(f"{prefix}.norm2_gain", ex.norm2_gain)
            put(f"{prefix}.norm2_bias", ex.norm2_bias)
            put(f"{prefix}.mlp_w1", ex.mlp_w1)
            put(f"{prefix}.mlp_w2", ex.mlp_w2)

        for i, sw in enumerate(self.backbone.stages):
            if hasattr(sw.embed, "w"):
                put(f"stage{i}.embed.w", sw.embed.w)
            else:
                put(f"stage{i}.embed.w1", sw.embed.w1)
                put(f"stage{i}.embed.w2", sw.embed.w2)
            put(f"stage{i}.map", sw.stage_map)
            for j, gw in enumerate(sw.gims):
                put_mh(f"stage{i}.gim{j}.csa", gw.csa)
                put_mh(f"stage{i}.gim{j}.csa_ref", gw.csa_ref)
                put_mh(f"stage{i}.gim{j}.tca", gw.tca)
                put_extras(f"stage{i}.gim{j}.csa_extras", gw.csa_extras)
                put_extras(f"stage{i}.gim{j}.tca_extras", gw.tca_extras)
        for i, w in enumerate(self.backbone.fusion.per_stage):
            put(f"fusion.stage{i}", w)
        put("fusion.mix", self.backbone.fusion.mix)
        put("head.adapter", self.head.adapter)
        for i, w in enumerate(self.head.cls):
            put(f"head.cls{i}", w)
        for i, w in enumerate(self.head.reg):
            put(f"head.reg{i}", w)
        return params


def transformer_model_config(**overrides):
    """Hierarchical attention backbone: strides 4/8/16/16, channels
    96/192/384/768, block counts 2/2/6/2, win 7, 224/112 crops."""
    backbone = BackboneConfig(
        stages=(
            StageConfig("patch_embed", 4, 96, 2),
            StageConfig("patch_embed", 2, 192, 2),
            StageConfig("patch_embed", 2, 384, 6),
            StageConfig("patch_embed", 1, 768, 2),
        ),
        win=7,
        candidate_size=224,
        reference_size=112,
        in_channels=3,
    )
    return ModelConfig(backbone=backbone, **overrides)


def cnn_model_config(**overrides):
    """Convolution-stage backbone: strides 4/8/8/8, native channels
    256/512/1024/2048, one interaction block per stage at width 256."""
    backbone = BackboneConfig(
        stages=(
            StageConfig("conv_block", 4, 256, 1),
            StageConfig("conv_block", 2, 512, 1),
            StageConfig("conv_block", 1, 1024, 1),
            StageConfig("conv_block", 1, 2048, 1),
        ),
        win=7,
        candidate_size=224,
        reference_size=112,
        in_channels=3,
    )
    return ModelConfig(backbone=backbone, **overrides)


def toy_model_config(tca_enabled=True, wp_enabled=True, **overrides):
    """Desk-scale preset: 2 stages, one block each, win 2, channels 8/16,
    grayscale 64/32 crops, narrow fusion and heads. Disabling the window
    process means win=1 (one window = dense attention over all positions).
    """
    backbone = BackboneConfig(
        stages=(
            StageConfig("patch_embed", 4, 8, 1),
            StageConfig("patch_embed", 2, 16, 1),
        ),
        win=2 if wp_enabled else 1,
        fused_channels=64,
        candidate_size=64,
        reference_size=32,
        in_channels=1,
        n_heads=2,
        tca_enabled=tca_enabled,
    )
    return ModelConfig(backbone=backbone, head_width=64, **overrides)


def init_model(cfg, seed, dtype=np.float32):
    rng = np.random.default_rng(seed)
    backbone = init_backbone(cfg.backbone, rng, dtype=dtype)
    head = init_head(rng, cfg.backbone.fused_channels, width=cfg.head_width, dtype=dtype)
    return TrackModel(cfg, backbone, head)


# ---------------------------------------------------------------------------
# Forward pipeline


def embed_reference(model, z):
    return forward_reference_stages(z, model.cfg.backbone, model.backbone)


def fuse_reference(model, cache):
    return fuse(cache.stage_feats, cache.strides, model.backbone.fusion)


def forward_with_cache(model, x, cache, fused_ref, trace=None):
    """Candidate pass against cached reference features: fused candidate map,
    depth-wise correlation (scaled by kernel area), and head predictions."""
    feats, strides = forward_candidate_stages(x, cache, model.cfg.backbone, model.backbone, trace=trace)
    fused = fuse(feats, strides, model.backbone.fusion)
    corr = depthwise_xcorr(fused, fused_ref)
    hz, wz = fused_ref.shape[1], fused_ref.shape[2]
    cls, reg = predict(tt.mul(corr, 1.0 / (hz * wz)), model.head)
    return cls, reg


def forward_pair(model, x, z, trace=None):
    """Training-path forward over a (candidate, reference) batch pair."""
    cache = embed_reference(model, z)
    fused_ref = fuse_reference(model, cache)
    return forward_with_cache(model, x, cache, fused_ref, trace=trace)


# ---------------------------------------------------------------------------
# Config (de)serialization for the checkpoint sidecar


def config_to_dict(cfg):
    d = asdict(cfg)
    d["backbone"]["stages"] = [asdict(s) for s in cfg.backbone.stages]
    return d


def config_from_dict(d):
    b = dict(d["backbone"])
    b["stages"] = tuple(StageConfig(**s) for s in b["stages"])
    return ModelConfig(
        backbone=BackboneConfig(**b),
        head_width=d["head_width"],
        tracker=TrackerParams(**d["tracker"]),
    )
