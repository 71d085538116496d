"""Online inference: reference initialization with cached features, per-frame
candidate cropping, score-map post-processing, and box selection.

Crops are square context windows around a box: side sqrt((w+p)(h+p)) * factor
with p = (w+h)/2, bilinearly resampled, mean-filled outside the frame. The
score map is adjusted as (1-w) * cls * penalty + w * hanning before argmax;
the selected cell's absolute box is transported back to image coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import forward_candidate_stages, fuse
from .head import depthwise_xcorr, predict
from .model import embed_reference, fuse_reference
from .tensor import ContractError, ShapeError, Tensor


@dataclass
class BBox:
    """Center-form box. ``frame`` tags the coordinate system: "image"
    (pixels) or "crop" (normalized to [0,1] within a candidate crop)."""

    cx: float
    cy: float
    w: float
    h: float
    frame: str = "image"

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ContractError(f"box dims must be positive, got ({self.w}, {self.h})")

    @classmethod
    def from_xywh(cls, x, y, w, h, frame="image"):
        return cls(x + w / 2.0, y + h / 2.0, w, h, frame)

    def to_xywh(self):
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)

    def corners(self):
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )


def iou(a, b):
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


@dataclass
class CropMapping:
    """Affine transport between a square crop and image coordinates.

    A crop-normalized coordinate u in [0,1] maps to image x0 + u * side.
    """

    x0: float
    y0: float
    side: float
    out_size: int

    def box_to_image(self, b):
        return BBox(
            self.x0 + b.cx * self.side,
            self.y0 + b.cy * self.side,
            b.w * self.side,
            b.h * self.side,
            frame="image",
        )

    def box_to_crop(self, b):
        return BBox(
            (b.cx - self.x0) / self.side,
            (b.cy - self.y0) / self.side,
            b.w / self.side,
            b.h / self.side,
            frame="crop",
        )


def context_side(box, context_factor=1.0):
    pad = (box.w + box.h) / 2.0
    return math.sqrt((box.w + pad) * (box.h + pad)) * context_factor


def crop_region(frame, box, out_size, context_factor=1.0):
    """Square context crop around ``box``, bilinearly resampled to
    ``out_size``; out-of-frame area takes the frame's mean intensity.
    Returns (crop, CropMapping)."""
    if frame.ndim not in (2, 3):
        raise ShapeError(f"frame must be [H,W] or [H,W,C], got {frame.shape}")
    if not (np.isfinite(box.w) and np.isfinite(box.h)):
        raise ContractError("degenerate box")
    side = context_side(box, context_factor)
    x0 = box.cx - side / 2.0
    y0 = box.cy - side / 2.0
    mapping = CropMapping(x0, y0, side, out_size)

    h, w = frame.shape[:2]
    img = frame if frame.ndim == 3 else frame[:, :, None]
    fill = img.reshape(-1, img.shape[-1]).mean(axis=0)

    scale = side / out_size
    xs = x0 + (np.arange(out_size) + 0.5) * scale - 0.5
    ys = y0 + (np.arange(out_size) + 0.5) * scale - 0.5
    gx, gy = np.meshgrid(xs, ys)

    x0i = np.floor(gx).astype(np.int64)
    y0i = np.floor(gy).astype(np.int64)
    fx = (gx - x0i)[..., None]
    fy = (gy - y0i)[..., None]

    def sample(yy, xx):
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)].astype(np.float64)
        vals[~inside] = fill
        return vals

    v00 = sample(y0i, x0i)
    v01 = sample(y0i, x0i + 1)
    v10 = sample(y0i + 1, x0i)
    v11 = sample(y0i + 1, x0i + 1)
    crop = (
        v00 * (1 - fx) * (1 - fy)
        + v01 * fx * (1 - fy)
        + v10 * (1 - fx) * fy
        + v11 * fx * fy
    )
    if frame.ndim == 2:
        crop = crop[:, :, 0]
    return crop.astype(np.float64), mapping


# ---------------------------------------------------------------------------
# Score-map post-processing


def _size_with_context(w, h):
    pad = (w + h) / 2.0
    return np.sqrt((w + pad) * (h + pad))


def scale_penalty(pred, prev, k=0.04):
    """exp(-k * (aspect change * scale change - 1)); 1 when nothing changed."""
    r_pred = pred.w / pred.h
    r_prev = prev.w / prev.h
    r_change = max(r_pred / r_prev, r_prev / r_pred)
    s_pred = _size_with_context(pred.w, pred.h)
    s_prev = _size_with_context(prev.w, prev.h)
    s_change = max(s_pred / s_prev, s_prev / s_pred)
    return math.exp(-k * (r_change * s_change - 1.0))


def penalty_map(widths, heights, prev, k=0.04):
    """Vectorized scale_penalty for per-position (w, h) prediction maps,
    measured against the previous box in the same units."""
    r_pred = widths / heights
    r_prev = prev.w / prev.h
    r_change = np.maximum(r_pred / r_prev, r_prev / r_pred)
    s_pred = _size_with_context(widths, heights)
    s_prev = _size_with_context(prev.w, prev.h)
    s_change = np.maximum(s_pred / s_prev, s_prev / s_pred)
    return np.exp(-k * (r_change * s_change - 1.0))


def postprocess(cls, penalties, hanning, w):
    """(1 - w) * cls * penalty + w * hanning, elementwise."""
    if cls.shape != penalties.shape or cls.shape != hanning.shape:
        raise ShapeError(
            f"postprocess shape mismatch: {cls.shape}, {penalties.shape}, {hanning.shape}"
        )
    if not 0.0 <= w <= 1.0:
        raise ContractError(f"window weight {w} outside [0, 1]")
    return (1.0 - w) * cls * penalties + w * hanning


def hanning_window(h, w):
    """Separable raised-cosine prior, max 1 (corner 0, center 1 at odd dims)."""
    wy = np.hanning(h) if h > 1 else np.ones(1)
    wx = np.hanning(w) if w > 1 else np.ones(1)
    win = np.outer(wy, wx)
    return win / win.max()


# ---------------------------------------------------------------------------
# Tracker


@dataclass
class TrackerState:
    model: object
    prev_box: BBox
    cache: object
    fused_ref: object
    hanning: np.ndarray
    window_weight: float
    penalty_k: float
    map_stride: float
    diagnostics: dict = field(default_factory=dict)


def _to_input(crop, dtype):
    arr = crop if crop.ndim == 3 else crop[:, :, None]
    return Tensor(arr[None].astype(dtype))


def init(frame, gt, model, window_weight=None, penalty_k=None):
    """Crop the reference once, run the reference stages, size the window
    prior to the score map, and seed the previous box with the ground truth."""
    params = model.cfg.tracker
    w_weight = params.window_weight if window_weight is None else window_weight
    k = params.penalty_k if penalty_k is None else penalty_k
    bcfg = model.cfg.backbone
    crop, _ = crop_region(frame, gt, bcfg.reference_size, params.ref_context)
    dtype = model.head.adapter.dtype
    cache = embed_reference(model, _to_input(crop, dtype))
    fused_ref = fuse_reference(model, cache)
    cand_cells = bcfg.candidate_size // 8
    ref_cells = bcfg.reference_size // 8
    map_side = cand_cells - ref_cells + 1
    return TrackerState(
        model=model,
        prev_box=gt,
        cache=cache,
        fused_ref=fused_ref,
        hanning=hanning_window(map_side, map_side),
        window_weight=w_weight,
        penalty_k=k,
        map_stride=8.0,
    )


def track_step(state, frame):
    """One tracking step: crop, forward with the cached reference, adjust the
    score map, pick the best cell, transport its box to image coordinates."""
    model = state.model
    bcfg = model.cfg.backbone
    params = model.cfg.tracker
    crop, mapping = crop_region(
        frame, state.prev_box, bcfg.candidate_size, params.cand_context
    )
    dtype = model.head.adapter.dtype
    x = _to_input(crop, dtype)
    feats, strides = forward_candidate_stages(x, state.cache, bcfg, model.backbone)
    fused = fuse(feats, strides, model.backbone.fusion)
    corr = depthwise_xcorr(fused, state.fused_ref)
    cls_t, reg_t = predict(corr, model.head)

    logits = cls_t.data[0].astype(np.float64)
    scores = 1.0 / (1.0 + np.exp(-logits))
    reg = reg_t.data[0].astype(np.float64)  # crop-normalized cx, cy, w, h

    widths = reg[..., 2] * mapping.side
    heights = reg[..., 3] * mapping.side
    penalties = penalty_map(widths, heights, state.prev_box, state.penalty_k)
    adjusted = postprocess(scores, penalties, state.hanning, state.window_weight)

    idx = np.unravel_index(np.argmax(adjusted), adjusted.shape)
    best = reg[idx]
    box = mapping.box_to_image(BBox(best[0], best[1], best[2], best[3], frame="crop"))
    assert box.w > 0 and box.h > 0
    state.prev_box = box
    diagnostics = {
        "raw_scores": scores,
        "adjusted_scores": adjusted,
        "penalties": penalties,
        "argmax": idx,
        "mapping": mapping,
    }
    state.diagnostics = diagnostics
    return box, state, diagnostics
