"""Training objectives: label assignment by cell-center containment,
negative-weighted binary cross-entropy, and GIoU + L1 box regression over
positive positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import ContractError, Tensor

NEG_WEIGHT = 1.0 / 16.0
LAMBDA_GIOU = 2.0
LAMBDA_L1 = 6.0


@dataclass
class LabelAssignment:
    """Per-position binary labels plus the shared normalized target box.

    ``labels`` is [map_h, map_w] with 1 where the cell's mapped point falls
    strictly inside the ground-truth box. ``target`` is the ground-truth
    (cx, cy, w, h) normalized to the crop. ``out_of_crop`` flags a box with
    no area inside the crop (all-negative assignment).
    """

    labels: np.ndarray
    target: np.ndarray
    num_positive: int
    out_of_crop: bool


def assign_labels(gt_cxcywh, map_h, map_w, stride, crop_size, origin=(0.0, 0.0)):
    """Label cells whose mapped image point lies strictly inside the box.

    ``gt_cxcywh`` is in crop pixels. Cell (i, j) maps to the crop point
    (origin_x + (j + 0.5) * stride, origin_y + (i + 0.5) * stride); callers
    pass the crop geometry's centering offset as ``origin`` (default (0,0)).
    """
    cx, cy, w, h = (float(v) for v in gt_cxcywh)
    if w <= 0 or h <= 0:
        raise ContractError(f"ground-truth box has non-positive dims ({w}, {h})")
    xs = origin[0] + (np.arange(map_w) + 0.5) * stride
    ys = origin[1] + (np.arange(map_h) + 0.5) * stride
    inside_x = (xs > cx - w / 2) & (xs < cx + w / 2)
    inside_y = (ys > cy - h / 2) & (ys < cy + h / 2)
    labels = (inside_y[:, None] & inside_x[None, :]).astype(np.float64)
    x_overlap = min(cx + w / 2, crop_size) - max(cx - w / 2, 0.0)
    y_overlap = min(cy + h / 2, crop_size) - max(cy - h / 2, 0.0)
    out_of_crop = x_overlap <= 0 or y_overlap <= 0
    if out_of_crop:
        labels[:] = 0.0
    target = np.array([cx, cy, w, h], dtype=np.float64) / crop_size
    return LabelAssignment(labels, target, int(labels.sum()), out_of_crop)


def bce_loss(logits, labels, neg_weight=NEG_WEIGHT, normalize=True):
    """Weighted binary cross-entropy over foreground probabilities.

    ``logits`` are raw scores; probabilities p = sigmoid(logits) enter the
    loss through the numerically-stable fused form
    y * softplus(-x) + neg_weight * (1 - y) * softplus(x). Negatives carry
    ``neg_weight``. Normalized by position count unless ``normalize`` is off.
    """
    y = Tensor(np.asarray(labels, dtype=logits.dtype))
    if y.shape != logits.shape:
        raise ContractError(f"labels shape {y.shape} != logits shape {logits.shape}")
    pos = tt.mul(y, tt.softplus(tt.neg(logits)))
    negs = tt.mul(tt.mul(tt.sub(1.0, y), neg_weight), tt.softplus(logits))
    total = tt.sum_(tt.add(pos, negs))
    if normalize:
        total = tt.mul(total, 1.0 / logits.size)
    return total


def _corner_split(boxes):
    return tuple(tt.index_last(boxes, i) for i in range(4))


def cxcywh_to_corners(boxes):
    """[..., 4] (cx, cy, w, h) -> [..., 4] (x1, y1, x2, y2)."""
    cx, cy, w, h = _corner_split(boxes)
    half_w = tt.mul(w, 0.5)
    half_h = tt.mul(h, 0.5)
    parts = [tt.sub(cx, half_w), tt.sub(cy, half_h), tt.add(cx, half_w), tt.add(cy, half_h)]
    return tt.concat([tt.reshape(p, p.shape + (1,)) for p in parts], axis=-1)


def giou(a, b):
    """Generalized IoU of corner-form boxes [..., 4]: IoU minus the
    enclosing-hull deficit. Values lie in (-1, 1]."""
    for name, t in (("a", a), ("b", b)):
        x1, y1, x2, y2 = (t.data[..., i] for i in range(4))
        if np.any(x2 - x1 <= 0) or np.any(y2 - y1 <= 0):
            raise ContractError(f"box {name} has non-positive dims")
    ax1, ay1, ax2, ay2 = _corner_split(a)
    bx1, by1, bx2, by2 = _corner_split(b)
    iw = tt.relu(tt.sub(tt.minimum(ax2, bx2), tt.maximum(ax1, bx1)))
    ih = tt.relu(tt.sub(tt.minimum(ay2, by2), tt.maximum(ay1, by1)))
    inter = tt.mul(iw, ih)
    area_a = tt.mul(tt.sub(ax2, ax1), tt.sub(ay2, ay1))
    area_b = tt.mul(tt.sub(bx2, bx1), tt.sub(by2, by1))
    union = tt.sub(tt.add(area_a, area_b), inter)
    hull = tt.mul(
        tt.sub(tt.maximum(ax2, bx2), tt.minimum(ax1, bx1)),
        tt.sub(tt.maximum(ay2, by2), tt.minimum(ay1, by1)),
    )
    return tt.sub(tt.div(inter, union), tt.div(tt.sub(hull, union), hull))


def giou_loss(a, b):
    return tt.sub(1.0, giou(a, b))


def reg_loss(
    pred_cxcywh,
    labels,
    target_cxcywh,
    lambda_giou=LAMBDA_GIOU,
    lambda_l1=LAMBDA_L1,
    normalize=True,
):
    """GIoU + L1 regression over positive positions.

    ``pred_cxcywh`` is a [..., 4] tensor of normalized boxes; ``labels`` is a
    matching [...] 0/1 array; ``target_cxcywh`` broadcasts against it (one
    normalized box per sample). Returns 0 when there are no positives.
    """
    y = np.asarray(labels, dtype=pred_cxcywh.dtype)
    if y.shape != pred_cxcywh.shape[:-1]:
        raise ContractError(f"labels shape {y.shape} != box grid {pred_cxcywh.shape[:-1]}")
    n_pos = float(y.sum())
    if n_pos == 0:
        return Tensor(np.zeros((), dtype=pred_cxcywh.dtype))
    gt = Tensor(np.asarray(target_cxcywh, dtype=pred_cxcywh.dtype))
    l1 = tt.sum_(tt.absolute(tt.sub(pred_cxcywh, gt)), axis=-1)
    g = giou_loss(cxcywh_to_corners(pred_cxcywh), cxcywh_to_corners(gt))
    per_pos = tt.add(tt.mul(g, lambda_giou), tt.mul(l1, lambda_l1))
    total = tt.sum_(tt.mul(per_pos, Tensor(y)))
    if normalize:
        total = tt.mul(total, 1.0 / n_pos)
    return total
