"""Synthetic distractor-tracking task, toy trainer, and evaluation.

Sequences are grayscale frames in [0,1]: one textured target plus K
distractors drawn from the same band-limited texture family with perturbed
phase/contrast, all random-walking independently. Training samples
(reference, candidate) crop pairs and optimizes weighted BCE plus GIoU+L1
with bias-corrected adaptive moments. Everything is seed-deterministic.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .loss import assign_labels, bce_loss, reg_loss
from .model import forward_pair, init_model, toy_model_config
from .tensor import GradTape, Tensor, backward
from .tracker import BBox, crop_region, init, iou, track_step


class GenerationError(RuntimeError):
    """Object placement could not be satisfied within bounded retries."""


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss); message names the step."""


@dataclass
class ToyTaskConfig:
    frame_size: int = 64
    target_size: tuple = (12, 20)
    distractor_count: int = 3
    texture_seed: int = 7
    sigma: float = 1.0
    length: int = 24
    distractor_jitter: float = 0.35
    initial_center: tuple = None  # defaults to the frame center


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr_backbone: float = 1e-3
    lr_heads: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    tca_enabled: bool = True
    wp_enabled: bool = True
    center_jitter: float = 0.1  # candidate-crop center jitter, fraction of side
    sequences_per_step: int = 2

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if min(self.lr_backbone, self.lr_heads) < 0:
            raise ValueError("learning rates must be non-negative")


# ---------------------------------------------------------------------------
# Sequence generation

_N_WAVES = 4


def _texture_family(texture_seed):
    rng = np.random.default_rng(texture_seed)
    freqs = rng.uniform(1.5, 4.0, size=(_N_WAVES, 2)) * rng.choice([-1.0, 1.0], size=(_N_WAVES, 2))
    amps = rng.uniform(0.5, 1.0, size=_N_WAVES)
    return freqs, amps / amps.sum()


def _render_patch(w, h, freqs, amps, phases, contrast):
    u = (np.arange(w) + 0.5) / w
    v = (np.arange(h) + 0.5) / h
    gu, gv = np.meshgrid(u, v)
    t = np.zeros((h, w))
    for m in range(_N_WAVES):
        t += amps[m] * np.cos(2 * math.pi * (freqs[m, 0] * gu + freqs[m, 1] * gv) + phases[m])
    return np.clip(0.5 + 0.45 * contrast * t, 0.0, 1.0)


def _clamp_center(c, half, size):
    return float(np.clip(c, half + 1.0, size - half - 1.0))


def generate_sequence(cfg, seed):
    """Frames [T, S, S] in [0,1] plus per-frame ground-truth boxes.

    The texture family is fixed by ``cfg.texture_seed``; everything
    object-specific (sizes, phases, walks, placements) derives from ``seed``.
    """
    freqs, amps = _texture_family(cfg.texture_seed)
    rng = np.random.default_rng([int(cfg.texture_seed), int(seed)] if not isinstance(seed, (list, tuple)) else list(seed))
    size = cfg.frame_size

    tw = float(rng.uniform(cfg.target_size[0], cfg.target_size[1]))
    th = float(rng.uniform(cfg.target_size[0], cfg.target_size[1]))
    if cfg.initial_center is None:
        tcx, tcy = size / 2.0, size / 2.0
    else:
        tcx, tcy = cfg.initial_center
    tcx = _clamp_center(tcx, tw / 2, size)
    tcy = _clamp_center(tcy, th / 2, size)
    t_phases = rng.uniform(0, 2 * math.pi, size=_N_WAVES)
    t_contrast = float(rng.uniform(0.8, 1.0))

    objects = [
        {"cx": tcx, "cy": tcy, "w": tw, "h": th, "phases": t_phases, "contrast": t_contrast}
    ]
    for _ in range(cfg.distractor_count):
        dw = float(rng.uniform(cfg.target_size[0], cfg.target_size[1]))
        dh = float(rng.uniform(cfg.target_size[0], cfg.target_size[1]))
        placed = False
        for _attempt in range(200):
            dcx = float(rng.uniform(dw / 2 + 1, size - dw / 2 - 1))
            dcy = float(rng.uniform(dh / 2 + 1, size - dh / 2 - 1))
            min_dist = (max(tw, th) + max(dw, dh)) / 2.0 + 3.0
            if math.hypot(dcx - tcx, dcy - tcy) >= min_dist:
                placed = True
                break
        if not placed:
            raise GenerationError(
                f"could not place a distractor of size ({dw:.0f},{dh:.0f}) after 200 attempts"
            )
        jit = cfg.distractor_jitter
        objects.append(
            {
                "cx": dcx,
                "cy": dcy,
                "w": dw,
                "h": dh,
                "phases": t_phases + rng.uniform(-math.pi, math.pi, size=_N_WAVES) * jit,
                "contrast": t_contrast * float(1.0 + rng.uniform(-jit, jit)),
            }
        )

    # static low-frequency background, per sequence
    gx, gy = np.meshgrid(np.arange(size) / size, np.arange(size) / size)
    bg_phase = rng.uniform(0, 2 * math.pi, size=2)
    background = 0.35 + 0.06 * np.cos(2 * math.pi * gx + bg_phase[0]) * np.cos(
        2 * math.pi * gy + bg_phase[1]
    )

    frames = np.empty((cfg.length, size, size), dtype=np.float32)
    gts = []
    for t in range(cfg.length):
        if t > 0:
            for obj in objects:
                obj["cx"] = _clamp_center(obj["cx"] + rng.normal(0, cfg.sigma), obj["w"] / 2, size)
                obj["cy"] = _clamp_center(obj["cy"] + rng.normal(0, cfg.sigma), obj["h"] / 2, size)
        frame = background.copy()
        # draw distractors first so the target stays on top
        for obj in objects[1:] + objects[:1]:
            w_i = int(round(obj["w"]))
            h_i = int(round(obj["h"]))
            x0 = int(round(obj["cx"] - w_i / 2))
            y0 = int(round(obj["cy"] - h_i / 2))
            patch = _render_patch(w_i, h_i, freqs, amps, obj["phases"], obj["contrast"])
            x1, y1 = max(x0, 0), max(y0, 0)
            x2, y2 = min(x0 + w_i, size), min(y0 + h_i, size)
            frame[y1:y2, x1:x2] = patch[y1 - y0 : y2 - y0, x1 - x0 : x2 - x0]
        frames[t] = np.clip(frame, 0.0, 1.0)
        tgt = objects[0]
        gts.append(BBox(tgt["cx"], tgt["cy"], tgt["w"], tgt["h"]))
    return frames, gts


# ---------------------------------------------------------------------------
# Optimizer


class Adam:
    """Bias-corrected adaptive moments (decay 0.9/0.999, eps 1e-8), with
    separate learning rates for backbone and head parameters."""

    def __init__(self, named_params, lr_backbone, lr_heads, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.slots = []
        for name, p in named_params.items():
            lr = lr_heads if name.startswith("head.") else lr_backbone
            self.slots.append(
                (p, lr, np.zeros_like(p.data), np.zeros_like(p.data))
            )

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, lr, m, v in self.slots:
            g = grads.get(p)
            if g is None:
                continue
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# Training


def _score_map_geometry(bcfg):
    cand_cells = bcfg.candidate_size // 8
    ref_cells = bcfg.reference_size // 8
    side = cand_cells - ref_cells + 1
    origin = (bcfg.candidate_size - side * 8) / 2.0
    return side, origin


def sample_batch(rng, task_cfg, model_cfg, batch_size, sequences_per_step=2, center_jitter=0.1):
    """Deterministic (reference, candidate, labels, targets) batch."""
    bcfg = model_cfg.backbone
    params = model_cfg.tracker
    side, origin = _score_map_geometry(bcfg)
    seqs = []
    for i in range(sequences_per_step):
        seq_seed = int(rng.integers(0, 2**31 - 1))
        seqs.append(generate_sequence(task_cfg, seq_seed))
    xs, zs, labels, targets = [], [], [], []
    for i in range(batch_size):
        frames, gts = seqs[i % len(seqs)]
        z_crop, _ = crop_region(frames[0], gts[0], bcfg.reference_size, params.ref_context)
        t = int(rng.integers(1, len(frames)))
        gt = gts[t]
        crop_side = math.sqrt((gt.w + (gt.w + gt.h) / 2) * (gt.h + (gt.w + gt.h) / 2))
        jx = float(rng.uniform(-1, 1)) * center_jitter * crop_side
        jy = float(rng.uniform(-1, 1)) * center_jitter * crop_side
        center = BBox(gt.cx + jx, gt.cy + jy, gt.w, gt.h)
        x_crop, mapping = crop_region(frames[t], center, bcfg.candidate_size, params.cand_context)
        gt_crop = mapping.box_to_crop(gt)
        s = bcfg.candidate_size
        assignment = assign_labels(
            (gt_crop.cx * s, gt_crop.cy * s, gt_crop.w * s, gt_crop.h * s),
            side,
            side,
            8,
            s,
            origin=(origin, origin),
        )
        xs.append(x_crop[:, :, None])
        zs.append(z_crop[:, :, None])
        labels.append(assignment.labels)
        targets.append(assignment.target)
    x = np.stack(xs).astype(np.float32)
    z = np.stack(zs).astype(np.float32)
    y = np.stack(labels)
    tgt = np.stack(targets).reshape(batch_size, 1, 1, 4)
    return x, z, y, tgt


def train_toy(model_seed, task_cfg, train_cfg, model_cfg=None):
    """Train the toy preset on the synthetic task; returns (model, losses)."""
    if model_cfg is None:
        model_cfg = toy_model_config(
            tca_enabled=train_cfg.tca_enabled, wp_enabled=train_cfg.wp_enabled
        )
    model = init_model(model_cfg, model_seed)
    params = model.named_parameters()
    opt = Adam(
        params,
        train_cfg.lr_backbone,
        train_cfg.lr_heads,
        train_cfg.beta1,
        train_cfg.beta2,
        train_cfg.eps,
    )
    losses = []
    for step in range(train_cfg.steps):
        rng = np.random.default_rng([int(train_cfg.seed), step])
        x, z, y, tgt = sample_batch(
            rng,
            task_cfg,
            model_cfg,
            train_cfg.batch_size,
            train_cfg.sequences_per_step,
            train_cfg.center_jitter,
        )
        with GradTape() as tape:
            cls, reg = forward_pair(model, Tensor(x), Tensor(z))
            total = tt.add(bce_loss(cls, y.astype(np.float32)), reg_loss(reg, y, tgt))
        value = float(total.item())
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at step {step}")
        grads = backward(total, tape)
        opt.step(grads)
        losses.append(value)
    return model, losses


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EpisodeMetrics:
    episode: int
    seed: int
    center_accuracy: float
    mean_iou: float


@dataclass
class EvalResult:
    episodes: list
    center_accuracy: float
    mean_iou: float
    traces: list = field(default_factory=list)


def evaluate(model, task_cfg, episodes, seed, tau=8.0, window_weight=None):
    """Run the tracker over fresh sequences; center accuracy is the fraction
    of tracked frames whose predicted center lies within ``tau`` pixels."""
    rows, traces = [], []
    for e in range(episodes):
        frames, gts = generate_sequence(task_cfg, [int(seed), e])
        state = init(frames[0], gts[0], model, window_weight=window_weight)
        hits, ious, boxes = [], [], [gts[0]]
        for t in range(1, len(frames)):
            box, state, _ = track_step(state, frames[t])
            boxes.append(box)
            dist = math.hypot(box.cx - gts[t].cx, box.cy - gts[t].cy)
            hits.append(1.0 if dist <= tau else 0.0)
            ious.append(iou(box, gts[t]))
        rows.append(EpisodeMetrics(e, seed, float(np.mean(hits)), float(np.mean(ious))))
        traces.append(boxes)
    return EvalResult(
        rows,
        float(np.mean([r.center_accuracy for r in rows])),
        float(np.mean([r.mean_iou for r in rows])),
        traces,
    )


def metrics_to_csv(result, path):
    """CSV schema: episode, seed, center_accuracy, mean_iou (LF endings)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["episode", "seed", "center_accuracy", "mean_iou"])
        for r in result.episodes:
            writer.writerow([r.episode, r.seed, f"{r.center_accuracy:.6f}", f"{r.mean_iou:.6f}"])
