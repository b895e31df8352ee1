"""Desk-scale two-stage detector and its SGD training loop.

Stage 1 is a linear softmax over per-pixel features that segments the range
image into background plus K classes. Stage 2, one head per class, runs
linear heads over hand-built voxel-neighborhood features: a sigmoid
center-ness heatmap, a softmax over heading bins, and linear regression of
the heading residual and box shape. Gradients are hand-derived end to end;
there is no autodiff anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .geometry import Box7, DetBox, Frame
from .losses import LossConfig
from .rangeimage import FEATURE_ARITY, ProjectionConfig, RangeImage
from .voxel import VoxelConfig, VoxelGrid, bin_decode

STAGE1_ARITY = FEATURE_ARITY
VOXEL_FEATURE_ARITY = 20


class TrainingDiverged(RuntimeError):
    """Raised when the batch loss stops being finite; carries the partial trace."""

    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


@dataclass
class Stage1Model:
    """Linear softmax segmenter: weights are (feature arity, K+1)."""

    weights: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1] - 1


@dataclass
class Stage2Model:
    """Per-class detection head: heatmap, heading bins, residual + shape."""

    heatmap: np.ndarray  # (A,)
    bins: np.ndarray  # (A, B)
    shape: np.ndarray  # (A, 7): column 0 heading residual, 1..6 box shape


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1200
    warmup: int = 100
    batch_size: int = 8
    lr: float = 0.12
    momentum: float = 0.9
    p_vehicle: float = 0.5
    strategy: str = "supervised"  # supervised | self | teacher | integrated
    seed: int = 0
    augment: bool = True
    stage2_gt_phase: float = 0.25  # fraction of iterations fed from label classes
    score_floor: float = 0.2
    nms_iou: float = 0.3
    num_classes: int = 2
    loss: LossConfig = field(default_factory=LossConfig)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    voxel: VoxelConfig = field(default_factory=VoxelConfig)

    def __post_init__(self):
        if not 0.0 <= self.p_vehicle <= 1.0:
            raise ValueError("p_vehicle must lie in [0, 1]")
        if self.iterations <= self.warmup or self.warmup < 0:
            raise ValueError("need iterations > warmup >= 0")
        if self.strategy not in ("supervised", "self", "teacher", "integrated"):
            raise ValueError(f"unknown strategy {self.strategy!r}")

    @property
    def scheme(self) -> str:
        return self.loss.scheme


def learning_rate(t: int, cfg: TrainConfig) -> float:
    """Linear warmup, then constant: lr * t / warmup for t < warmup."""
    if t < cfg.warmup:
        return cfg.lr * t / cfg.warmup
    return cfg.lr


def init_models(cfg: TrainConfig) -> tuple[Stage1Model, dict[int, Stage2Model]]:
    """Zero-initialized models; the heatmap bias starts at logit(0.1) so the
    center-ness head does not drown early training in negative loss."""
    stage1 = Stage1Model(np.zeros((STAGE1_ARITY, cfg.num_classes + 1)))
    stage2 = {}
    for k in range(1, cfg.num_classes + 1):
        hm = np.zeros(VOXEL_FEATURE_ARITY)
        hm[0] = math.log(0.1 / 0.9)
        stage2[k] = Stage2Model(
            heatmap=hm,
            bins=np.zeros((VOXEL_FEATURE_ARITY, cfg.loss.num_bins)),
            shape=np.zeros((VOXEL_FEATURE_ARITY, 7)),
        )
    return stage1, stage2


# --- stage 1 -------------------------------------------------------------------


def _squash_pixel_features(feats: np.ndarray) -> np.ndarray:
    """Condition the raw pixel channels to O(1) magnitudes for SGD."""
    out = np.empty_like(feats)
    out[..., 0] = feats[..., 0] * 0.1
    out[..., 1] = feats[..., 1]
    out[..., 2] = np.log1p(feats[..., 2])
    out[..., 3] = feats[..., 3]
    out[..., 4] = feats[..., 4]
    return out


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def stage1_forward(model: Stage1Model, feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    squashed = _squash_pixel_features(np.asarray(feats, dtype=np.float64))
    probs = _softmax(squashed @ model.weights)
    return probs, squashed


def forward_stage1(model: Stage1Model, feats: np.ndarray) -> np.ndarray:
    """Per-pixel class distribution over {0..K}, shape (H, W, K+1)."""
    return stage1_forward(model, feats)[0]


def foreground_select(probs: np.ndarray, ri: RangeImage) -> dict[int, np.ndarray]:
    """Assign each valid pixel's source point to its argmax class.

    Background points are discarded; the result maps class id to point
    indices, forming a partition of the classified points.
    """
    num_classes = probs.shape[-1] - 1
    pred = np.argmax(probs, axis=-1)
    out = {}
    for k in range(1, num_classes + 1):
        sel = ri.valid & (pred == k)
        out[k] = np.sort(ri.point_index[sel])
    return out


# --- stage 2 -------------------------------------------------------------------


def _window_sum(arr: np.ndarray, w: int) -> np.ndarray:
    n, m = arr.shape
    half = w // 2
    integral = np.zeros((n + 1, m + 1))
    integral[1:, 1:] = arr.cumsum(0).cumsum(1)
    r0 = np.clip(np.arange(n) - half, 0, n)
    r1 = np.clip(np.arange(n) + half + 1, 0, n)
    c0 = np.clip(np.arange(m) - half, 0, m)
    c1 = np.clip(np.arange(m) + half + 1, 0, m)
    return integral[r1][:, c1] - integral[r0][:, c1] - integral[r1][:, c0] + integral[r0][:, c0]


def _axis_residual(axis: np.ndarray, num_bins: int) -> np.ndarray:
    """Offset of a principal-axis angle from the nearest heading-bin center.

    Heading bins tile [-pi, pi); for an even bin count the centers repeat
    with period 2pi/B modulo pi, so the axis angle alone determines the
    within-bin residual.
    """
    width = 2.0 * math.pi / num_bins
    return (axis % width) - width / 2.0


def voxel_features(grid: VoxelGrid, window: int, num_bins: int) -> np.ndarray:
    """Hand-built per-voxel features, shape (nx, ny, VOXEL_FEATURE_ARITY).

    Neighborhood occupancy encodes object extent, the count-weighted local
    centroid points toward the object center, and the central second moments
    carry the principal-axis direction the heading heads need.
    """
    nx, ny = grid.shape
    count = grid.count
    occ = (count > 0).astype(np.float64)
    xs = grid.origin[0] + (np.arange(nx) + 0.5) * grid.cell
    ys = grid.origin[1] + (np.arange(ny) + 0.5) * grid.cell
    vx = np.broadcast_to(xs[:, None], (nx, ny))
    vy = np.broadcast_to(ys[None, :], (nx, ny))

    w_count = _window_sum(count, window)
    w_x = _window_sum(count * vx, window)
    w_y = _window_sum(count * vy, window)
    w_xx = _window_sum(count * vx * vx, window)
    w_yy = _window_sum(count * vy * vy, window)
    w_xy = _window_sum(count * vx * vy, window)
    w_zsum = _window_sum(count * grid.mean_z, window)

    denom = np.maximum(w_count, 1e-9)
    ex, ey = w_x / denom, w_y / denom
    mxx = np.maximum(w_xx / denom - ex**2, 0.0)
    myy = np.maximum(w_yy / denom - ey**2, 0.0)
    mxy = w_xy / denom - ex * ey
    has_mass = w_count > 0
    cm_x = np.where(has_mass, ex - vx, 0.0)
    cm_y = np.where(has_mass, ey - vy, 0.0)
    ecc = np.hypot(mxx - myy, 2.0 * mxy)
    safe = np.maximum(ecc, 1e-9)
    c2 = np.where(has_mass, (mxx - myy) / safe, 0.0)
    s2 = np.where(has_mass, 2.0 * mxy / safe, 0.0)
    axis = 0.5 * np.arctan2(2.0 * mxy, mxx - myy)

    feats = np.empty((nx, ny, VOXEL_FEATURE_ARITY))
    feats[..., 0] = 1.0
    feats[..., 1] = occ
    feats[..., 2] = np.log1p(count)
    feats[..., 3] = _window_sum(occ, 3) / 9.0
    feats[..., 4] = _window_sum(occ, 5) / 25.0
    feats[..., 5] = _window_sum(occ, window) / float(window * window)
    feats[..., 6] = cm_x
    feats[..., 7] = cm_y
    feats[..., 8] = cm_x**2 + cm_y**2
    feats[..., 9] = np.where(has_mass, mxx, 0.0)
    feats[..., 10] = np.where(has_mass, myy, 0.0)
    feats[..., 11] = np.where(has_mass, mxy, 0.0)
    feats[..., 12] = c2
    feats[..., 13] = s2
    feats[..., 14] = np.where(has_mass, axis, 0.0)
    feats[..., 15] = np.where(has_mass, _axis_residual(axis, num_bins), 0.0)
    feats[..., 16] = np.where(has_mass, w_zsum / denom, 0.0)
    feats[..., 17] = grid.mean_z
    feats[..., 18] = grid.z_var
    feats[..., 19] = grid.mean_range * 0.1
    return feats


@dataclass(frozen=True)
class Stage2Outputs:
    heatmap: np.ndarray  # (nx, ny) in (0, 1)
    bins: np.ndarray  # (nx, ny, B), normalized per voxel
    residual: np.ndarray  # (nx, ny)
    shape: np.ndarray  # (nx, ny, 6)
    features: np.ndarray  # (nx, ny, A), kept for the backward pass


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def forward_stage2(
    model: Stage2Model, grid: VoxelGrid, cfg: TrainConfig | None = None,
    window: int | None = None, num_bins: int | None = None,
) -> Stage2Outputs:
    """All stage-2 heads evaluated on every voxel of the class grid."""
    if cfg is not None:
        window = cfg.voxel.feature_window[grid.class_id]
        num_bins = cfg.loss.num_bins
    feats = voxel_features(grid, window, num_bins)
    flat = feats.reshape(-1, VOXEL_FEATURE_ARITY)
    hm = _sigmoid(flat @ model.heatmap).reshape(grid.shape)
    hm = np.clip(hm, 1e-6, 1.0 - 1e-6)
    bins = _softmax(flat @ model.bins).reshape(grid.shape + (model.bins.shape[1],))
    sr = (flat @ model.shape).reshape(grid.shape + (7,))
    return Stage2Outputs(
        heatmap=hm, bins=bins, residual=sr[..., 0], shape=sr[..., 1:], features=feats
    )


def decode_detections(
    outputs: Stage2Outputs, grid: VoxelGrid, score_floor: float, nms_iou: float = 0.3
) -> list[DetBox]:
    """Peak-pick the heatmap, decode box parameters, then suppress overlaps."""
    from .geometry import nms  # local import to avoid cycles at module load

    hm = outputs.heatmap
    peak = hm > score_floor
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            shifted = np.full_like(hm, -np.inf)
            src_r = slice(max(dr, 0), hm.shape[0] + min(dr, 0))
            dst_r = slice(max(-dr, 0), hm.shape[0] + min(-dr, 0))
            src_c = slice(max(dc, 0), hm.shape[1] + min(dc, 0))
            dst_c = slice(max(-dc, 0), hm.shape[1] + min(-dc, 0))
            shifted[dst_r, dst_c] = hm[src_r, src_c]
            peak &= hm >= shifted
    coords = np.argwhere(peak)
    if len(coords) == 0:
        return []
    order = np.argsort(-hm[coords[:, 0], coords[:, 1]], kind="stable")
    dets = []
    for ix, iy in coords[order]:
        vx, vy = grid.voxel_centers(np.array(ix), np.array(iy))
        dx, dy = outputs.shape[ix, iy, 0], outputs.shape[ix, iy, 1]
        dz = outputs.shape[ix, iy, 2]
        log_sizes = np.clip(outputs.shape[ix, iy, 3:6], math.log(0.05), math.log(30.0))
        heading = bin_decode(
            int(np.argmax(outputs.bins[ix, iy])),
            float(outputs.residual[ix, iy]),
            outputs.bins.shape[-1],
        )
        box = Box7(
            cx=float(vx + dx),
            cy=float(vy + dy),
            cz=float(grid.mean_z[ix, iy] + dz),
            length=float(np.exp(log_sizes[0])),
            width=float(np.exp(log_sizes[1])),
            height=float(np.exp(log_sizes[2])),
            heading=heading,
            class_id=grid.class_id,
        )
        dets.append(DetBox(box, float(hm[ix, iy])))
    return nms(dets, nms_iou)


# --- batching -------------------------------------------------------------------


def sample_batch(
    subset_v: Sequence[Frame],
    subset_p: Sequence[Frame],
    p_vehicle: float,
    batch_size: int,
    rng: np.random.Generator,
) -> list[Frame]:
    """Each slot draws from the vehicle subset with probability ``p_vehicle``,
    otherwise from the pedestrian subset; uniform within the subset."""
    batch = []
    for _ in range(batch_size):
        take_vehicle = rng.random() < p_vehicle
        pool = subset_v if take_vehicle else subset_p
        if not pool:
            raise ValueError("cannot sample from an empty subset")
        batch.append(pool[int(rng.integers(0, len(pool)))])
    return batch


@dataclass
class TrainResult:
    stage1: Stage1Model
    stage2: dict[int, Stage2Model]
    trace: list[float]
    stats: dict


@dataclass(frozen=True)
class Teacher:
    """A single-class detector used to pseudo-label frames that do not carry
    labels for its class."""

    class_id: int
    stage1: Stage1Model  # binary: background vs its class
    stage2: Stage2Model


def train(
    subsets: Sequence[Sequence[Frame]],
    cfg: TrainConfig,
    teachers: Mapping[int, Teacher] | None = None,
) -> TrainResult:
    """SGD with momentum and linear warmup over resampled mini-batches.

    ``subsets`` is (vehicle-labeled, pedestrian-labeled) for split training
    or a single fully-labeled list. Pseudo-label strategies other than
    ``supervised`` rebuild targets every iteration from unaugmented inputs.
    Deterministic given the config, including its seed.
    """
    from . import pipeline  # deferred: pipeline imports this module's models

    return pipeline.run_training(subsets, cfg, teachers)


def train_teachers(
    subset_v: Sequence[Frame], subset_p: Sequence[Frame], cfg: TrainConfig
) -> dict[int, Teacher]:
    """Train one single-class teacher per class on its labeled subset.

    Each teacher sees only frames that label its class, remapped to a binary
    problem, and trains as plain supervised learning.
    """
    from . import pipeline

    teachers = {}
    for class_id, subset in ((1, subset_v), (2, subset_p)):
        if not subset:
            raise ValueError("teacher training needs a non-empty subset")
        remapped = [pipeline.remap_to_binary(f, class_id) for f in subset]
        tcfg = replace(
            cfg,
            strategy="supervised",
            num_classes=1,
            seed=cfg.seed + 7919 * class_id,
            loss=replace(cfg.loss, scheme="aggressive", seg_scheme=None, hm_scheme=None),
            voxel=VoxelConfig(
                extent=cfg.voxel.extent,
                cell_size={1: cfg.voxel.cell_size[class_id]},
                feature_window={1: cfg.voxel.feature_window[class_id]},
            ),
        )
        result = pipeline.run_training([remapped], tcfg, None)
        teachers[class_id] = Teacher(class_id, result.stage1, result.stage2[1])
    return teachers
