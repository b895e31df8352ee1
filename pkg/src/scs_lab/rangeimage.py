"""Range images: spherical projection, segmentation targets, pixel features.

A range image is a (H, W) grid over azimuth x inclination. Each valid pixel
stores the nearest return that fell into its bin plus a back-reference to the
source point, which later lets per-point labels move between differently
augmented projections of the same scene.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import Frame, points_in_box

FEATURE_ARITY = 5  # range, z, 3x3 range variance, validity flag, bias


@dataclass(frozen=True)
class ProjectionConfig:
    height: int = 32
    width: int = 256
    azimuth_span: tuple[float, float] = (-math.pi, math.pi)
    inclination_span: tuple[float, float] = (-0.3, 0.1)

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("image dimensions must be >= 1")
        if self.azimuth_span[1] <= self.azimuth_span[0]:
            raise ValueError("azimuth span must be increasing")
        if self.inclination_span[1] <= self.inclination_span[0]:
            raise ValueError("inclination span must be increasing")


@dataclass(frozen=True)
class RangeImage:
    """Projected scene. Invalid pixels carry no channels and no back-reference."""

    rng: np.ndarray  # (H, W) range in meters, 0 where invalid
    z: np.ndarray  # (H, W)
    intensity: np.ndarray  # (H, W)
    valid: np.ndarray  # (H, W) bool
    point_index: np.ndarray  # (H, W) int, -1 where invalid
    config: ProjectionConfig


@dataclass(frozen=True)
class SegTarget:
    """Per-pixel class targets with missing-label bookkeeping.

    ``classes`` holds 0 for background and k in {1..K} for foreground.
    ``missing`` marks valid pixels with no foreground label (their true class
    is unknown). ``untrusted`` is the subset of ``missing`` that remains
    unreliable after pseudo-labeling; before any labeler runs it equals
    ``missing``.
    """

    classes: np.ndarray  # (H, W) int
    missing: np.ndarray  # (H, W) bool
    untrusted: np.ndarray  # (H, W) bool
    valid: np.ndarray  # (H, W) bool
    labeled_classes: frozenset[int]
    num_classes: int

    def __post_init__(self):
        # pseudo-labeling may later put a foreground class on a missing pixel
        # (missing is preserved as bookkeeping), so only the subset relation
        # is a type-level invariant
        if np.any(self.untrusted & ~self.missing):
            raise ValueError("untrusted mask must be a subset of the missing mask")

    @property
    def unlabeled_classes(self) -> frozenset[int]:
        return frozenset(range(1, self.num_classes + 1)) - self.labeled_classes


def project(points: np.ndarray, cfg: ProjectionConfig) -> RangeImage:
    """Bin points by azimuth/inclination; collisions keep the nearer point.

    Points outside either span are dropped.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    rng_img = np.zeros((cfg.height, cfg.width))
    z_img = np.zeros((cfg.height, cfg.width))
    int_img = np.zeros((cfg.height, cfg.width))
    idx_img = np.full((cfg.height, cfg.width), -1, dtype=np.int64)
    if n == 0:
        return RangeImage(rng_img, z_img, int_img, idx_img >= 0, idx_img, cfg)

    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    horiz = np.hypot(x, y)
    dist = np.sqrt(horiz**2 + z**2)
    azimuth = np.arctan2(y, x)
    inclination = np.arctan2(z, horiz)

    az_lo, az_hi = cfg.azimuth_span
    in_lo, in_hi = cfg.inclination_span
    col = np.floor((azimuth - az_lo) / (az_hi - az_lo) * cfg.width).astype(np.int64)
    # row 0 is the top of the image (highest inclination)
    row = np.floor((in_hi - inclination) / (in_hi - in_lo) * cfg.height).astype(np.int64)
    keep = (
        (dist > 0)
        & (azimuth >= az_lo)
        & (azimuth <= az_hi)
        & (inclination >= in_lo)
        & (inclination <= in_hi)
    )
    col = np.clip(col, 0, cfg.width - 1)
    row = np.clip(row, 0, cfg.height - 1)

    # nearer point wins each bin: process in descending range so the nearest
    # write lands last
    order = np.argsort(-dist[keep], kind="stable")
    sel = np.flatnonzero(keep)[order]
    r_sel, c_sel = row[sel], col[sel]
    rng_img[r_sel, c_sel] = dist[sel]
    z_img[r_sel, c_sel] = z[sel]
    int_img[r_sel, c_sel] = pts[sel, 3]
    idx_img[r_sel, c_sel] = sel
    return RangeImage(rng_img, z_img, int_img, idx_img >= 0, idx_img, cfg)


def build_seg_target(ri: RangeImage, frame: Frame, num_classes: int = 2) -> SegTarget:
    """Label each valid pixel from the frame's labeled boxes.

    A pixel gets class k iff its source point lies inside a labeled box of
    class k; points in several boxes take the box with the nearest center.
    Every other valid pixel gets class 0 and is marked missing, because its
    true class could be any unlabeled one.
    """
    if np.any(ri.valid & (ri.point_index < 0)):
        raise ValueError("valid pixel without a source point back-reference")
    classes = np.zeros(ri.rng.shape, dtype=np.int64)
    pts = frame.points
    flat_idx = ri.point_index[ri.valid]
    best_dist = np.full(len(flat_idx), np.inf)
    best_class = np.zeros(len(flat_idx), dtype=np.int64)
    for box in frame.boxes:
        if box.class_id not in frame.labeled_classes:
            continue
        inside = points_in_box(pts[flat_idx], box)
        if not np.any(inside):
            continue
        d = np.full(len(flat_idx), np.inf)
        sub = pts[flat_idx[inside]]
        d[inside] = (
            (sub[:, 0] - box.cx) ** 2 + (sub[:, 1] - box.cy) ** 2 + (sub[:, 2] - box.cz) ** 2
        )
        closer = d < best_dist
        best_dist[closer] = d[closer]
        best_class[closer] = box.class_id
    classes[ri.valid] = best_class
    missing = ri.valid & (classes == 0)
    return SegTarget(
        classes=classes,
        missing=missing,
        untrusted=missing.copy(),
        valid=ri.valid.copy(),
        labeled_classes=frame.labeled_classes,
        num_classes=num_classes,
    )


def local_range_variance(ri: RangeImage) -> np.ndarray:
    """Population variance of the range channel over each 3x3 window.

    Only valid pixels enter the window statistics; windows with fewer than
    two valid pixels get variance 0.
    """
    h, w = ri.rng.shape
    count = np.zeros((h, w))
    total = np.zeros((h, w))
    total_sq = np.zeros((h, w))
    val = np.where(ri.valid, ri.rng, 0.0)
    msk = ri.valid.astype(np.float64)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            sr = slice(max(dr, 0), h + min(dr, 0))
            tr = slice(max(-dr, 0), h + min(-dr, 0))
            sc = slice(max(dc, 0), w + min(dc, 0))
            tc = slice(max(-dc, 0), w + min(-dc, 0))
            count[tr, tc] += msk[sr, sc]
            total[tr, tc] += val[sr, sc]
            total_sq[tr, tc] += val[sr, sc] ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), 0.0)
        var = np.where(count >= 2, total_sq / np.maximum(count, 1) - mean**2, 0.0)
    return np.maximum(var, 0.0)


def pixel_features(ri: RangeImage) -> np.ndarray:
    """Per-pixel feature vectors, shape (H, W, 5).

    Channels: range, z, 3x3 local range variance, validity flag, constant
    bias. Invalid pixels are all-zero except the bias.
    """
    var = local_range_variance(ri)
    feats = np.zeros(ri.rng.shape + (FEATURE_ARITY,))
    v = ri.valid
    feats[..., 0] = np.where(v, ri.rng, 0.0)
    feats[..., 1] = np.where(v, ri.z, 0.0)
    feats[..., 2] = np.where(v, var, 0.0)
    feats[..., 3] = v.astype(np.float64)
    feats[..., 4] = 1.0
    return feats


def replace_untrusted(target: SegTarget, untrusted: np.ndarray) -> SegTarget:
    return replace(target, untrusted=untrusted)
