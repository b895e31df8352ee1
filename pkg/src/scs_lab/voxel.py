"""BEV voxel grids, heatmap and shape-regression targets, supervision masks.

Each class gets its own grid resolution (pedestrians need finer cells than
vehicles). Heatmap targets place a Gaussian of the BEV distance to the box
center, clamped to zero outside the box, with the center voxel forced to
exactly 1 so the positive set is exactly the box-center voxels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geometry import Box7, points_in_box

SCHEMES = ("aggressive", "conservative", "informed")


@dataclass(frozen=True)
class VoxelConfig:
    """Grid geometry. ``cell_size`` and ``feature_window`` are per class id."""

    extent: float = 12.0  # grid covers [-extent, extent) in x and y
    cell_size: Mapping[int, float] = field(default_factory=lambda: {1: 0.4, 2: 0.2})
    feature_window: Mapping[int, int] = field(default_factory=lambda: {1: 11, 2: 7})

    def __post_init__(self):
        for k, c in self.cell_size.items():
            if c <= 0:
                raise ValueError(f"cell size for class {k} must be positive")

    def dims(self, class_id: int) -> int:
        return int(round(2.0 * self.extent / self.cell_size[class_id]))


@dataclass(frozen=True)
class VoxelGrid:
    """Per-voxel point statistics for one class on one frame."""

    class_id: int
    origin: tuple[float, float]
    cell: float
    count: np.ndarray  # (nx, ny)
    mean_z: np.ndarray
    z_var: np.ndarray
    mean_range: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.count.shape

    def voxel_centers(self, ix: np.ndarray, iy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        cx = self.origin[0] + (np.asarray(ix) + 0.5) * self.cell
        cy = self.origin[1] + (np.asarray(iy) + 0.5) * self.cell
        return cx, cy

    def voxel_of(self, x: float, y: float) -> tuple[int, int]:
        return (
            int(math.floor((x - self.origin[0]) / self.cell)),
            int(math.floor((y - self.origin[1]) / self.cell)),
        )

    def in_bounds(self, ix: int, iy: int) -> bool:
        nx, ny = self.count.shape
        return 0 <= ix < nx and 0 <= iy < ny


@dataclass(frozen=True)
class ClassHeatmap:
    """Heatmap target for one class: values, positive set, supervised set."""

    values: np.ndarray  # (nx, ny) in [0, 1]
    positive: np.ndarray  # bool, values > 1 - eps
    supervised: np.ndarray  # bool, voxels contributing loss

    def __post_init__(self):
        if np.any(self.positive & ~self.supervised):
            raise ValueError("positive voxels must be supervised")


# A full heatmap target is one ClassHeatmap per class id.
HeatmapTarget = dict[int, ClassHeatmap]


@dataclass(frozen=True)
class ShapeTarget:
    """Regression targets at positive (box-center) voxels of one class."""

    voxel_ix: np.ndarray  # (P,)
    voxel_iy: np.ndarray  # (P,)
    offsets: np.ndarray  # (P, 3) dx, dy, dz from voxel center / voxel mean z
    log_sizes: np.ndarray  # (P, 3) log length, log width, log height
    heading_bin: np.ndarray  # (P,) int in {0..B-1}
    heading_residual: np.ndarray  # (P,) radians in [-pi/B, pi/B)
    num_bins: int


def voxelize(points: np.ndarray, class_id: int, cfg: VoxelConfig) -> VoxelGrid:
    """Bin points into the class grid and accumulate per-voxel statistics."""
    cell = cfg.cell_size[class_id]
    n = cfg.dims(class_id)
    origin = (-cfg.extent, -cfg.extent)
    count = np.zeros((n, n))
    sum_z = np.zeros((n, n))
    sum_z2 = np.zeros((n, n))
    sum_r = np.zeros((n, n))
    pts = np.asarray(points, dtype=np.float64).reshape(-1, points.shape[-1] if len(points) else 4)
    if len(pts):
        ix = np.floor((pts[:, 0] - origin[0]) / cell).astype(np.int64)
        iy = np.floor((pts[:, 1] - origin[1]) / cell).astype(np.int64)
        keep = (ix >= 0) & (ix < n) & (iy >= 0) & (iy < n)
        ix, iy = ix[keep], iy[keep]
        z = pts[keep, 2]
        r = np.sqrt(pts[keep, 0] ** 2 + pts[keep, 1] ** 2 + z**2)
        np.add.at(count, (ix, iy), 1.0)
        np.add.at(sum_z, (ix, iy), z)
        np.add.at(sum_z2, (ix, iy), z**2)
        np.add.at(sum_r, (ix, iy), r)
    occupied = count > 0
    denom = np.maximum(count, 1.0)
    mean_z = np.where(occupied, sum_z / denom, 0.0)
    z_var = np.where(occupied, np.maximum(sum_z2 / denom - mean_z**2, 0.0), 0.0)
    mean_range = np.where(occupied, sum_r / denom, 0.0)
    return VoxelGrid(class_id, origin, cell, count, mean_z, z_var, mean_range)


def _paint_box(grid: VoxelGrid, box: Box7, values: np.ndarray) -> None:
    """Max-compose the box's center Gaussian into ``values`` (in-box only)."""
    sigma = 0.25 * min(box.length, box.width)
    reach = 0.5 * math.hypot(box.length, box.width)
    nx, ny = grid.shape
    x0 = max(grid.voxel_of(box.cx - reach, 0)[0], 0)
    x1 = min(grid.voxel_of(box.cx + reach, 0)[0] + 1, nx)
    y0 = max(grid.voxel_of(0, box.cy - reach)[1], 0)
    y1 = min(grid.voxel_of(0, box.cy + reach)[1] + 1, ny)
    if x0 >= x1 or y0 >= y1:
        return
    ix, iy = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1), indexing="ij")
    cx, cy = grid.voxel_centers(ix, iy)
    centers = np.column_stack([cx.ravel(), cy.ravel(), np.full(cx.size, box.cz), np.zeros(cx.size)])
    inside = points_in_box(centers, box).reshape(cx.shape)
    d2 = (cx - box.cx) ** 2 + (cy - box.cy) ** 2
    kernel = np.where(inside, np.exp(-d2 / (2.0 * sigma**2)), 0.0)
    block = values[x0:x1, y0:y1]
    np.maximum(block, kernel, out=block)


def build_heatmap_target(grid: VoxelGrid, boxes: Sequence[Box7], eps: float = 1e-3) -> ClassHeatmap:
    """Heatmap target for one class from that class's (pseudo or true) boxes.

    The returned target is fully supervised; scheme masks are applied by
    :func:`heatmap_masks` afterwards.
    """
    values = np.zeros(grid.shape)
    for box in boxes:
        if box.class_id != grid.class_id:
            raise ValueError("box class does not match the grid class")
        _paint_box(grid, box, values)
    for box in boxes:
        ix, iy = grid.voxel_of(box.cx, box.cy)
        if grid.in_bounds(ix, iy):
            values[ix, iy] = 1.0
    positive = values > 1.0 - eps
    return ClassHeatmap(values=values, positive=positive, supervised=np.ones(grid.shape, dtype=bool))


def _bin_encode(heading: float, num_bins: int) -> tuple[int, float]:
    width = 2.0 * math.pi / num_bins
    shifted = (heading + math.pi) % (2.0 * math.pi)
    idx = min(int(shifted // width), num_bins - 1)
    residual = shifted - (idx + 0.5) * width
    return idx, residual


def bin_decode(idx: int, residual: float, num_bins: int) -> float:
    width = 2.0 * math.pi / num_bins
    return -math.pi + (idx + 0.5) * width + residual


def build_shape_target(
    grid: VoxelGrid, boxes: Sequence[Box7], eps: float = 1e-3, num_bins: int = 12
) -> ShapeTarget:
    """Regression targets at the positive voxels defined by ``boxes``.

    Positive voxels are exactly the box-center voxels (the heatmap forces
    those to 1). When two centers share a voxel the nearer center owns it.
    """
    if num_bins < 2:
        raise ValueError("need at least two heading bins")
    owners: dict[tuple[int, int], Box7] = {}
    for box in boxes:
        ix, iy = grid.voxel_of(box.cx, box.cy)
        if not grid.in_bounds(ix, iy):
            continue
        key = (ix, iy)
        if key in owners:
            vx, vy = grid.voxel_centers(np.array(ix), np.array(iy))
            cur = owners[key]
            if (box.cx - vx) ** 2 + (box.cy - vy) ** 2 < (cur.cx - vx) ** 2 + (cur.cy - vy) ** 2:
                owners[key] = box
        else:
            owners[key] = box
    keys = sorted(owners)
    p = len(keys)
    voxel_ix = np.array([k[0] for k in keys], dtype=np.int64)
    voxel_iy = np.array([k[1] for k in keys], dtype=np.int64)
    offsets = np.zeros((p, 3))
    log_sizes = np.zeros((p, 3))
    bins = np.zeros(p, dtype=np.int64)
    residuals = np.zeros(p)
    vx, vy = grid.voxel_centers(voxel_ix, voxel_iy)
    for i, key in enumerate(keys):
        box = owners[key]
        offsets[i] = (
            box.cx - vx[i],
            box.cy - vy[i],
            box.cz - grid.mean_z[key],
        )
        log_sizes[i] = (math.log(box.length), math.log(box.width), math.log(box.height))
        bins[i], residuals[i] = _bin_encode(box.heading, num_bins)
    return ShapeTarget(voxel_ix, voxel_iy, offsets, log_sizes, bins, residuals, num_bins)


def _voxels_in_boxes(grid: VoxelGrid, boxes: Sequence[Box7]) -> np.ndarray:
    """Bool grid of voxels whose center falls inside any of the boxes (BEV)."""
    mask = np.zeros(grid.shape, dtype=bool)
    nx, ny = grid.shape
    for box in boxes:
        reach = 0.5 * math.hypot(box.length, box.width)
        x0 = max(grid.voxel_of(box.cx - reach, 0)[0], 0)
        x1 = min(grid.voxel_of(box.cx + reach, 0)[0] + 1, nx)
        y0 = max(grid.voxel_of(0, box.cy - reach)[1], 0)
        y1 = min(grid.voxel_of(0, box.cy + reach)[1] + 1, ny)
        if x0 >= x1 or y0 >= y1:
            continue
        ix, iy = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1), indexing="ij")
        cx, cy = grid.voxel_centers(ix, iy)
        centers = np.column_stack(
            [cx.ravel(), cy.ravel(), np.full(cx.size, box.cz), np.zeros(cx.size)]
        )
        inside = points_in_box(centers, box).reshape(cx.shape)
        mask[x0:x1, y0:y1] |= inside
    return mask


def heatmap_masks(
    grids: Mapping[int, VoxelGrid],
    trusted_boxes: Mapping[int, Sequence[Box7]],
    labeled_classes: frozenset[int],
    scheme: str,
) -> dict[int, np.ndarray]:
    """Supervised-voxel masks per class for one training frame.

    Labeled classes are fully supervised under every scheme. For unlabeled
    classes: aggressive supervises everything, conservative only voxels
    inside that class's trusted boxes, informed voxels inside trusted boxes
    of any class (a voxel inside some other object cannot hold this class).
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    masks: dict[int, np.ndarray] = {}
    all_boxes = [b for boxes in trusted_boxes.values() for b in boxes]
    for k, grid in grids.items():
        if k in labeled_classes or scheme == "aggressive":
            masks[k] = np.ones(grid.shape, dtype=bool)
        elif scheme == "conservative":
            masks[k] = _voxels_in_boxes(grid, trusted_boxes.get(k, ()))
        else:  # informed
            masks[k] = _voxels_in_boxes(grid, all_boxes)
    return masks
