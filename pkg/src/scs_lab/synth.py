"""Deterministic synthetic LiDAR scenes with guaranteed class co-occurrence.

The sensor sits at the origin; the ground plane lies below it so that scene
points fall inside the default projection's inclination span. Vehicles are
long boxes resting on the ground; pedestrians are small clusters hovering
above it. Their height bands overlap slightly on purpose: a sliver of
genuinely ambiguous pixels keeps confidence thresholds meaningful. Every
frame contains at least one object of each class, which is exactly the
regime where single-class labeling is hard.

Generation is counter-based: frame ``index`` under ``seed`` always yields the
same scene, independent of generation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box7, Frame, bev_iou, points_in_box


class SceneGenerationError(RuntimeError):
    """Raised when object placement cannot satisfy the disjointness rule."""


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    vehicle_count: tuple[int, int] = (1, 3)
    pedestrian_count: tuple[int, int] = (2, 4)
    ground_points: int = 2000
    extent: float = 12.0
    ground_z: float = -1.4
    ground_noise: float = 0.02
    ground_radius: tuple[float, float] = (4.7, 11.5)
    vehicle_radius: tuple[float, float] = (7.4, 8.8)
    pedestrian_radius: tuple[float, float] = (6.8, 8.8)
    vehicle_length: tuple[float, float] = (3.5, 5.5)
    vehicle_width: tuple[float, float] = (1.7, 2.2)
    vehicle_height: tuple[float, float] = (0.85, 1.1)
    pedestrian_size: tuple[float, float] = (0.5, 0.9)
    pedestrian_height: tuple[float, float] = (0.75, 0.9)
    pedestrian_bottom: tuple[float, float] = (-0.45, -0.35)
    vehicle_points: tuple[int, int] = (40, 120)
    pedestrian_points: tuple[int, int] = (15, 40)
    placement_margin: float = 0.4
    placement_retries: int = 1000

    def __post_init__(self):
        if self.extent <= 0:
            raise ValueError("extent must be positive")
        for lo, hi in (self.vehicle_count, self.pedestrian_count):
            if lo < 1 or hi < lo:
                raise ValueError("object count ranges must be >= 1 for co-occurrence")


def _inflate(box: Box7, margin: float) -> Box7:
    return Box7(
        box.cx, box.cy, box.cz,
        box.length + margin, box.width + margin, box.height,
        box.heading, box.class_id,
    )


def _place_box(rng, cfg: SceneConfig, class_id: int, placed: list[Box7]) -> Box7:
    for _ in range(cfg.placement_retries):
        if class_id == 1:
            radius = rng.uniform(*cfg.vehicle_radius)
            length = rng.uniform(*cfg.vehicle_length)
            width = rng.uniform(*cfg.vehicle_width)
            height = rng.uniform(*cfg.vehicle_height)
            cz = cfg.ground_z + height / 2.0
        else:
            radius = rng.uniform(*cfg.pedestrian_radius)
            length = rng.uniform(*cfg.pedestrian_size)
            width = rng.uniform(*cfg.pedestrian_size)
            height = rng.uniform(*cfg.pedestrian_height)
            cz = rng.uniform(*cfg.pedestrian_bottom) + height / 2.0
        azim = rng.uniform(-math.pi, math.pi)
        box = Box7(
            cx=radius * math.cos(azim),
            cy=radius * math.sin(azim),
            cz=cz,
            length=length,
            width=width,
            height=height,
            heading=rng.uniform(-math.pi, math.pi),
            class_id=class_id,
        )
        grown = _inflate(box, cfg.placement_margin)
        if all(bev_iou(grown, _inflate(other, cfg.placement_margin)) == 0.0 for other in placed):
            return box
    raise SceneGenerationError(
        f"could not place a class-{class_id} box after {cfg.placement_retries} retries"
    )


def _sample_in_box(rng, box: Box7, n: int) -> np.ndarray:
    """Sample n points inside the box, biased toward the center so the
    center voxel is almost surely occupied."""
    dims = np.array([box.length, box.width, box.height])
    n_center = n // 2
    local = np.empty((n, 3))
    local[:n_center] = np.clip(
        rng.normal(0.0, dims / 5.0, (n_center, 3)), -0.49 * dims, 0.49 * dims
    )
    local[n_center:] = rng.uniform(-0.5, 0.5, (n - n_center, 3)) * dims
    c, s = math.cos(box.heading), math.sin(box.heading)
    out = np.empty((n, 3))
    out[:, 0] = box.cx + local[:, 0] * c - local[:, 1] * s
    out[:, 1] = box.cy + local[:, 0] * s + local[:, 1] * c
    out[:, 2] = box.cz + local[:, 2]
    return out


_CLASS_INTENSITY = {0: 0.25, 1: 0.75, 2: 0.5}


def generate_scene(cfg: SceneConfig, index: int) -> Frame:
    """One fully labeled frame, deterministic in (cfg.seed, index)."""
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, index)))
    boxes: list[Box7] = []
    n_vehicles = int(rng.integers(cfg.vehicle_count[0], cfg.vehicle_count[1] + 1))
    n_peds = int(rng.integers(cfg.pedestrian_count[0], cfg.pedestrian_count[1] + 1))
    for _ in range(n_vehicles):
        boxes.append(_place_box(rng, cfg, 1, boxes))
    for _ in range(n_peds):
        boxes.append(_place_box(rng, cfg, 2, boxes))

    chunks = []
    radius = rng.uniform(*cfg.ground_radius, cfg.ground_points)
    azim = rng.uniform(-math.pi, math.pi, cfg.ground_points)
    ground = np.column_stack(
        [
            radius * np.cos(azim),
            radius * np.sin(azim),
            cfg.ground_z + rng.normal(0.0, cfg.ground_noise, cfg.ground_points),
            np.clip(rng.normal(_CLASS_INTENSITY[0], 0.1, cfg.ground_points), 0, 1),
        ]
    )
    # no returns from under the objects: drop ground points in any footprint
    shadow = np.zeros(len(ground), dtype=bool)
    for box in boxes:
        tall = Box7(box.cx, box.cy, 0.0, box.length, box.width, 100.0, box.heading, box.class_id)
        shadow |= points_in_box(ground, tall)
    chunks.append(ground[~shadow])

    for box in boxes:
        lo, hi = cfg.vehicle_points if box.class_id == 1 else cfg.pedestrian_points
        n = int(rng.integers(lo, hi + 1))
        xyz = _sample_in_box(rng, box, n)
        intensity = np.clip(rng.normal(_CLASS_INTENSITY[box.class_id], 0.1, n), 0, 1)
        chunks.append(np.column_stack([xyz, intensity]))

    return Frame(
        frame_id=index,
        points=np.vstack(chunks),
        boxes=tuple(boxes),
        labeled_classes=frozenset({1, 2}),
    )


def generate_dataset(cfg: SceneConfig, count: int) -> list[Frame]:
    """Frames 0..count-1, each independently reproducible."""
    if count < 1:
        raise ValueError("need at least one frame")
    return [generate_scene(cfg, i) for i in range(count)]
