"""7-DOF boxes, point containment, rotated BEV IoU, NMS and frame transforms.

Boxes are upright cuboids: center (cx, cy, cz), extents (length, width,
height) and a heading angle about the z axis. All angle math keeps headings
wrapped into [-pi, pi). Everything here is pure and safe to share across
threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta):
    """Wrap an angle (scalar or array) into [-pi, pi)."""
    return ((np.asarray(theta) + math.pi) % TWO_PI) - math.pi


@dataclass(frozen=True)
class Point3:
    """A single LiDAR return."""

    x: float
    y: float
    z: float
    intensity: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.intensity], dtype=np.float64)


@dataclass(frozen=True)
class Box7:
    """Upright 7-DOF bounding box with a class id in {1..K}."""

    cx: float
    cy: float
    cz: float
    length: float
    width: float
    height: float
    heading: float
    class_id: int

    def __post_init__(self):
        for name in ("cx", "cy", "cz", "length", "width", "height", "heading"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"box field {name} is not finite")
        if self.length <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("box extents must be positive")
        if self.class_id < 1:
            raise ValueError("class_id must be >= 1")
        object.__setattr__(self, "heading", float(wrap_angle(self.heading)))

    def corners_bev(self) -> np.ndarray:
        """Ground-plane corners, counter-clockwise, shape (4, 2)."""
        c, s = math.cos(self.heading), math.sin(self.heading)
        u = np.array([c, s]) * (self.length / 2.0)
        v = np.array([-s, c]) * (self.width / 2.0)
        center = np.array([self.cx, self.cy])
        return np.stack([center + u + v, center - u + v, center - u - v, center + u - v])


@dataclass(frozen=True)
class DetBox:
    """A detected box with a confidence score."""

    box: Box7
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class Frame:
    """One LiDAR scene: points, ground-truth boxes and the labeled-class set.

    ``labeled_classes`` records which classes actually carry labels in this
    frame; boxes of other classes are absent by definition, not empty.
    """

    frame_id: int
    points: np.ndarray  # (N, 4): x, y, z, intensity
    boxes: tuple[Box7, ...]
    labeled_classes: frozenset[int]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError("points must have shape (N, 4)")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "labeled_classes", frozenset(self.labeled_classes))
        if not self.labeled_classes:
            raise ValueError("labeled_classes must be non-empty")
        for b in self.boxes:
            if b.class_id not in self.labeled_classes:
                raise ValueError(f"box class {b.class_id} not in labeled_classes")


def point_in_box(p: Point3, box: Box7) -> bool:
    """True iff the point lies inside the box, boundary inclusive."""
    c, s = math.cos(box.heading), math.sin(box.heading)
    dx, dy = p.x - box.cx, p.y - box.cy
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (
        abs(u) <= box.length / 2.0
        and abs(v) <= box.width / 2.0
        and abs(p.z - box.cz) <= box.height / 2.0
    )


def points_in_box(points: np.ndarray, box: Box7) -> np.ndarray:
    """Vectorized containment test for an (N, >=3) point array."""
    pts = np.asarray(points, dtype=np.float64)
    c, s = math.cos(box.heading), math.sin(box.heading)
    dx = pts[:, 0] - box.cx
    dy = pts[:, 1] - box.cy
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (
        (np.abs(u) <= box.length / 2.0)
        & (np.abs(v) <= box.width / 2.0)
        & (np.abs(pts[:, 2] - box.cz) <= box.height / 2.0)
    )


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex polygon against a convex polygon."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        a = clip[i]
        b = clip[(i + 1) % n]
        edge = b - a
        if not output:
            break
        inputs = output
        output = []
        prev = inputs[-1]
        prev_side = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0])
        for cur in inputs:
            cur_side = edge[0] * (cur[1] - a[1]) - edge[1] * (cur[0] - a[0])
            if cur_side >= 0.0:
                if prev_side < 0.0:
                    t = prev_side / (prev_side - cur_side)
                    output.append(prev + t * (cur - prev))
                output.append(cur)
            elif prev_side >= 0.0:
                t = prev_side / (prev_side - cur_side)
                output.append(prev + t * (cur - prev))
            prev, prev_side = cur, cur_side
    return np.asarray(output) if output else np.zeros((0, 2))


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _box_sort_key(b: Box7):
    return (b.cx, b.cy, b.length, b.width, b.heading, b.class_id)


def bev_iou(a: Box7, b: Box7) -> float:
    """Intersection-over-union of the two heading-rotated BEV rectangles.

    Computed by convex polygon clipping; exactly symmetric in its arguments.
    Degenerate intersections count as zero overlap.
    """
    if _box_sort_key(b) < _box_sort_key(a):
        a, b = b, a
    # cheap reject: centers farther apart than the summed circumradii
    diag = 0.5 * (math.hypot(a.length, a.width) + math.hypot(b.length, b.width))
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > diag:
        return 0.0
    ca, cb = a.corners_bev(), b.corners_bev()
    inter = _polygon_area(_clip_polygon(ca, cb))
    if inter <= 0.0:
        return 0.0
    union = a.length * a.width + b.length * b.width - inter
    if union <= 0.0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def nms(dets: Sequence[DetBox], iou_thresh: float) -> list[DetBox]:
    """Greedy score-descending suppression on BEV IoU.

    Survivors all have pairwise IoU < ``iou_thresh``. Output is sorted by
    descending score with ties broken by input order.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[DetBox] = []
    for i in order:
        cand = dets[i]
        if all(bev_iou(cand.box, k.box) < iou_thresh for k in kept):
            kept.append(cand)
    return kept


def transform_box(box: Box7, rot: float, flip_y: bool) -> Box7:
    """Rotate a box about z, then optionally mirror it across the x axis."""
    c, s = math.cos(rot), math.sin(rot)
    cx = box.cx * c - box.cy * s
    cy = box.cx * s + box.cy * c
    heading = box.heading + rot
    if flip_y:
        cy = -cy
        heading = -heading
    return replace(box, cx=cx, cy=cy, heading=float(wrap_angle(heading)))


def transform_points(points: np.ndarray, rot: float, flip_y: bool) -> np.ndarray:
    pts = np.array(points, dtype=np.float64, copy=True)
    c, s = math.cos(rot), math.sin(rot)
    x = pts[:, 0] * c - pts[:, 1] * s
    y = pts[:, 0] * s + pts[:, 1] * c
    if flip_y:
        y = -y
    pts[:, 0] = x
    pts[:, 1] = y
    return pts


def transform_frame(frame: Frame, rot: float, flip_y: bool) -> Frame:
    """Rigid scene augmentation: rotation about z, then optional y mirror.

    Containment is preserved: a point lies in a box iff the transformed point
    lies in the transformed box. The labeled-class set is untouched.
    """
    return replace(
        frame,
        points=transform_points(frame.points, rot, flip_y),
        boxes=tuple(transform_box(b, rot, flip_y) for b in frame.boxes),
    )
