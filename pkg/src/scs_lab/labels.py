"""Single-class dataset construction and pseudo-label merging.

Ground truth is sacrosanct: merging never touches labeled pixels or
labeled-class boxes. Pseudo classes are always drawn from {background} plus
the frame's unlabeled classes, and low-confidence assignments stay flagged as
untrusted so the loss schemes can treat them accordingly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .geometry import Box7, DetBox, Frame, nms
from .rangeimage import SegTarget

GROUND_TRUTH = "ground-truth"
PSEUDO = "pseudo"


@dataclass(frozen=True)
class PseudoBox:
    box: Box7
    score: float
    provenance: str  # GROUND_TRUTH or PSEUDO

    def __post_init__(self):
        if self.provenance not in (GROUND_TRUTH, PSEUDO):
            raise ValueError(f"unknown provenance {self.provenance!r}")


@dataclass(frozen=True)
class PseudoLabels:
    """Trusted per-class box sets: ground truth where labeled, confident
    detections elsewhere."""

    boxes: Mapping[int, tuple[PseudoBox, ...]]
    labeled_classes: frozenset[int]

    def boxes_of(self, class_id: int) -> list[Box7]:
        return [pb.box for pb in self.boxes.get(class_id, ())]

    def all_by_class(self) -> dict[int, list[Box7]]:
        return {k: [pb.box for pb in v] for k, v in self.boxes.items()}


def mask_to_single_class(frame: Frame, class_id: int) -> Frame:
    """Keep only class ``class_id`` labels; points are untouched.

    A frame that labels a class but contains none of its objects is still
    labeled for that class (labeled-and-absent is not unlabeled).
    """
    return replace(
        frame,
        boxes=tuple(b for b in frame.boxes if b.class_id == class_id),
        labeled_classes=frozenset({class_id}),
    )


def split_dataset(
    frames: Sequence[Frame], vehicle_fraction: float, seed: int
) -> tuple[list[Frame], list[Frame]]:
    """Split fully labeled frames into a vehicle-labeled and a
    pedestrian-labeled subset.

    Deterministic shuffle by seed; the first floor(x * M) frames keep vehicle
    labels, the rest pedestrian labels.
    """
    if not 0.0 < vehicle_fraction < 1.0:
        raise ValueError("vehicle_fraction must be strictly between 0 and 1")
    order = np.random.default_rng(seed).permutation(len(frames))
    n_vehicle = int(np.floor(vehicle_fraction * len(frames)))
    if n_vehicle == 0 or n_vehicle == len(frames):
        raise ValueError("split would leave one subset empty")
    vehicle = [mask_to_single_class(frames[i], 1) for i in order[:n_vehicle]]
    pedestrian = [mask_to_single_class(frames[i], 2) for i in order[n_vehicle:]]
    return vehicle, pedestrian


def merge_pixel_pseudo(
    target: SegTarget,
    labeler_probs: np.ndarray,
    labeled_classes: frozenset[int],
    tau_pixel: float,
) -> SegTarget:
    """Fill missing pixels from a labeler's per-pixel distributions.

    Missing pixels take the argmax restricted to {background} plus the
    unlabeled classes; ties go to background. Pixels whose restricted maximum
    stays below ``tau_pixel`` keep their untrusted flag. Labeled pixels are
    never altered.
    """
    probs = np.asarray(labeler_probs, dtype=np.float64)
    if probs.shape != target.classes.shape + (target.num_classes + 1,):
        raise ValueError("labeler probability field has the wrong shape")
    sums = probs[target.valid].sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        raise ValueError("labeler distributions must sum to 1")

    allowed = sorted({0} | (frozenset(range(1, target.num_classes + 1)) - labeled_classes))
    restricted = probs[..., allowed]
    # ties break toward the lowest allowed index, i.e. background
    arg = np.argmax(restricted, axis=-1)
    best = np.take_along_axis(restricted, arg[..., None], axis=-1)[..., 0]
    pseudo_class = np.asarray(allowed, dtype=np.int64)[arg]

    classes = target.classes.copy()
    classes[target.missing] = pseudo_class[target.missing]
    untrusted = target.missing & (best < tau_pixel)
    return replace(target, classes=classes, untrusted=untrusted)


def merge_box_pseudo(frame: Frame, dets: Sequence[DetBox], tau_bbox: float) -> PseudoLabels:
    """Trusted boxes per class: ground truth for labeled classes, detections
    with score >= ``tau_bbox`` for unlabeled ones."""
    num_classes = max([b.class_id for b in frame.boxes]
                      + [d.box.class_id for d in dets]
                      + list(frame.labeled_classes))
    boxes: dict[int, tuple[PseudoBox, ...]] = {}
    for k in range(1, num_classes + 1):
        if k in frame.labeled_classes:
            boxes[k] = tuple(
                PseudoBox(b, 1.0, GROUND_TRUTH) for b in frame.boxes if b.class_id == k
            )
        else:
            boxes[k] = tuple(
                PseudoBox(d.box, d.score, PSEUDO)
                for d in dets
                if d.box.class_id == k and d.score >= tau_bbox
            )
    return PseudoLabels(boxes=boxes, labeled_classes=frame.labeled_classes)


def ensemble_pixel(teacher_probs: np.ndarray, self_probs: np.ndarray) -> np.ndarray:
    """Equal-weight mean of two per-pixel distributions."""
    a = np.asarray(teacher_probs, dtype=np.float64)
    b = np.asarray(self_probs, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("probability fields must have matching shapes")
    for name, p in (("teacher", a), ("self", b)):
        if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
            raise ValueError(f"{name} distributions must sum to 1")
    return 0.5 * (a + b)


def ensemble_boxes(
    teacher_dets: Sequence[DetBox], self_dets: Sequence[DetBox], iou_thresh: float
) -> list[DetBox]:
    """Pool detections from both sources and de-duplicate with NMS."""
    return nms(list(teacher_dets) + list(self_dets), iou_thresh)
