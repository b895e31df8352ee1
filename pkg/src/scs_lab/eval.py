"""Detection average precision and segmentation metrics.

AP uses all-point interpolation: the precision envelope over recall,
integrated exactly. Matching is the standard greedy rule: detections in
descending score order each claim the highest-IoU unmatched ground truth of
their class at or above the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .geometry import Box7, DetBox, bev_iou


@dataclass(frozen=True)
class PRCurve:
    """Recall/precision points ordered by descending score, plus the area
    under the precision envelope."""

    recall: np.ndarray
    precision: np.ndarray
    ap: float


def match_detections(
    dets: Sequence[DetBox], gts: Sequence[Box7], iou_thresh: float
) -> np.ndarray:
    """Per-detection TP flags, aligned with the input order.

    Greedy in descending score: each detection matches the highest-IoU
    unmatched ground truth of the same class with IoU >= ``iou_thresh``;
    every ground truth matches at most once.
    """
    flags = np.zeros(len(dets), dtype=bool)
    taken = [False] * len(gts)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    for i in order:
        det = dets[i]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if taken[j] or gt.class_id != det.box.class_id:
                continue
            iou = bev_iou(det.box, gt)
            if iou >= iou_thresh and iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0:
            taken[best_j] = True
            flags[i] = True
    return flags


def average_precision(flags: Sequence[bool], scores: Sequence[float], gt_count: int) -> PRCurve:
    """All-point interpolated AP from TP flags and scores.

    With no ground truth (or no detections) the AP is 0.
    """
    flags = np.asarray(flags, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    if gt_count < 0:
        raise ValueError("gt_count must be non-negative")
    if len(flags) == 0 or gt_count == 0:
        return PRCurve(np.zeros(0), np.zeros(0), 0.0)
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(flags[order])
    fp = np.cumsum(~flags[order])
    recall = tp / gt_count
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = np.concatenate([[0.0], recall[:-1]])
    ap = float(np.sum((recall - prev_r) * envelope))
    return PRCurve(recall, precision, ap)


def evaluate_class(
    dets: Sequence[DetBox], gts: Sequence[Box7], iou_thresh: float
) -> PRCurve:
    flags = match_detections(dets, gts, iou_thresh)
    return average_precision(flags, [d.score for d in dets], len(gts))


@dataclass(frozen=True)
class ClassSegMetrics:
    precision: float
    recall: float
    iou: float
    support: int  # number of true pixels of this class


def seg_metrics(
    pred: np.ndarray, true: np.ndarray, valid: np.ndarray, num_classes: int = 2
) -> dict[int, ClassSegMetrics]:
    """Confusion-matrix precision/recall/IoU per class over valid pixels.

    Class 0 is background. Empty denominators yield 0.
    """
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape or pred.shape != np.asarray(valid).shape:
        raise ValueError("prediction, truth and validity shapes must agree")
    p = pred[valid]
    t = true[valid]
    out = {}
    for k in range(num_classes + 1):
        tp = int(np.count_nonzero((p == k) & (t == k)))
        fp = int(np.count_nonzero((p == k) & (t != k)))
        fn = int(np.count_nonzero((p != k) & (t == k)))
        out[k] = ClassSegMetrics(
            precision=tp / (tp + fp) if tp + fp else 0.0,
            recall=tp / (tp + fn) if tp + fn else 0.0,
            iou=tp / (tp + fp + fn) if tp + fp + fn else 0.0,
            support=tp + fn,
        )
    return out
