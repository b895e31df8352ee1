"""Training objectives with analytic gradients.

All losses return the scalar objective together with its gradient with
respect to the predictions they consume. Sign convention: each formula below
is the negated sum of the underlying log-likelihood terms, so values are
non-negative and we minimize. Probabilities are clamped to
[1e-7, 1 - 1e-7] before any log.

The three supervision schemes treat pixels/voxels with unreliable labels
differently:

* aggressive: train on every entry as if its stored label were correct;
* conservative: contribute no loss (and exactly zero gradient) on them;
* informed: merge background with all unlabeled classes into one
  meta-background class (pixels), or supervise only voxels inside trusted
  boxes of any class (heatmaps, applied via the supervised masks).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .rangeimage import SegTarget
from .voxel import SCHEMES, ClassHeatmap, ShapeTarget

_CLAMP = 1e-7
_NORM_TOL = 1e-4  # loose enough for finite-difference probing of the formulas


@dataclass(frozen=True)
class LossConfig:
    """All loss hyperparameters.

    ``scheme`` applies to both the segmentation and the heatmap loss;
    ``seg_scheme`` / ``hm_scheme`` override it individually for
    mixed-scheme experiments.
    """

    gamma: float = 2.0
    alpha: float = 2.0
    beta: float = 4.0
    eps: float = 1e-3
    tau_pixel: float = 0.9
    tau_bbox: float = 0.7
    scheme: str = "informed"
    seg_scheme: str | None = None
    hm_scheme: str | None = None
    num_bins: int = 12
    smooth_l1_delta: float = 1.0
    weights: tuple[float, float, float, float] = (1.0, 1.0, 0.5, 0.5)

    def __post_init__(self):
        if min(self.gamma, self.alpha, self.beta) < 0:
            raise ValueError("focusing parameters must be non-negative")
        if not 0.0 < self.eps < 1.0:
            raise ValueError("eps must be in (0, 1)")
        for tau in (self.tau_pixel, self.tau_bbox):
            if not 0.0 <= tau <= 1.0:
                raise ValueError("thresholds must be in [0, 1]")
        for s in (self.scheme, self.seg_scheme, self.hm_scheme):
            if s is not None and s not in SCHEMES:
                raise ValueError(f"unknown scheme {s!r}")
        if self.num_bins < 2:
            raise ValueError("need at least two heading bins")

    @property
    def effective_seg_scheme(self) -> str:
        return self.seg_scheme or self.scheme

    @property
    def effective_hm_scheme(self) -> str:
        return self.hm_scheme or self.scheme


@dataclass(frozen=True)
class LossResult:
    """Scalar objective plus gradient shaped like the consumed predictions."""

    value: float
    gradient: object


def _clamped_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.clip(p, _CLAMP, 1.0 - _CLAMP))


def _focal_terms(p: np.ndarray, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """-(1-p)^g * log p and its derivative with respect to p."""
    pc = np.clip(p, _CLAMP, 1.0 - _CLAMP)
    logp = np.log(pc)
    one_m = 1.0 - pc
    value = -(one_m**gamma) * logp
    grad = gamma * (one_m ** (gamma - 1.0)) * logp - (one_m**gamma) / pc
    return value, grad


def seg_loss(probs: np.ndarray, target: SegTarget, cfg: LossConfig) -> LossResult:
    """Focal segmentation loss over valid pixels under the configured scheme.

    Pixels flagged untrusted are the masked set: aggressive uses their stored
    classes anyway, conservative skips them, informed scores the summed
    probability of {background, unlabeled classes} as one meta class.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != target.classes.shape + (target.num_classes + 1,):
        raise ValueError("probability field has the wrong shape")
    sums = probs[target.valid].sum(axis=-1)
    if sums.size and np.max(np.abs(sums - 1.0)) > _NORM_TOL:
        raise ValueError("per-pixel distributions must sum to 1")

    scheme = cfg.effective_seg_scheme
    grad = np.zeros_like(probs)
    # per-pixel terms go into one image summed in a single pass, so schemes
    # that agree pixel-wise agree bitwise on the total
    values = np.zeros(target.classes.shape)
    masked = target.untrusted & target.valid
    if scheme == "aggressive":
        plain = target.valid
    else:
        plain = target.valid & ~masked

    if np.any(plain):
        rows = np.flatnonzero(plain.ravel())
        cls = target.classes.ravel()[rows]
        p_true = probs.reshape(-1, probs.shape[-1])[rows, cls]
        v, g = _focal_terms(p_true, cfg.gamma)
        values[plain] = v
        flat = grad.reshape(-1, probs.shape[-1])
        flat[rows, cls] = g

    if scheme == "informed" and np.any(masked):
        merged = sorted({0} | target.unlabeled_classes)
        q = probs[..., merged].sum(axis=-1)[masked]
        v, g = _focal_terms(q, cfg.gamma)
        values[masked] = v
        rows = np.flatnonzero(masked.ravel())
        flat = grad.reshape(-1, probs.shape[-1])
        for c in merged:
            flat[rows, c] = g
    return LossResult(value=float(values.sum()), gradient=grad)


def heatmap_loss(
    preds: Mapping[int, np.ndarray], target: Mapping[int, ClassHeatmap], cfg: LossConfig
) -> LossResult:
    """Penalty-reduced focal loss over supervised voxels, summed over classes.

    Positive voxels (target above 1 - eps) use -(1-h)^alpha log h; the other
    supervised voxels use -(1-y)^beta h^alpha log(1-h). Voxels outside the
    supervised mask contribute nothing, with exactly zero gradient.
    """
    value = 0.0
    grads: dict[int, np.ndarray] = {}
    for k, hm in target.items():
        h = np.asarray(preds[k], dtype=np.float64)
        if h.shape != hm.values.shape:
            raise ValueError(f"prediction shape mismatch for class {k}")
        sup = hm.supervised
        if np.any((h[sup] <= 0.0) | (h[sup] >= 1.0)):
            raise ValueError("heatmap predictions must lie strictly inside (0, 1)")
        grad = np.zeros_like(h)
        pos = hm.positive & sup
        neg = sup & ~hm.positive
        if np.any(pos):
            v, g = _focal_terms(h[pos], cfg.alpha)
            value += float(v.sum())
            grad[pos] = g
        if np.any(neg):
            hn = np.clip(h[neg], _CLAMP, 1.0 - _CLAMP)
            y = hm.values[neg]
            w = (1.0 - y) ** cfg.beta
            log1m = np.log(1.0 - hn)
            value += float((-w * hn**cfg.alpha * log1m).sum())
            grad[neg] = -w * (
                cfg.alpha * hn ** (cfg.alpha - 1.0) * log1m - hn**cfg.alpha / (1.0 - hn)
            )
        grads[k] = grad
    return LossResult(value=value, gradient=grads)


def _smooth_l1(x: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    ax = np.abs(x)
    quad = ax <= delta
    value = np.where(quad, 0.5 * x**2 / delta, ax - 0.5 * delta)
    grad = np.where(quad, x / delta, np.sign(x))
    return value, grad


def heading_bin_loss(
    bin_probs: np.ndarray, residuals: np.ndarray, target: ShapeTarget, cfg: LossConfig
) -> LossResult:
    """Cross-entropy over heading bins plus smooth-L1 on the true-bin
    residual, summed over positive voxels. Both terms weigh equally."""
    bin_probs = np.asarray(bin_probs, dtype=np.float64)
    residuals = np.asarray(residuals, dtype=np.float64)
    p = len(target.heading_bin)
    if bin_probs.shape != (p, target.num_bins) or residuals.shape != (p,):
        raise ValueError("heading prediction shapes do not match the target")
    grad_bins = np.zeros_like(bin_probs)
    if p == 0:
        return LossResult(0.0, (grad_bins, np.zeros_like(residuals)))
    if np.max(np.abs(bin_probs.sum(axis=-1) - 1.0)) > _NORM_TOL:
        raise ValueError("bin scores must be normalized per voxel")
    rows = np.arange(p)
    pt = np.clip(bin_probs[rows, target.heading_bin], _CLAMP, 1.0 - _CLAMP)
    ce = float(-np.log(pt).sum())
    grad_bins[rows, target.heading_bin] = -1.0 / pt
    res_val, res_grad = _smooth_l1(residuals - target.heading_residual, cfg.smooth_l1_delta)
    return LossResult(ce + float(res_val.sum()), (grad_bins, res_grad))


def shape_l1_loss(preds: np.ndarray, target: ShapeTarget, cfg: LossConfig) -> LossResult:
    """Smooth-L1 over (dx, dy, dz, log l, log w, log h) at positive voxels.

    With no positive voxels the loss is 0 with an empty gradient, which is
    what masks out classes that have no boxes in the frame.
    """
    preds = np.asarray(preds, dtype=np.float64)
    ref = np.concatenate([target.offsets, target.log_sizes], axis=1)
    if preds.shape != ref.shape:
        raise ValueError("shape prediction does not match the target layout")
    if len(ref) == 0:
        return LossResult(0.0, np.zeros_like(preds))
    value, grad = _smooth_l1(preds - ref, cfg.smooth_l1_delta)
    return LossResult(float(value.sum()), grad)


@dataclass(frozen=True)
class FrameOutputs:
    """Model predictions for one frame, the inputs total_loss consumes."""

    seg: np.ndarray  # (H, W, K+1)
    heatmap: Mapping[int, np.ndarray]
    bins: Mapping[int, np.ndarray]  # per class (P, B)
    residuals: Mapping[int, np.ndarray]  # per class (P,)
    shapes: Mapping[int, np.ndarray]  # per class (P, 6)


@dataclass(frozen=True)
class FrameTargets:
    seg: SegTarget
    heatmap: Mapping[int, ClassHeatmap]
    shape: Mapping[int, ShapeTarget]


@dataclass(frozen=True)
class FrameGradients:
    seg: np.ndarray
    heatmap: dict[int, np.ndarray]
    bins: dict[int, np.ndarray]
    residuals: dict[int, np.ndarray]
    shapes: dict[int, np.ndarray]


def total_loss(
    outputs: FrameOutputs,
    targets: FrameTargets,
    cfg: LossConfig,
    weights: tuple[float, float, float, float] | None = None,
) -> LossResult:
    """Weighted sum of the four losses with gradients composed accordingly."""
    w_seg, w_hm, w_bin, w_shape = weights if weights is not None else cfg.weights
    if min(w_seg, w_hm, w_bin, w_shape) < 0:
        raise ValueError("loss weights must be non-negative")

    seg = seg_loss(outputs.seg, targets.seg, cfg)
    hm = heatmap_loss(outputs.heatmap, targets.heatmap, cfg)
    value = w_seg * seg.value + w_hm * hm.value
    grads = FrameGradients(
        seg=w_seg * seg.gradient,
        heatmap={k: w_hm * g for k, g in hm.gradient.items()},
        bins={},
        residuals={},
        shapes={},
    )
    for k, st in targets.shape.items():
        bin_res = heading_bin_loss(outputs.bins[k], outputs.residuals[k], st, cfg)
        shape_res = shape_l1_loss(outputs.shapes[k], st, cfg)
        value += w_bin * bin_res.value + w_shape * shape_res.value
        gb, gr = bin_res.gradient
        grads.bins[k] = w_bin * gb
        grads.residuals[k] = w_bin * gr
        grads.shapes[k] = w_shape * shape_res.gradient
    return LossResult(value=value, gradient=grads)
