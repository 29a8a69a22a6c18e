"""Segmentation loss functionals with analytic gradients.

All losses operate on a foreground-probability volume against a binary
ground truth and return both the scalar value and the gradient with respect
to every predicted probability. The combined loss is

    L = w1 * CE + w2 * weightedSoftDice + w3 * Tversky(alpha, beta)

with an occurrence-prior weight map that down-weights the Dice term in
regions of high lymph-node probability outside the (dilated) ground truth:

    w = 1           where dilated gt is set
    w = 1 - p       elsewhere while p <= cap
    w = 1 - cap     elsewhere (p > cap)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_dilation

from .errors import DataError, GeometryError
from .morphology import ball_structure
from .volume import LabelVolume, ScalarVolume, VolumeGeometry, geometry_aligned, require_aligned, resample

_CLAMP_EPS = 1e-7
_SMOOTH_EPS = 1e-5


@dataclass(frozen=True, eq=False)
class ProbVolume:
    """Per-voxel foreground probability in [0, 1]."""

    geometry: VolumeGeometry
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.shape != self.geometry.dims:
            raise DataError(f"probability shape {p.shape} does not match dims {self.geometry.dims}")
        if not np.all(np.isfinite(p)):
            raise DataError("probabilities contain NaN/Inf")
        if p.min() < 0 or p.max() > 1:
            raise DataError("probabilities must lie in [0, 1]")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def dims(self):
        return self.geometry.dims


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 0.25
    lambda2: float = 0.25
    lambda3: float = 0.5
    alpha: float = 0.25
    beta: float = 0.75
    smooth_eps: float = _SMOOTH_EPS
    dilation_radius_vox: int = 2
    pa_cap: float = 0.25

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.smooth_eps <= 0:
            raise ValueError("smooth_eps must be positive")
        if self.dilation_radius_vox < 0:
            raise ValueError("dilation radius must be non-negative")
        if not 0 <= self.pa_cap <= 1:
            raise ValueError("pa_cap must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class WeightMap:
    """Per-voxel Dice-term weights."""

    geometry: VolumeGeometry
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != self.geometry.dims:
            raise DataError("weight shape does not match geometry")
        if not np.all(np.isfinite(w)) or w.min() < 0:
            raise DataError("weights must be finite and non-negative")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True, eq=False)
class LossResult:
    value: float
    gradient: np.ndarray


def _prep(pred: ProbVolume, gt: LabelVolume):
    if not geometry_aligned(pred.geometry, gt.geometry):
        raise GeometryError("prediction and ground truth are not aligned")
    return pred.probs, (gt.data > 0).astype(np.float64)


def cross_entropy(pred: ProbVolume, gt: LabelVolume) -> LossResult:
    """Mean binary cross-entropy; probabilities clamped to [1e-7, 1 - 1e-7]."""
    p_raw, g = _prep(pred, gt)
    p = np.clip(p_raw, _CLAMP_EPS, 1.0 - _CLAMP_EPS)
    n = p.size
    value = float(-np.mean(g * np.log(p) + (1.0 - g) * np.log(1.0 - p)))
    grad = -(g / p - (1.0 - g) / (1.0 - p)) / n
    # the clamp makes the loss locally constant outside its range
    grad[(p_raw < _CLAMP_EPS) | (p_raw > 1.0 - _CLAMP_EPS)] = 0.0
    return LossResult(value, grad)


def soft_dice_loss(pred: ProbVolume, gt: LabelVolume, weights: WeightMap | None = None,
                   eps: float = _SMOOTH_EPS) -> LossResult:
    """1 - (2 sum(w p g) + eps) / (sum(w (p + g)) + eps); w = 1 when absent."""
    p, g = _prep(pred, gt)
    w = weights.weights if weights is not None else np.float64(1.0)
    num = 2.0 * np.sum(w * p * g) + eps
    den = np.sum(w * (p + g)) + eps
    value = float(1.0 - num / den)
    grad = np.broadcast_to(w, p.shape) * (num - 2.0 * g * den) / (den * den)
    return LossResult(value, np.ascontiguousarray(grad))


def tversky_loss(pred: ProbVolume, gt: LabelVolume, alpha=0.25, beta=0.75,
                 eps: float = _SMOOTH_EPS) -> LossResult:
    """1 - (TP + eps) / (TP + alpha FP + beta FN + eps) with soft counts."""
    p, g = _prep(pred, gt)
    tp = np.sum(p * g)
    fp = np.sum(p * (1.0 - g))
    fn = np.sum((1.0 - p) * g)
    num = tp + eps
    den = tp + alpha * fp + beta * fn + eps
    value = float(1.0 - num / den)
    d_den = g + alpha * (1.0 - g) - beta * g
    grad = -(g * den - num * d_den) / (den * den)
    return LossResult(value, grad)


def pa_weight_map(gt: LabelVolume, pa: ScalarVolume, cfg: LossConfig | None = None) -> WeightMap:
    """Dice weights from the occurrence prior outside the dilated ground truth."""
    cfg = cfg or LossConfig()
    require_aligned(gt, pa, what="ground truth and prior")
    p = pa.data
    if p.min() < 0 or p.max() > 1:
        raise ValueError("occurrence prior values must lie in [0, 1]")
    dilated = binary_dilation(gt.data > 0, structure=ball_structure(cfg.dilation_radius_vox))
    w = np.where(dilated, 1.0, np.where(p <= cfg.pa_cap, 1.0 - p, 1.0 - cfg.pa_cap))
    return WeightMap(gt.geometry, w)


def combined_loss(pred: ProbVolume, gt: LabelVolume, pa: ScalarVolume | None = None,
                  cfg: LossConfig | None = None) -> LossResult:
    """Weighted sum of CE, prior-weighted soft Dice, and Tversky."""
    cfg = cfg or LossConfig()
    weights = pa_weight_map(gt, pa, cfg) if pa is not None else None
    ce = cross_entropy(pred, gt)
    dice = soft_dice_loss(pred, gt, weights, eps=cfg.smooth_eps)
    tve = tversky_loss(pred, gt, cfg.alpha, cfg.beta, eps=cfg.smooth_eps)
    value = cfg.lambda1 * ce.value + cfg.lambda2 * dice.value + cfg.lambda3 * tve.value
    grad = cfg.lambda1 * ce.gradient + cfg.lambda2 * dice.gradient + cfg.lambda3 * tve.gradient
    return LossResult(float(value), grad)


def supervision_pyramid(gt: LabelVolume, pa: ScalarVolume | None, levels: int):
    """Downsample gt (nearest) and prior (linear) for deep supervision levels.

    Level r halves the grid r times; coarse voxel centers sit at the mean
    position of the fine voxels they replace.
    """
    gts, pas = [gt], [pa]
    for _ in range(1, levels):
        fine = gts[-1].geometry
        dims = tuple(max(d // 2, 1) for d in fine.dims)
        offset = np.asarray(fine.direction) @ (0.5 * np.asarray(fine.spacing))
        coarse = VolumeGeometry(
            dims,
            tuple(s * 2 for s in fine.spacing),
            tuple(np.asarray(fine.origin) + offset),
            fine.direction,
        )
        gts.append(resample(gts[-1], coarse, mode="nearest"))
        pas.append(None if pas[-1] is None else resample(pas[-1], coarse, mode="linear"))
    return gts, pas


def deep_supervision_loss(preds, gts, pas=None, cfg: LossConfig | None = None) -> float:
    """Combined loss accumulated over resolutions with weights halving per level."""
    cfg = cfg or LossConfig()
    preds = list(preds)
    gts = list(gts)
    pas = list(pas) if pas is not None else [None] * len(preds)
    if not (len(preds) == len(gts) == len(pas)):
        raise ValueError("preds, gts and priors must have matching lengths")
    if not preds:
        raise ValueError("need at least one supervision level")
    raw = np.array([2.0 ** (-r) for r in range(len(preds))])
    omega = raw / raw.sum()
    total = 0.0
    for w, pred, gt, pa in zip(omega, preds, gts, pas):
        total += w * combined_loss(pred, gt, pa, cfg).value
    return float(total)
