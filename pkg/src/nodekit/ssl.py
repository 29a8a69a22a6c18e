"""Semi-supervised primitives: entropy maps, histogram-based reliability
thresholds, EMA teacher updates, and post-processing based pseudo-labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .losses import ProbVolume
from .postprocess import PostprocessConfig, run_postprocess
from .volume import LabelVolume, ScalarVolume, VolumeGeometry


@dataclass(frozen=True, eq=False)
class SoftmaxVolume:
    """Per-voxel class probabilities, channel-last, each voxel summing to 1."""

    geometry: VolumeGeometry
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 4 or p.shape[:3] != self.geometry.dims or p.shape[3] < 2:
            raise DataError(
                f"softmax shape {p.shape} must be dims + (C,) with C >= 2"
            )
        if not np.all(np.isfinite(p)) or p.min() < 0:
            raise DataError("softmax probabilities must be finite and non-negative")
        if np.max(np.abs(p.sum(axis=3) - 1.0)) > 1e-5:
            raise DataError("softmax probabilities must sum to 1 per voxel within 1e-5")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def num_classes(self):
        return self.probs.shape[3]


def entropy_map(sm: SoftmaxVolume) -> ScalarVolume:
    """Shannon entropy -sum p log p (natural log, 0 log 0 := 0), in [0, ln C]."""
    p = sm.probs
    terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return ScalarVolume(sm.geometry, -terms.sum(axis=3))


def reliability_mask(sm: SoftmaxVolume, quantile: float) -> LabelVolume:
    """Voxels whose entropy falls at or below the histogram quantile.

    The threshold is the upper edge of the first 256-bin histogram bin whose
    cumulative count reaches ``quantile``; ties (entropy == threshold) count
    as reliable, so a constant-entropy volume is fully reliable.
    """
    if not 0 < quantile <= 1:
        raise ValueError("quantile must lie in (0, 1]")
    e = entropy_map(sm).data
    lo, hi = float(e.min()), float(e.max())
    if hi - lo < 1e-15:
        return LabelVolume(sm.geometry, np.ones(sm.geometry.dims, dtype=np.uint8))
    counts, edges = np.histogram(e, bins=256, range=(lo, hi))
    cdf = np.cumsum(counts) / e.size
    k = int(np.searchsorted(cdf, quantile - 1e-12))
    k = min(k, 255)
    threshold = edges[k + 1]
    return LabelVolume(sm.geometry, (e <= threshold).astype(np.uint8))


def ema_update(teacher: np.ndarray, student: np.ndarray, momentum: float) -> np.ndarray:
    """m * teacher + (1 - m) * student, elementwise."""
    teacher = np.asarray(teacher, dtype=np.float64)
    student = np.asarray(student, dtype=np.float64)
    if teacher.shape != student.shape:
        raise ValueError(
            f"parameter vectors differ in shape: {teacher.shape} vs {student.shape}"
        )
    if not 0 <= momentum <= 1:
        raise ValueError("momentum must lie in [0, 1]")
    return momentum * teacher + (1.0 - momentum) * student


def pseudo_label(sm: SoftmaxVolume, pa: ScalarVolume | None,
                 lungs: LabelVolume | None, cfg: PostprocessConfig) -> LabelVolume:
    """Generate enlarged pseudo-labels by post-processing teacher softmax.

    With t <= 0.5, a zero-capable prior, and no diameter filter the result is
    a superset of plain argmax labeling.
    """
    if sm.num_classes != 2:
        raise ValueError("pseudo-labeling expects binary-class softmax volumes")
    fg = ProbVolume(sm.geometry, sm.probs[..., 1])
    return run_postprocess([fg], pa, lungs, None, cfg)
