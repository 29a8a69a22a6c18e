"""From probability maps to final masks: prior-adaptive binarization,
component diameter filtering, lung convex-hull masking, and model ensembling.

The binarization threshold at each voxel is ``t * (1 - 0.5 * p)`` where p is
the lymph-node occurrence prior, so likely regions binarize more eagerly.
Component size is judged by the minimum diameter of a moment-matched
ellipsoid, ``2 * sqrt(5 * lambda_min)`` of the voxel-position covariance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import label
from scipy.spatial import ConvexHull, QhullError

from .errors import EmptyMaskError, GeometryError
from .losses import ProbVolume
from .morphology import connectivity_structure
from .volume import (
    CropRecord,
    LabelVolume,
    ScalarVolume,
    geometry_aligned,
    pad_to_original,
    require_aligned,
)


@dataclass(frozen=True)
class PostprocessConfig:
    t: float = 0.5
    min_diameter_mm: float | None = None
    connectivity: int = 26

    def __post_init__(self):
        if not 0 < self.t < 1:
            raise ValueError("threshold t must lie in (0, 1)")
        if self.min_diameter_mm is not None and self.min_diameter_mm <= 0:
            raise ValueError("min_diameter_mm must be positive when present")
        if self.connectivity not in (6, 18, 26):
            raise ValueError("connectivity must be 6, 18 or 26")


@dataclass(frozen=True, eq=False)
class ComponentStats:
    label: int
    voxel_count: int
    centroid_mm: np.ndarray
    covariance_mm2: np.ndarray
    min_diameter_mm: float


@dataclass(frozen=True, eq=False)
class ComponentSet:
    labels: LabelVolume
    stats: list

    def __len__(self):
        return len(self.stats)


def adaptive_binarize(probs: ProbVolume, pa: ScalarVolume, cfg: PostprocessConfig) -> LabelVolume:
    """Set a voxel iff prob >= t * (1 - 0.5 * prior); ties go to foreground."""
    if not geometry_aligned(probs.geometry, pa.geometry):
        raise GeometryError("probability map and prior are not aligned")
    p = pa.data
    if p.min() < 0 or p.max() > 1:
        raise ValueError("prior values must lie in [0, 1]")
    thresholds = cfg.t * (1.0 - 0.5 * p)
    return LabelVolume(probs.geometry, (probs.probs >= thresholds).astype(np.uint8))


def connected_components(mask: LabelVolume, connectivity: int = 26) -> ComponentSet:
    """Label foreground components and compute physical moment statistics.

    Component ids are dense 1..n ordered by first-voxel linear index (C order).
    Covariances are population moments of voxel-center coordinates in mm.
    """
    structure = connectivity_structure(connectivity)
    lab, n = label(mask.data > 0, structure=structure)
    if n == 0:
        return ComponentSet(LabelVolume(mask.geometry, lab.astype(np.int32)), [])

    # enforce deterministic ids ordered by first occurrence in the flat scan
    flat = lab.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    order = np.argsort(first[keep])
    remap = np.zeros(int(ids.max()) + 1, dtype=np.int32)
    remap[ids[keep][order]] = np.arange(1, n + 1, dtype=np.int32)
    lab = remap[lab]
    flat = lab.ravel()

    pts = mask.geometry.grid_physical().reshape(-1, 3)
    counts = np.bincount(flat, minlength=n + 1)[1:]
    sums = np.stack(
        [np.bincount(flat, weights=pts[:, a], minlength=n + 1)[1:] for a in range(3)], axis=1
    )
    centroids = sums / counts[:, None]
    prods = {}
    for a in range(3):
        for b in range(a, 3):
            prods[(a, b)] = np.bincount(
                flat, weights=pts[:, a] * pts[:, b], minlength=n + 1
            )[1:]

    stats = []
    for ci in range(n):
        cov = np.empty((3, 3))
        for a in range(3):
            for b in range(a, 3):
                cov[a, b] = cov[b, a] = prods[(a, b)][ci] / counts[ci] - centroids[ci, a] * centroids[ci, b]
        lam_min = float(np.linalg.eigvalsh(cov)[0])
        diameter = 2.0 * np.sqrt(5.0 * max(lam_min, 0.0))
        stats.append(
            ComponentStats(ci + 1, int(counts[ci]), centroids[ci], cov, float(diameter))
        )
    return ComponentSet(LabelVolume(mask.geometry, lab.astype(np.int32)), stats)


def filter_small_components(cs: ComponentSet, min_diameter_mm: float | None) -> LabelVolume:
    """Keep components whose minimum ellipsoid diameter reaches the threshold."""
    if min_diameter_mm is None:
        return cs.labels.binarized()
    keep = np.zeros(len(cs.stats) + 1, dtype=bool)
    for s in cs.stats:
        keep[s.label] = s.min_diameter_mm >= min_diameter_mm
    return LabelVolume(cs.labels.geometry, keep[cs.labels.data].astype(np.uint8))


def lung_hull_mask(pred: LabelVolume, lungs: LabelVolume) -> LabelVolume:
    """Zero predictions outside the convex hull of the lung voxel centers."""
    require_aligned(pred, lungs, what="prediction and lung mask")
    lung_idx = np.argwhere(lungs.data > 0)
    if lung_idx.size == 0:
        raise EmptyMaskError("lung mask is empty; convex hull undefined")
    pred_fg = pred.data > 0
    if not pred_fg.any():
        return pred.binarized()
    lung_pts = pred.geometry.index_to_physical(lung_idx)
    cand_idx = np.argwhere(pred_fg)
    cand_pts = pred.geometry.index_to_physical(cand_idx)
    inside = _inside_hull(lung_pts, cand_pts)
    out = np.zeros(pred.dims, dtype=np.uint8)
    kept = cand_idx[inside]
    out[kept[:, 0], kept[:, 1], kept[:, 2]] = 1
    return LabelVolume(pred.geometry, out)


def _inside_hull(hull_pts, query_pts, tol=1e-6):
    try:
        hull = ConvexHull(hull_pts)
    except QhullError:
        try:
            hull = ConvexHull(hull_pts, qhull_options="QJ")
        except QhullError:
            # fewer than 4 usable points: fall back to the bounding box
            lo, hi = hull_pts.min(axis=0), hull_pts.max(axis=0)
            return np.all((query_pts >= lo - tol) & (query_pts <= hi + tol), axis=1)
    eq = hull.equations
    return np.all(query_pts @ eq[:, :3].T + eq[:, 3] <= tol, axis=1)


def ensemble(probs) -> ProbVolume:
    """Voxelwise arithmetic mean of probability maps."""
    maps = list(probs)
    if not maps:
        raise ValueError("ensemble needs at least one probability map")
    geom = maps[0].geometry
    for m in maps[1:]:
        if not geometry_aligned(geom, m.geometry):
            raise GeometryError("ensemble inputs are not aligned")
    mean = np.mean([m.probs for m in maps], axis=0)
    return ProbVolume(geom, mean)


def run_postprocess(probs, pa: ScalarVolume | None, lungs: LabelVolume | None,
                    crop: CropRecord | None, cfg: PostprocessConfig) -> LabelVolume:
    """Full chain: ensemble, adaptive binarization, component filtering,
    lung-hull masking, and padding back to the original grid.

    ``pa=None`` means a constant threshold, ``lungs=None`` skips hull masking,
    ``crop=None`` skips padding.
    """
    ens = ensemble(probs)
    if pa is None:
        pa = ScalarVolume(ens.geometry, np.zeros(ens.dims))
    mask = adaptive_binarize(ens, pa, cfg)
    cs = connected_components(mask, cfg.connectivity)
    mask = filter_small_components(cs, cfg.min_diameter_mm)
    if lungs is not None:
        mask = lung_hull_mask(mask, lungs)
    if crop is not None:
        mask = pad_to_original(mask, crop)
    return mask
