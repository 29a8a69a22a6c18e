"""Probabilistic lymph-node atlas and carina-referenced distance prior.

The atlas is the voxelwise average of annotation masks registered onto a
common chest grid, Gaussian-smoothed and min-max rescaled to [0, 1]. The
distance prior encodes normalized Euclidean distance from the tracheal
bifurcation, acting as a rough anatomical coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, label

from .errors import (
    DataError,
    DegenerateIntensityError,
    EmptyMaskError,
    GeometryError,
    LandmarkError,
)
from .registration import ATLAS_TO_SUBJECT, AffineTransform, DisplacementField, warp
from .volume import LabelVolume, ScalarVolume, VolumeGeometry, geometry_aligned, require_aligned


@dataclass(frozen=True, eq=False)
class ProbAtlas:
    """Occurrence probability map in atlas space, rescaled to [0, 1]."""

    vol: ScalarVolume
    smoothing_sigma_vox: float
    subject_count: int

    def __post_init__(self):
        d = self.vol.data
        if d.min() < -1e-9 or d.max() > 1 + 1e-9:
            raise DataError("atlas samples must lie in [0, 1]")
        if abs(d.max() - 1.0) > 1e-6:
            raise DataError("atlas maximum must be 1 after rescaling")


@dataclass(frozen=True, eq=False)
class DistanceMapPrior:
    """Normalized distance from an anatomical reference point (atlas space)."""

    vol: ScalarVolume
    reference_point: tuple

    def __post_init__(self):
        d = self.vol.data
        if d.min() < -1e-9 or d.max() > 1 + 1e-9:
            raise DataError("distance prior samples must lie in [0, 1]")
        idx = np.rint(self.vol.geometry.physical_to_index(self.reference_point)).astype(int)
        if d[tuple(idx)] > 1e-9:
            raise DataError("distance prior must be 0 at the reference voxel")


def build_prob_atlas(warped_masks, sigma_vox=5.0) -> ProbAtlas:
    """Average binary masks on the atlas grid, smooth, and rescale to [0, 1].

    Order of operations is mean -> Gaussian (sigma in voxels) -> min-max
    rescale, so the output maximum is exactly 1 and the minimum exactly 0.
    """
    masks = list(warped_masks)
    if not masks:
        raise ValueError("need at least one mask to build an atlas")
    require_aligned(*masks, what="atlas-space masks")
    mean = np.zeros(masks[0].dims, dtype=np.float64)
    for m in masks:
        mean += m.data > 0
    mean /= len(masks)
    if not mean.any():
        raise DegenerateIntensityError("all masks are empty; atlas would be zero")
    smoothed = gaussian_filter(mean, sigma=sigma_vox, mode="constant", cval=0.0)
    lo, hi = float(smoothed.min()), float(smoothed.max())
    if hi - lo < 1e-12:
        raise DegenerateIntensityError("smoothed atlas is constant; cannot rescale")
    rescaled = (smoothed - lo) / (hi - lo)
    return ProbAtlas(ScalarVolume(masks[0].geometry, rescaled), float(sigma_vox), len(masks))


def find_carina(trachea: LabelVolume) -> np.ndarray:
    """Locate the tracheal bifurcation as a physical (mm) coordinate.

    Walking axial slices from superior to inferior, the carina is taken on
    the first slice where the in-slice mask splits into >= 2 connected
    components (2D, 8-connectivity); the returned point is the centroid of
    the whole in-slice mask there.
    """
    data = trachea.data > 0
    if not data.any():
        raise EmptyMaskError("trachea mask is empty")
    nz = trachea.dims[2]
    # physical z direction of increasing slice index decides what "superior" means
    superior_first = range(nz - 1, -1, -1) if trachea.direction[2, 2] >= 0 else range(nz)
    eight = np.ones((3, 3), dtype=int)
    for k in superior_first:
        axial = data[:, :, k]
        if not axial.any():
            continue
        _, n = label(axial, structure=eight)
        if n >= 2:
            ii, jj = np.nonzero(axial)
            centroid_idx = (float(ii.mean()), float(jj.mean()), float(k))
            return np.asarray(trachea.geometry.index_to_physical(centroid_idx))
    raise LandmarkError("trachea never splits into two components; no carina found")


def build_distance_prior(geometry: VolumeGeometry, ref, norm_region: LabelVolume) -> DistanceMapPrior:
    """Euclidean distance (mm) from ``ref``, normalized by the maximum distance
    inside ``norm_region`` and clamped to [0, 1].

    ``ref`` is snapped to the nearest voxel center so the prior is exactly 0
    at the reference voxel.
    """
    ref = np.asarray(ref, dtype=float)
    idx = geometry.physical_to_index(ref)
    if np.any(idx < -0.5) or np.any(idx > np.asarray(geometry.dims) - 0.5):
        raise ValueError(f"reference point {ref} lies outside the grid")
    if not geometry_aligned(geometry, norm_region.geometry):
        raise GeometryError("normalization region must live on the atlas grid")
    snapped = np.asarray(geometry.index_to_physical(np.rint(idx)))
    pts = geometry.grid_physical()
    dist = np.linalg.norm(pts - snapped, axis=-1)
    region = norm_region.data > 0
    if not region.any():
        raise EmptyMaskError("normalization region is empty")
    max_dist = float(dist[region].max())
    if max_dist <= 0:
        raise DegenerateIntensityError("normalization region has zero extent around ref")
    out = np.clip(dist / max_dist, 0.0, 1.0)
    return DistanceMapPrior(ScalarVolume(geometry, out), tuple(snapped))


def transfer_priors(pa: ProbAtlas, dm: DistanceMapPrior,
                    affine: AffineTransform, field: DisplacementField,
                    subject_geom: VolumeGeometry):
    """Warp both priors onto the subject grid with linear interpolation.

    The transforms must carry atlas content onto the subject grid, i.e. the
    field is tagged ``atlas_to_subject`` and defined on ``subject_geom``.
    Outputs are clamped to [0, 1].
    """
    if field.direction_tag != ATLAS_TO_SUBJECT:
        raise ValueError(
            f"field direction tag {field.direction_tag!r} cannot transfer atlas priors to a subject"
        )
    if not geometry_aligned(field.geometry, subject_geom):
        raise ValueError("field geometry does not match the subject grid")
    out = []
    for prior in (pa.vol, dm.vol):
        warped = warp(prior, affine=affine, field=field, mode="linear")
        out.append(ScalarVolume(subject_geom, np.clip(warped.data, 0.0, 1.0)))
    return out[0], out[1]
