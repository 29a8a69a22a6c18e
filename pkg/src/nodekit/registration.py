"""Mask-feature based rigid/affine registration and variational deformable registration.

The linear stages minimize the mean squared difference between a fixed feature
image and the warped moving feature by multi-resolution first-order descent
with monotone step acceptance. The deformable stage iterates a demons-style
update ``u <- G_sigma * (u + tau * f)`` with the force

    f = (fixed - moving(x + u)) * grad(fixed) / (|grad|^2 + diff^2)

and diffusion (Gaussian) regularization, coarse to fine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt, gaussian_filter, map_coordinates

from .errors import ConvergenceError, DataError, EmptyMaskError, GeometryError
from .volume import (
    LabelVolume,
    ScalarVolume,
    VolumeGeometry,
    _geometry_from_header,
    _write_nifti_raw,
    geometry_aligned,
    read_nifti_raw,
    require_aligned,
)

ATLAS_TO_SUBJECT = "atlas_to_subject"
SUBJECT_TO_ATLAS = "subject_to_atlas"

#: structures driving the linear registration stages
DEFAULT_FEATURE_ORGANS = ("bones", "heart", "esophagus", "trachea", "aorta")

#: signed distance maps are clamped to +-30 mm
FEATURE_CLAMP_MM = 30.0


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """4x4 homogeneous transform in physical mm coordinates."""

    matrix: np.ndarray
    kind: str = "affine"

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float).reshape(4, 4)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        if not np.allclose(m[3], (0, 0, 0, 1), atol=1e-9):
            raise ValueError("last row of an affine matrix must be (0, 0, 0, 1)")
        if self.kind not in ("rigid", "affine"):
            raise ValueError(f"kind must be 'rigid' or 'affine', got {self.kind!r}")
        if self.kind == "rigid":
            r = m[:3, :3]
            if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-5 or np.linalg.det(r) < 0:
                raise ValueError("rigid transform requires a proper rotation part")

    @classmethod
    def identity(cls, kind="rigid"):
        return cls(np.eye(4), kind)

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def apply(self, pts) -> np.ndarray:
        """Map physical points, shape (..., 3)."""
        pts = np.asarray(pts, dtype=float)
        return pts @ self.linear.T + self.translation

    def inverse(self) -> "AffineTransform":
        return AffineTransform(np.linalg.inv(self.matrix), self.kind)

    def rotation_angle_deg(self) -> float:
        """Total rotation angle of the linear part (rigid transforms)."""
        c = (np.trace(self.linear) - 1.0) / 2.0
        return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def rigid_from_params(angles_rad, translation_mm, center_mm=(0.0, 0.0, 0.0)):
    """Rigid transform x -> R(x - c) + c + t with R = Rz @ Ry @ Rx."""
    rx, ry, rz = angles_rad
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    r = (
        np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
        @ np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        @ np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    )
    return _from_centered(r, np.asarray(translation_mm, float), np.asarray(center_mm, float), "rigid")


def _from_centered(linear, translation, center, kind):
    m = np.eye(4)
    m[:3, :3] = linear
    m[:3, 3] = center + translation - linear @ center
    return AffineTransform(m, kind)


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-voxel physical displacement (mm) defined on the output grid.

    ``direction_tag`` names the content-transfer direction: a field tagged
    ``atlas_to_subject`` lives on the subject grid and pulls atlas-space
    content onto it.
    """

    geometry: VolumeGeometry
    vectors: np.ndarray
    direction_tag: str = ATLAS_TO_SUBJECT

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.shape != self.geometry.dims + (3,):
            raise GeometryError(
                f"vector shape {v.shape} does not match dims {self.geometry.dims} + (3,)"
            )
        if not np.all(np.isfinite(v)):
            raise DataError("displacement field contains non-finite components")
        if self.direction_tag not in (ATLAS_TO_SUBJECT, SUBJECT_TO_ATLAS):
            raise ValueError(f"unknown direction tag {self.direction_tag!r}")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @classmethod
    def zero(cls, geometry, direction_tag=ATLAS_TO_SUBJECT):
        return cls(geometry, np.zeros(geometry.dims + (3,)), direction_tag)

    def max_magnitude(self) -> float:
        return float(np.sqrt((self.vectors ** 2).sum(axis=-1)).max())


@dataclass(frozen=True)
class RegistrationConfig:
    levels: int = 3
    iterations_per_level: int = 100
    force_type: str = "demons"
    regularization_sigma_mm: float = 3.0
    step_tau: float = 1.0
    convergence_tol: float = 1e-5

    def __post_init__(self):
        if not 1 <= self.levels <= 4:
            raise ValueError("levels must be in 1..4")
        if self.iterations_per_level < 1:
            raise ValueError("iterations_per_level must be positive")
        if self.force_type != "demons":
            raise ValueError(f"unsupported force type {self.force_type!r}")
        if self.regularization_sigma_mm <= 0 or self.step_tau <= 0 or self.convergence_tol <= 0:
            raise ValueError("sigma, tau and tolerance must be positive")


# ---------------------------------------------------------------------------
# Mask features
# ---------------------------------------------------------------------------

def signed_distance(mask: LabelVolume, clamp_mm=FEATURE_CLAMP_MM) -> ScalarVolume:
    """Signed Euclidean distance (mm) to the mask surface, negative inside.

    Outside voxels carry the center-to-center distance to the nearest
    foreground voxel; inside voxels carry minus the distance to the nearest
    background voxel shifted by half the smallest spacing, so a lone voxel
    sits at -0.5*min(spacing). Values are clamped to +-clamp_mm.
    """
    fg = mask.data > 0
    if not fg.any():
        raise EmptyMaskError("cannot build a distance feature from an empty mask")
    spacing = np.asarray(mask.spacing)
    half = 0.5 * spacing.min()
    if fg.all():
        sdist = np.full(mask.dims, -clamp_mm)
    else:
        d_out = distance_transform_edt(~fg, sampling=spacing)
        d_in = distance_transform_edt(fg, sampling=spacing)
        sdist = np.where(fg, half - d_in, d_out)
    return ScalarVolume(mask.geometry, np.clip(sdist, -clamp_mm, clamp_mm))


def masks_to_feature(masks, select=DEFAULT_FEATURE_ORGANS) -> ScalarVolume:
    """Clamped signed distance map of the union of selected structure masks.

    ``masks`` is either a mapping organ-name -> LabelVolume (``select`` picks
    the structures) or a plain sequence of LabelVolumes (all are used).
    """
    if hasattr(masks, "keys"):
        if not select:
            raise ValueError("organ selection is empty")
        missing = [name for name in select if name not in masks]
        if missing:
            raise ValueError(f"missing structure masks: {missing}")
        chosen = [masks[name] for name in select]
    else:
        chosen = list(masks)
    if not chosen:
        raise ValueError("no masks supplied")
    require_aligned(*chosen, what="structure masks")
    union = np.zeros(chosen[0].dims, dtype=bool)
    for m in chosen:
        union |= m.data > 0
    if not union.any():
        raise EmptyMaskError("union of selected structures is empty")
    return signed_distance(LabelVolume(chosen[0].geometry, union.astype(np.uint8)))


# ---------------------------------------------------------------------------
# Image pyramid and resampling helpers
# ---------------------------------------------------------------------------

def _downsample(data, geometry):
    smoothed = gaussian_filter(data.astype(np.float64), sigma=1.0, mode="nearest")
    coarse = smoothed[::2, ::2, ::2]
    geom = VolumeGeometry(
        coarse.shape,
        tuple(s * 2 for s in geometry.spacing),
        geometry.origin,
        geometry.direction,
    )
    return coarse, geom


def _pyramid(data, geometry, levels):
    """Coarse-to-fine list of (data, geometry); stops early on tiny grids."""
    out = [(data.astype(np.float64), geometry)]
    for _ in range(levels - 1):
        d, g = out[-1]
        if min(d.shape) < 8:
            break
        out.append(_downsample(d, g))
    return out[::-1]


# ---------------------------------------------------------------------------
# Linear registration
# ---------------------------------------------------------------------------

def _descend(value_and_grad, value_only, p0, max_iters, tol, step0):
    """First-order descent (Polak-Ribiere conjugate directions) with a
    backtracking line search.

    Only improving steps are accepted, so the returned objective is never
    worse than ``value_only(p0)``.
    """
    p = np.asarray(p0, dtype=float)
    f_best = value_only(p)
    if not np.isfinite(f_best):
        raise ConvergenceError("objective is not finite at the initialization", best=p)
    step = step0
    min_step = 1e-5 * step0
    small_gains = 0
    grad_prev = None
    direction_prev = None
    for _ in range(max_iters):
        _, grad = value_and_grad(p)
        if not np.all(np.isfinite(grad)) or not np.any(grad):
            break
        direction = -grad
        if grad_prev is not None:
            beta = max(0.0, grad @ (grad - grad_prev) / (grad_prev @ grad_prev))
            conj = -grad + beta * direction_prev
            if conj @ grad < 0:
                direction = conj
        grad_prev, direction_prev = grad, direction
        unit = direction / np.linalg.norm(direction)
        f_prev = f_best
        accepted = False
        trial = min(2.0 * step, step0)
        while trial > min_step:
            cand = p + trial * unit
            f_cand = value_only(cand)
            if f_cand < f_best:
                p, f_best, step = cand, f_cand, trial
                accepted = True
                break
            trial *= 0.5
        if not accepted:
            break
        if f_prev - f_best <= tol * max(f_prev, 1e-30):
            small_gains += 1
            if small_gains >= 3:
                break
        else:
            small_gains = 0
    return p, f_best


def _check_feature(feat, name):
    if float(feat.data.std()) == 0.0:
        raise DataError(f"{name} feature is constant; registration is ill-posed")


class _LevelObjective:
    """MSE between a fixed level and the transformed moving level.

    The gradient follows the chain rule through trilinear sampling of the
    moving image: dMSE/dq_i = 2 mean(e * grad_m(T x) . dT(x)/dq_i).
    """

    def __init__(self, fd, fg, md, mg):
        self.pts = fg.grid_physical().reshape(-1, 3)
        self.fixed_flat = fd.reshape(-1)
        self.md = md
        self.mg = mg
        spacing = np.asarray(mg.spacing)
        gm = np.gradient(md, *spacing)
        # moving-image gradient components in the physical frame
        self.gm_phys = np.einsum("ia,a...->i...", mg.direction, np.array(gm))

    def _sample(self, arr, pos):
        # edge replication: a plateau background must not turn shifts into
        # artificial boundary mismatches
        idx = self.mg.physical_to_index(pos)
        return map_coordinates(arr, idx.T, order=1, mode="nearest")

    def residual(self, transform):
        pos = transform.apply(self.pts)
        e = self._sample(self.md, pos) - self.fixed_flat
        return pos, e

    def value(self, transform):
        _, e = self.residual(transform)
        return float(np.mean(e * e))

    def value_and_pointgrad(self, transform):
        pos, e = self.residual(transform)
        g = np.stack([self._sample(self.gm_phys[a], pos) for a in range(3)], axis=1)
        return float(np.mean(e * e)), e, g


def _linear_registration(fixed, moving, params_to_transform, jacobian, q0, cfg):
    pyramid_f = _pyramid(fixed.data, fixed.geometry, cfg.levels)
    pyramid_m = _pyramid(moving.data, moving.geometry, cfg.levels)
    q = np.asarray(q0, dtype=float)
    for (fd, fg), (md, mg) in zip(pyramid_f, pyramid_m):
        obj = _LevelObjective(fd, fg, md, mg)

        def value_only(params):
            return obj.value(params_to_transform(params))

        def value_and_grad(params):
            f, e, g = obj.value_and_pointgrad(params_to_transform(params))
            jac = jacobian(params, obj.pts)  # (nparams, npts, 3)
            grad = 2.0 * np.einsum("n,pna,na->p", e, jac, g) / e.size
            return f, grad

        q, _ = _descend(
            value_and_grad, value_only, q, cfg.iterations_per_level,
            cfg.convergence_tol, step0=2.0 * min(fg.spacing),
        )
    return params_to_transform(q)


def _characteristic_radius(geometry):
    return 0.5 * float(np.mean(np.asarray(geometry.dims) * np.asarray(geometry.spacing)))


def _intensity_centroid(vol):
    """Physical centroid weighted by deviation from the mean intensity."""
    w = np.abs(vol.data - float(vol.data.mean()))
    total = w.sum()
    if total == 0:
        return np.asarray(vol.geometry.index_to_physical(
            tuple((d - 1) / 2 for d in vol.dims)
        ))
    idx = np.indices(vol.dims)
    com = [float((w * idx[a]).sum() / total) for a in range(3)]
    return np.asarray(vol.geometry.index_to_physical(com))


def register_rigid(fixed_feat: ScalarVolume, moving_feat: ScalarVolume,
                   cfg: RegistrationConfig | None = None) -> AffineTransform:
    """Recover the rigid transform (3 Euler angles + 3 translations, about the
    fixed volume center) minimizing the MSE between fixed and warped moving."""
    cfg = cfg or RegistrationConfig()
    _check_feature(fixed_feat, "fixed")
    _check_feature(moving_feat, "moving")
    center = np.asarray(fixed_feat.geometry.index_to_physical(
        tuple((d - 1) / 2 for d in fixed_feat.dims)
    ))
    # angles are scaled by a characteristic radius so every parameter moves
    # points by roughly 1 mm per unit
    radius = _characteristic_radius(fixed_feat.geometry)

    def to_transform(q):
        return rigid_from_params(q[:3] / radius, q[3:6], center)

    def jacobian(q, pts):
        centered = pts - center
        n = pts.shape[0]
        jac = np.empty((6, n, 3))
        h = 1e-5
        angles = q[:3] / radius
        for i in range(3):
            da = np.zeros(3)
            da[i] = h
            r_plus = rigid_from_params(angles + da, (0, 0, 0)).linear
            r_minus = rigid_from_params(angles - da, (0, 0, 0)).linear
            dr = (r_plus - r_minus) / (2 * h)
            jac[i] = centered @ dr.T / radius
        for i in range(3):
            jac[3 + i] = 0.0
            jac[3 + i, :, i] = 1.0
        return jac

    # moment initialization keeps large offsets out of bad coarse-level basins
    q0 = np.zeros(6)
    q0[3:6] = _intensity_centroid(moving_feat) - _intensity_centroid(fixed_feat)
    return _linear_registration(
        fixed_feat, moving_feat, to_transform, jacobian, q0, cfg
    )


def register_affine(fixed_feat: ScalarVolume, moving_feat: ScalarVolume,
                    init: AffineTransform,
                    cfg: RegistrationConfig | None = None) -> AffineTransform:
    """12-parameter refinement of ``init``; never returns a transform with a
    worse objective than the initialization."""
    cfg = cfg or RegistrationConfig()
    _check_feature(fixed_feat, "fixed")
    _check_feature(moving_feat, "moving")
    center = np.asarray(fixed_feat.geometry.index_to_physical(
        tuple((d - 1) / 2 for d in fixed_feat.dims)
    ))
    radius = _characteristic_radius(fixed_feat.geometry)
    linear0 = init.linear
    trans0 = linear0 @ center + init.translation - center

    def to_transform(q):
        linear = linear0 + q[:9].reshape(3, 3) / radius
        return _from_centered(linear, trans0 + q[9:12], center, "affine")

    def jacobian(q, pts):
        centered = pts - center
        n = pts.shape[0]
        jac = np.zeros((12, n, 3))
        for i in range(3):
            for j in range(3):
                jac[3 * i + j, :, i] = centered[:, j] / radius
            jac[9 + i, :, i] = 1.0
        return jac

    return _linear_registration(
        fixed_feat, moving_feat, to_transform, jacobian, np.zeros(12), cfg
    )


# ---------------------------------------------------------------------------
# Variational (demons) registration
# ---------------------------------------------------------------------------

def _demons_level(fd, md, geom, u, cfg):
    """Run demons iterations at one level; u holds per-axis mm displacements."""
    spacing = np.asarray(geom.spacing)
    base_idx = np.indices(fd.shape, dtype=np.float64)
    grads = np.gradient(fd, *spacing)
    sigma_vox = cfg.regularization_sigma_mm / spacing

    def warp_mse(disp):
        coords = base_idx + disp / spacing[:, None, None, None]
        warped = map_coordinates(md, coords, order=1, mode="nearest")
        d = fd - warped
        return warped, d, float(np.mean(d * d))

    _, diff, mse = warp_mse(u)
    best_u, best_mse = u, mse
    tau = cfg.step_tau
    grad_sq = grads[0] ** 2 + grads[1] ** 2 + grads[2] ** 2
    for _ in range(cfg.iterations_per_level):
        denom = grad_sq + diff * diff
        scale = np.where(denom > 1e-12, diff / np.where(denom > 1e-12, denom, 1.0), 0.0)
        accepted = False
        tau_try = tau
        for _ in range(4):
            cand = np.empty_like(best_u)
            for ax in range(3):
                cand[ax] = gaussian_filter(
                    best_u[ax] + tau_try * scale * grads[ax], sigma=sigma_vox, mode="nearest"
                )
            _, diff_cand, mse_cand = warp_mse(cand)
            if mse_cand <= best_mse:
                improvement = best_mse - mse_cand
                best_u, best_mse, diff = cand, mse_cand, diff_cand
                tau = tau_try
                accepted = True
                break
            tau_try *= 0.5
        if not accepted:
            break
        if improvement <= cfg.convergence_tol * max(best_mse, 1e-30):
            break
    return best_u, best_mse


def _upsample_field(u, fine_shape):
    out = np.empty((3,) + fine_shape)
    ratios = [(c - 1) / max(f - 1, 1) if f > 1 else 0.0 for c, f in zip(u.shape[1:], fine_shape)]
    idx = np.indices(fine_shape, dtype=np.float64)
    coords = np.array([idx[a] * ratios[a] for a in range(3)])
    for ax in range(3):
        out[ax] = map_coordinates(u[ax], coords, order=1, mode="nearest")
    return out


def register_variational(fixed: ScalarVolume, moving: ScalarVolume,
                         cfg: RegistrationConfig | None = None,
                         direction_tag=ATLAS_TO_SUBJECT) -> DisplacementField:
    """Demons registration of ``moving`` onto the grid of ``fixed``.

    Inputs must live on the same grid (moving already affinely pre-warped).
    The per-level MSE is non-increasing over accepted iterations, and the
    final field never scores worse than the zero field.
    """
    cfg = cfg or RegistrationConfig()
    if not geometry_aligned(fixed.geometry, moving.geometry):
        raise GeometryError("variational registration requires aligned inputs")
    pyramid_f = _pyramid(fixed.data, fixed.geometry, cfg.levels)
    pyramid_m = _pyramid(moving.data, moving.geometry, cfg.levels)

    u = np.zeros((3,) + pyramid_f[0][0].shape)
    for li, ((fd, geom), (md, _)) in enumerate(zip(pyramid_f, pyramid_m)):
        if li > 0:
            u = _upsample_field(u, fd.shape)
        if li == len(pyramid_f) - 1:
            # guard the full-resolution invariant: never start worse than zero
            zero = np.zeros_like(u)
            if _level_mse(fd, md, geom, u) > _level_mse(fd, md, geom, zero):
                u = zero
        u, _ = _demons_level(fd, md, geom, u, cfg)

    # per-axis mm displacements -> physical mm vectors
    vectors = np.einsum("ij,j...->...i", fixed.geometry.direction, u)
    return DisplacementField(fixed.geometry, vectors, direction_tag)


def _level_mse(fd, md, geom, u):
    spacing = np.asarray(geom.spacing)
    coords = np.indices(fd.shape, dtype=np.float64) + u / spacing[:, None, None, None]
    warped = map_coordinates(md, coords, order=1, mode="nearest")
    return float(np.mean((fd - warped) ** 2))


# ---------------------------------------------------------------------------
# Warping
# ---------------------------------------------------------------------------

def warp(vol, affine: AffineTransform | None = None,
         field: DisplacementField | None = None, mode=None):
    """Resample ``vol`` at positions ``affine(x) + u(x)`` over the target grid.

    The target grid is the field's geometry when a field is given, otherwise
    the volume's own. Label volumes always use nearest-neighbor sampling.
    """
    if affine is None and field is None:
        raise ValueError("warp needs an affine transform, a field, or both")
    is_label = isinstance(vol, LabelVolume)
    if mode is None:
        mode = "nearest" if is_label else "linear"
    if is_label and mode != "nearest":
        raise ValueError("label volumes must be warped with mode='nearest'")
    target = field.geometry if field is not None else vol.geometry
    pts = target.grid_physical()
    pos = affine.apply(pts) if affine is not None else pts
    if field is not None:
        pos = pos + field.vectors
    idx = vol.geometry.physical_to_index(pos)
    order = 0 if mode == "nearest" else 1
    out = map_coordinates(vol.data, np.moveaxis(idx, -1, 0), order=order,
                          mode="constant", cval=0.0)
    return vol.__class__(target, out)


def rotate_field_into(affine: AffineTransform, field: DisplacementField) -> DisplacementField:
    """Express a field computed against a pre-warped moving image in the
    composed convention ``affine(x) + u'(x)`` with ``u' = linear(affine) @ u``.

    Exact for affine pre-warps: affine(x + u) = affine(x) + linear @ u.
    """
    vectors = field.vectors @ affine.linear.T
    return DisplacementField(field.geometry, vectors, field.direction_tag)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_affine(transform: AffineTransform, path):
    """16 numbers, row-major, plus a kind comment."""
    with open(path, "w") as f:
        f.write(f"# kind: {transform.kind}\n")
        for row in transform.matrix:
            f.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_affine(path) -> AffineTransform:
    kind = None
    values = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line.startswith("#"):
                if "kind:" in line:
                    kind = line.split("kind:")[1].strip()
                continue
            values.extend(float(tok) for tok in line.split())
    if len(values) != 16:
        raise ValueError(f"{path}: expected 16 numbers, got {len(values)}")
    matrix = np.asarray(values).reshape(4, 4)
    if kind is None:
        r = matrix[:3, :3]
        is_rigid = (
            np.max(np.abs(r.T @ r - np.eye(3))) <= 1e-5 and np.linalg.det(r) > 0
        )
        kind = "rigid" if is_rigid else "affine"
    return AffineTransform(matrix, kind)


def save_field(field: DisplacementField, path):
    """3-component NIfTI vector volume (dim[0]=5, intent VECTOR)."""
    data = field.vectors.astype(np.float32)[:, :, :, None, :]
    _write_nifti_raw(path, data, field.geometry, intent_code=1007,
                     descrip=f"field:{field.direction_tag}".encode())


def load_field(path) -> DisplacementField:
    hdr = read_nifti_raw(path)
    shape = hdr["shape"]
    if len(shape) != 5 or shape[3] != 1 or shape[4] != 3:
        raise GeometryError(f"{path}: not a 3-component vector volume (shape {shape})")
    geometry = _geometry_from_header(hdr, shape[:3])
    tag = ATLAS_TO_SUBJECT
    descrip = hdr["descrip"].decode(errors="replace")
    if descrip.startswith("field:"):
        tag = descrip.split(":", 1)[1]
    vectors = hdr["data"].astype(np.float64)[:, :, :, 0, :]
    return DisplacementField(geometry, vectors, tag)
