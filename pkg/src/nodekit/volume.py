"""Volume types, NIfTI-1 I/O, geometry operations and CT intensity normalization.

Conventions used throughout the toolkit:

* voxel data is a 3D numpy array indexed ``[i, j, k]``
* physical position of voxel center ``(i, j, k)`` is
  ``origin + direction @ (spacing * (i, j, k))`` in mm
* volumes are immutable after construction (arrays are write-protected)
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import (
    DataError,
    DegenerateIntensityError,
    EmptyMaskError,
    GeometryError,
    NiftiFormatError,
    UnsupportedDatatypeError,
)

# NIfTI-1 datatype codes we read and write.
_DTYPE_FROM_CODE = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
}
_CODE_FROM_DTYPE = {np.dtype(v): k for k, v in _DTYPE_FROM_CODE.items()}

_HEADER_SIZE = 348
_HEADER_FMT = (
    "i"      # sizeof_hdr
    "10s18sihbb"  # data_type, db_name, extents, session_error, regular, dim_info
    "8h"     # dim
    "fffhhh"  # intent_p1..p3, intent_code, datatype, bitpix
    "h"      # slice_start
    "8f"     # pixdim
    "f"      # vox_offset
    "ff"     # scl_slope, scl_inter
    "hbb"    # slice_end, slice_code, xyzt_units
    "ffff"   # cal_max, cal_min, slice_duration, toffset
    "ii"     # glmax, glmin
    "80s24s"  # descrip, aux_file
    "hh"     # qform_code, sform_code
    "ffffff"  # quatern_b..d, qoffset_x..z
    "4f4f4f"  # srow_x, srow_y, srow_z
    "16s4s"  # intent_name, magic
)
assert struct.calcsize("<" + _HEADER_FMT) == _HEADER_SIZE


def _as_triple(values, dtype=float):
    out = tuple(dtype(v) for v in values)
    if len(out) != 3:
        raise ValueError(f"expected 3 components, got {len(out)}")
    return out


@dataclass(frozen=True, eq=False)
class VolumeGeometry:
    """Grid geometry: dims (voxels), spacing (mm), origin (mm), direction cosines."""

    dims: tuple
    spacing: tuple
    origin: tuple
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "dims", _as_triple(self.dims, int))
        object.__setattr__(self, "spacing", _as_triple(self.spacing, float))
        object.__setattr__(self, "origin", _as_triple(self.origin, float))
        direction = np.array(self.direction, dtype=float).reshape(3, 3)
        direction.setflags(write=False)
        object.__setattr__(self, "direction", direction)
        if any(d <= 0 for d in self.dims):
            raise GeometryError(f"dims must be positive, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise GeometryError(f"spacing must be positive, got {self.spacing}")
        if np.max(np.abs(direction.T @ direction - np.eye(3))) > 1e-6:
            raise GeometryError("direction matrix is not orthonormal within 1e-6")

    @property
    def voxel_count(self):
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def affine(self) -> np.ndarray:
        """4x4 index-to-physical affine (voxel centers)."""
        m = np.eye(4)
        m[:3, :3] = self.direction * np.asarray(self.spacing)
        m[:3, 3] = self.origin
        return m

    def index_to_physical(self, idx) -> np.ndarray:
        """Map index coordinates (..., 3) to physical mm coordinates."""
        idx = np.asarray(idx, dtype=float)
        scaled = idx * np.asarray(self.spacing)
        return scaled @ self.direction.T + np.asarray(self.origin)

    def physical_to_index(self, pts) -> np.ndarray:
        """Map physical mm coordinates (..., 3) to (fractional) index coordinates."""
        pts = np.asarray(pts, dtype=float)
        local = (pts - np.asarray(self.origin)) @ self.direction
        return local / np.asarray(self.spacing)

    def grid_physical(self) -> np.ndarray:
        """Physical coordinates of every voxel center, shape ``dims + (3,)``."""
        idx = np.indices(self.dims, dtype=float)
        return self.index_to_physical(np.moveaxis(idx, 0, -1))


def geometry_aligned(a: VolumeGeometry, b: VolumeGeometry, rtol=1e-5, atol=1e-6) -> bool:
    """Two geometries describe the same grid within tolerance."""
    return (
        a.dims == b.dims
        and np.allclose(a.spacing, b.spacing, rtol=rtol, atol=atol)
        and np.allclose(a.origin, b.origin, rtol=rtol, atol=atol)
        and np.allclose(a.direction, b.direction, rtol=rtol, atol=atol)
    )


def require_aligned(*vols, what="volumes"):
    first = vols[0].geometry
    for v in vols[1:]:
        if not geometry_aligned(first, v.geometry):
            raise GeometryError(f"{what} are not aligned on the same grid")


class _BaseVolume:
    """Shared behavior of ScalarVolume and LabelVolume.

    Construction write-protects the stored array in place; pass a copy if the
    source buffer must stay writable.
    """

    def __init__(self, geometry: VolumeGeometry, data: np.ndarray):
        data = np.asarray(data)
        if data.shape != geometry.dims:
            raise GeometryError(
                f"data shape {data.shape} does not match dims {geometry.dims}"
            )
        self.geometry = geometry
        self.data = data
        self.data.setflags(write=False)

    @property
    def dims(self):
        return self.geometry.dims

    @property
    def spacing(self):
        return self.geometry.spacing

    @property
    def origin(self):
        return self.geometry.origin

    @property
    def direction(self):
        return self.geometry.direction

    def with_data(self, data):
        """New volume of the same kind and geometry holding ``data``."""
        return type(self)(self.geometry, data)


class ScalarVolume(_BaseVolume):
    """3D grid of finite real samples with physical geometry."""

    def __init__(self, geometry, data):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        super().__init__(geometry, data)
        if not np.all(np.isfinite(self.data)):
            raise DataError("scalar volume contains NaN/Inf samples")


class LabelVolume(_BaseVolume):
    """3D grid of non-negative integer labels with physical geometry."""

    def __init__(self, geometry, data):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.integer):
            if not np.all(np.equal(np.mod(data[np.isfinite(data)], 1), 0)):
                raise DataError("label volume requires integer values")
            data = data.astype(np.int32)
        super().__init__(geometry, data)
        if self.data.size and self.data.min() < 0:
            raise DataError("label volume contains negative labels")

    def binarized(self) -> "LabelVolume":
        return LabelVolume(self.geometry, (self.data > 0).astype(np.uint8))


# ---------------------------------------------------------------------------
# NIfTI-1 codec
# ---------------------------------------------------------------------------

def _open_for_read(path):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _quaternion_to_direction(b, c, d, qfac):
    a_sq = 1.0 - (b * b + c * c + d * d)
    a = math.sqrt(a_sq) if a_sq > 0 else 0.0
    r = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )
    r[:, 2] *= qfac
    return r


def read_nifti_raw(path):
    """Parse a NIfTI-1 file into a dict of header fields plus the raw data array.

    Endianness is autodetected from ``sizeof_hdr``. The data array keeps the
    file's full dim[] layout (Fortran voxel order, first index fastest) and is
    returned unscaled together with ``scl_slope``/``scl_inter``.
    """
    with _open_for_read(path) as f:
        raw = f.read(_HEADER_SIZE)
        if len(raw) < _HEADER_SIZE:
            raise NiftiFormatError(f"{path}: truncated header ({len(raw)} bytes)")
        byte_order = "<"
        if struct.unpack_from("<i", raw)[0] != _HEADER_SIZE:
            byte_order = ">"
            if struct.unpack_from(">i", raw)[0] != _HEADER_SIZE:
                raise NiftiFormatError(f"{path}: sizeof_hdr is not 348")
        fields = struct.unpack(byte_order + _HEADER_FMT, raw)
        dim = fields[7:15]
        datatype = fields[19]
        pixdim = fields[22:30]
        vox_offset = fields[30]
        scl_slope, scl_inter = fields[31], fields[32]
        qform_code, sform_code = fields[44], fields[45]
        quatern = fields[46:49]
        qoffset = fields[49:52]
        srow = np.array(fields[52:64], dtype=float).reshape(3, 4)
        descrip = fields[42].rstrip(b"\x00")
        magic = fields[65]
        if magic not in (b"n+1\x00",):
            raise NiftiFormatError(f"{path}: magic {magic!r} is not 'n+1\\0'")
        if datatype not in _DTYPE_FROM_CODE:
            raise UnsupportedDatatypeError(f"{path}: datatype code {datatype}")
        ndim = dim[0]
        if not 1 <= ndim <= 7:
            raise NiftiFormatError(f"{path}: dim[0]={ndim} out of range")
        shape = tuple(max(int(d), 1) for d in dim[1 : ndim + 1])
        dtype = np.dtype(_DTYPE_FROM_CODE[datatype]).newbyteorder(byte_order)
        count = int(np.prod(shape))
        f.seek(int(vox_offset))
        buf = f.read(count * dtype.itemsize)
        if len(buf) < count * dtype.itemsize:
            raise NiftiFormatError(f"{path}: data section truncated")
        data = np.frombuffer(buf, dtype=dtype, count=count).reshape(shape, order="F")
    return {
        "shape": shape,
        "data": data,
        "spacing": tuple(abs(float(p)) for p in pixdim[1:4]),
        "qfac": -1.0 if pixdim[0] == -1 else 1.0,
        "scl_slope": float(scl_slope),
        "scl_inter": float(scl_inter),
        "qform_code": int(qform_code),
        "sform_code": int(sform_code),
        "quatern": tuple(float(q) for q in quatern),
        "qoffset": tuple(float(q) for q in qoffset),
        "srow": srow,
        "descrip": descrip,
    }


def _geometry_from_header(hdr, dims):
    spacing = hdr["spacing"]
    if any(s <= 0 for s in spacing):
        raise NiftiFormatError(f"non-positive pixdim {spacing}")
    if hdr["sform_code"] > 0:
        m = hdr["srow"][:, :3]
        norms = np.linalg.norm(m, axis=0)
        if np.any(norms == 0):
            raise NiftiFormatError("sform has a zero column")
        direction = m / norms
        origin = tuple(hdr["srow"][:, 3])
    elif hdr["qform_code"] > 0:
        b, c, d = hdr["quatern"]
        direction = _quaternion_to_direction(b, c, d, hdr["qfac"])
        origin = hdr["qoffset"]
    else:
        direction = np.eye(3)
        origin = (0.0, 0.0, 0.0)
    return VolumeGeometry(dims, spacing, origin, direction)


def read_nifti(path, as_label=None):
    """Read a 3D NIfTI-1 volume (optionally gzipped).

    Spacing comes from pixdim; origin/direction from the sform affine, with
    qform as fallback. ``scl_slope``/``scl_inter`` are applied when slope is
    nonzero. ``as_label`` forces the returned kind; by default integer files
    without scaling and without negative values load as :class:`LabelVolume`.
    """
    hdr = read_nifti_raw(path)
    shape = hdr["shape"]
    if len(shape) > 3:
        if any(s != 1 for s in shape[3:]):
            raise NiftiFormatError(f"{path}: {len(shape)}D volumes are unsupported")
        shape = shape[:3]
    if len(shape) < 3:
        shape = shape + (1,) * (3 - len(shape))
    data = hdr["data"].reshape(shape, order="F")
    geometry = _geometry_from_header(hdr, shape)

    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    scaled = slope != 0.0 and not (slope == 1.0 and inter == 0.0)
    if scaled:
        out_dtype = np.float64 if data.dtype.itemsize > 4 else np.float32
        data = data.astype(out_dtype) * out_dtype(slope) + out_dtype(inter)

    is_integer = np.issubdtype(data.dtype, np.integer)
    if not is_integer and not np.all(np.isfinite(data)):
        raise DataError(f"{path}: NaN/Inf samples")

    if as_label is None:
        as_label = is_integer and not scaled and (data.size == 0 or data.min() >= 0)
    if as_label:
        return LabelVolume(geometry, data.astype(data.dtype.newbyteorder("=")))
    if is_integer:
        data = data.astype(np.float32 if data.dtype.itemsize <= 2 else np.float64)
    return ScalarVolume(geometry, data.astype(data.dtype.newbyteorder("=")))


def write_nifti(vol, path, dtype=None):
    """Write a volume as single-file NIfTI-1 (.nii or .nii.gz).

    Geometry goes into pixdim + sform. Labels are stored as uint8 when the
    maximum label fits, uint16/int32 otherwise; scalars keep their float width.
    Gzip output is written with mtime=0 so identical volumes produce identical
    bytes.
    """
    if dtype is None:
        if isinstance(vol, LabelVolume):
            top = int(vol.data.max()) if vol.data.size else 0
            dtype = np.uint8 if top < 256 else (np.uint16 if top < 65536 else np.int32)
        else:
            dtype = np.float64 if vol.data.dtype == np.float64 else np.float32
    dtype = np.dtype(dtype)
    if dtype not in _CODE_FROM_DTYPE:
        raise UnsupportedDatatypeError(f"cannot write dtype {dtype}")
    data = np.ascontiguousarray(vol.data).astype(dtype, copy=False)
    _write_nifti_raw(path, data, vol.geometry)


def _write_nifti_raw(path, data, geometry, intent_code=0, descrip=b"nodekit"):
    """Low-level writer; `data` may carry trailing component axes (vector volumes)."""
    dtype = data.dtype
    code = _CODE_FROM_DTYPE[dtype]
    shape = data.shape
    ndim = len(shape)
    dim = [ndim] + [int(s) for s in shape] + [1] * (7 - ndim)
    pixdim = [1.0] + list(geometry.spacing) + [1.0] * (7 - 3)
    srow = np.zeros((3, 4))
    srow[:, :3] = geometry.direction * np.asarray(geometry.spacing)
    srow[:, 3] = geometry.origin

    header = struct.pack(
        "<" + _HEADER_FMT,
        _HEADER_SIZE,
        b"", b"", 0, 0, 0, 0,
        *dim,
        0.0, 0.0, 0.0,
        intent_code,
        code,
        dtype.itemsize * 8,
        0,
        *pixdim,
        352.0,
        1.0, 0.0,
        0, 0, 0,
        0.0, 0.0, 0.0, 0.0,
        0, 0,
        descrip, b"",
        0, 1,
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        *srow[0], *srow[1], *srow[2],
        b"", b"n+1\x00",
    )
    payload = header + b"\x00\x00\x00\x00" + data.tobytes(order="F")
    if str(path).endswith(".gz"):
        # fixed mtime and no embedded filename keep identical volumes byte-identical
        with open(path, "wb") as f:
            with gzip.GzipFile(filename="", fileobj=f, mode="wb", mtime=0) as gz:
                gz.write(payload)
    else:
        with open(path, "wb") as f:
            f.write(payload)


# ---------------------------------------------------------------------------
# Cropping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CropRecord:
    """Where a cropped block sits inside its original volume."""

    start: tuple
    stop: tuple
    full_geometry: VolumeGeometry

    def to_dict(self):
        return {
            "start": list(self.start),
            "stop": list(self.stop),
            "dims": list(self.full_geometry.dims),
            "spacing": list(self.full_geometry.spacing),
            "origin": list(self.full_geometry.origin),
            "direction": np.asarray(self.full_geometry.direction).ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        geom = VolumeGeometry(
            tuple(d["dims"]),
            tuple(d["spacing"]),
            tuple(d["origin"]),
            np.asarray(d["direction"]).reshape(3, 3),
        )
        return cls(tuple(int(v) for v in d["start"]), tuple(int(v) for v in d["stop"]), geom)


def crop_to_mask_bbox(vol, mask: LabelVolume, margin_mm=0.0):
    """Crop to the bounding box of ``mask > 0`` expanded by ``margin_mm``.

    Margins are rounded up to whole voxels per axis and clamped at the volume
    bounds, so no mask voxel is ever lost. Returns the cropped volume and a
    :class:`CropRecord` that :func:`pad_to_original` can invert.
    """
    require_aligned(vol, mask, what="volume and mask")
    fg = mask.data > 0
    if not fg.any():
        raise EmptyMaskError("mask is empty; nothing to crop to")
    start, stop = [], []
    for axis in range(3):
        proj = np.any(fg, axis=tuple(a for a in range(3) if a != axis))
        nz = np.nonzero(proj)[0]
        m = math.ceil(margin_mm / vol.spacing[axis]) if margin_mm > 0 else 0
        start.append(max(int(nz[0]) - m, 0))
        stop.append(min(int(nz[-1]) + m + 1, vol.dims[axis]))
    sl = tuple(slice(a, b) for a, b in zip(start, stop))
    new_geom = VolumeGeometry(
        tuple(b - a for a, b in zip(start, stop)),
        vol.spacing,
        tuple(vol.geometry.index_to_physical(start)),
        vol.direction,
    )
    record = CropRecord(tuple(start), tuple(stop), vol.geometry)
    return vol.__class__(new_geom, vol.data[sl].copy()), record


def apply_crop(vol, crop: CropRecord):
    """Extract the crop region described by an existing record."""
    if vol.dims != crop.full_geometry.dims:
        raise GeometryError(
            f"volume dims {vol.dims} do not match the record's original dims"
        )
    sl = tuple(slice(a, b) for a, b in zip(crop.start, crop.stop))
    geom = VolumeGeometry(
        tuple(b - a for a, b in zip(crop.start, crop.stop)),
        vol.spacing,
        tuple(vol.geometry.index_to_physical(crop.start)),
        vol.direction,
    )
    return vol.__class__(geom, vol.data[sl].copy())


def pad_to_original(vol, crop: CropRecord):
    """Invert :func:`crop_to_mask_bbox`: zero-pad back to the original grid."""
    expected = tuple(b - a for a, b in zip(crop.start, crop.stop))
    if vol.dims != expected:
        raise GeometryError(f"volume dims {vol.dims} do not match crop region {expected}")
    full = np.zeros(crop.full_geometry.dims, dtype=vol.data.dtype)
    sl = tuple(slice(a, b) for a, b in zip(crop.start, crop.stop))
    full[sl] = vol.data
    return vol.__class__(crop.full_geometry, full)


# ---------------------------------------------------------------------------
# Intensity normalization and resampling
# ---------------------------------------------------------------------------

def normalize_ct(vol: ScalarVolume, fg: LabelVolume) -> ScalarVolume:
    """Percentile-clip and z-score a CT using foreground statistics.

    lo/hi are the 0.5/99.5 linear-interpolation percentiles of the samples
    under ``fg > 0``; the whole volume is clipped to [lo, hi] and z-scored
    with the mean/stddev of the clipped foreground.
    """
    require_aligned(vol, fg, what="volume and foreground mask")
    inside = fg.data > 0
    if not inside.any():
        raise EmptyMaskError("foreground mask is empty")
    samples = vol.data[inside].astype(np.float64)
    lo, hi = np.percentile(samples, [0.5, 99.5])
    clipped = np.clip(vol.data.astype(np.float64), lo, hi)
    fg_clipped = clipped[inside]
    mean = fg_clipped.mean()
    std = fg_clipped.std()
    if std < 1e-8:
        raise DegenerateIntensityError("foreground intensity spread below 1e-8")
    return ScalarVolume(vol.geometry, (clipped - mean) / std)


def resample(vol, target: VolumeGeometry, mode="linear"):
    """Resample onto ``target`` by sampling at its voxel centers.

    Out-of-bounds positions take value 0. Label volumes require nearest mode
    so no new label values can appear.
    """
    is_label = isinstance(vol, LabelVolume)
    if is_label and mode != "nearest":
        raise ValueError("label volumes must be resampled with mode='nearest'")
    if mode not in ("linear", "nearest"):
        raise ValueError(f"unknown mode {mode!r}")
    pts = target.grid_physical()
    idx = vol.geometry.physical_to_index(pts)
    coords = np.moveaxis(idx, -1, 0)
    order = 0 if mode == "nearest" else 1
    out = map_coordinates(vol.data, coords, order=order, mode="constant", cval=0.0)
    return vol.__class__(target, out)
