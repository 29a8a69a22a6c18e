"""Synthetic volumes shared across tests: analytic sphere phantoms for
registration recovery, a Y-shaped trachea for the carina, and a miniature
end-to-end dataset for the CLI."""

import json
from pathlib import Path

import numpy as np

from nodekit.volume import LabelVolume, ScalarVolume, VolumeGeometry, write_nifti

PHANTOM_DIMS = (48, 48, 48)
PHANTOM_GEOM = VolumeGeometry(PHANTOM_DIMS, (1, 1, 1), (0, 0, 0))
PHANTOM_CENTER = np.asarray(PHANTOM_GEOM.index_to_physical((23.5, 23.5, 23.5)))
# sphere offsets keep the phantom clear of the volume edge under +-8 mm shifts;
# the inter-center axis stays in the xy-plane so z-rotations are identifiable
SPHERE_1 = (PHANTOM_CENTER + np.array([-8.0, -5.0, 0.0]), 7.0)
SPHERE_2 = (PHANTOM_CENTER + np.array([8.0, 5.0, 2.0]), 4.0)
EDGE_RAMP = 3.0


def two_sphere_phantom(transform=None) -> ScalarVolume:
    """Soft two-sphere image; with ``transform`` T, returns the analytically
    warped image satisfying fixed(x) = moving(T x)."""
    pts = PHANTOM_GEOM.grid_physical()
    if transform is not None:
        pts = transform.inverse().apply(pts)
    img = np.zeros(PHANTOM_DIMS)
    for center, radius in (SPHERE_1, SPHERE_2):
        d = np.linalg.norm(pts - center, axis=-1)
        img += np.clip(radius - d, 0.0, EDGE_RAMP) / EDGE_RAMP
    return ScalarVolume(PHANTOM_GEOM, img)


def sphere_phantom(offset=(0.0, 0.0, 0.0), radius=10.0):
    """Single soft sphere plus its binary mask, shifted by ``offset`` mm."""
    center = PHANTOM_CENTER + np.asarray(offset, dtype=float)
    pts = PHANTOM_GEOM.grid_physical()
    d = np.linalg.norm(pts - center, axis=-1)
    img = np.clip(radius - d, 0.0, EDGE_RAMP) / EDGE_RAMP
    mask = (d <= radius).astype(np.uint8)
    return ScalarVolume(PHANTOM_GEOM, img), LabelVolume(PHANTOM_GEOM, mask)


def y_tube_trachea(dims=(20, 20, 30), split_k=20):
    """Trachea phantom: one stem above slice ``split_k``, two branches below.

    Walking down from the top, slice ``split_k - 1`` is the first with two
    components.
    """
    geom = VolumeGeometry(dims, (1, 1, 1), (0, 0, 0))
    data = np.zeros(dims, dtype=np.uint8)
    cx = dims[0] // 2
    cy = dims[1] // 2
    for k in range(dims[2]):
        if k >= split_k:
            data[cx - 1:cx + 2, cy - 1:cy + 2, k] = 1
        else:
            data[cx - 6:cx - 3, cy - 1:cy + 2, k] = 1
            data[cx + 4:cx + 7, cy - 1:cy + 2, k] = 1
    return LabelVolume(geom, data)


def random_binary(geometry, rng, density=0.15):
    return LabelVolume(geometry, (rng.random(geometry.dims) < density).astype(np.uint8))


def small_geometry(dims=(6, 6, 6), spacing=(1, 1, 1)):
    return VolumeGeometry(dims, spacing, (0, 0, 0))


def make_mini_dataset(root: Path, shifts=((2.0, -1.5, 1.0), (-1.5, 2.0, -1.0))) -> Path:
    """Write a tiny atlas + subjects dataset and its pipeline config.

    Anatomy: a heart blob, a Y-shaped trachea, two lung blobs, and two small
    lymph-node blobs; subjects are rigidly shifted copies of the atlas.
    Returns the config path.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    dims = (32, 32, 32)
    geom = VolumeGeometry(dims, (1.5, 1.5, 1.5), (0, 0, 0))
    center = np.asarray(geom.index_to_physical((15.5, 15.5, 15.5)))
    pts = geom.grid_physical()

    def blob(shift, c, r):
        return np.linalg.norm(pts - (center + np.asarray(shift) + np.asarray(c)), axis=-1) <= r

    def write_case(prefix, shift):
        s = np.asarray(shift, dtype=float)
        heart = blob(s, (-6, 0, -3), 6.0)
        kz = pts[..., 2] - (center[2] + s[2])
        xy = pts[..., :2] - (center[:2] + s[:2])
        stem = (np.linalg.norm(xy - np.array([8, 4]), axis=-1) <= 2.5) & (kz > 2) & (kz < 14)
        left = (np.linalg.norm(xy - np.array([4, 4]), axis=-1) <= 2.0) & (kz >= -10) & (kz <= 2)
        right = (np.linalg.norm(xy - np.array([12, 4]), axis=-1) <= 2.0) & (kz >= -10) & (kz <= 2)
        trachea = stem | left | right
        lungs = blob(s, (-12, 8, 0), 7.5) | blob(s, (10, -8, 0), 7.5)
        gt = blob(s, (0, 2, -2), 2.6) | blob(s, (3, -4, 4), 2.2)
        ct = 40 * heart + 30 * trachea - 500 * lungs + 100 * gt + 10.0
        ct = ct + 20 * np.tanh((pts[..., 0] - center[0] - s[0]) / 20)
        for name, arr in (("heart", heart), ("trachea", trachea), ("lungs", lungs), ("gt", gt)):
            write_nifti(LabelVolume(geom, arr.astype(np.uint8)), root / f"{prefix}_{name}.nii.gz")
        write_nifti(ScalarVolume(geom, ct.astype(np.float32)), root / f"{prefix}_ct.nii.gz")
        write_nifti(LabelVolume(geom, np.ones(dims, np.uint8)), root / f"{prefix}_body.nii.gz")

    write_case("atlas", (0, 0, 0))
    subjects = []
    for i, shift in enumerate(shifts, start=1):
        sid = f"s{i}"
        write_case(sid, shift)
        subjects.append({
            "id": sid,
            "ct": f"{sid}_ct.nii.gz",
            "gt": f"{sid}_gt.nii.gz",
            "lungs": f"{sid}_lungs.nii.gz",
            "fg": f"{sid}_body.nii.gz",
            "organs": {"heart": f"{sid}_heart.nii.gz", "trachea": f"{sid}_trachea.nii.gz"},
        })

    config = {
        "seed": 7,
        "output_dir": "out",
        "organ_selection": ["heart", "trachea"],
        "atlas_sigma_vox": 2.0,
        "crop_margin_mm": 3.0,
        "registration": {"levels": 2, "iterations_per_level": 40},
        "atlas": {
            "id": "atlas",
            "ct": "atlas_ct.nii.gz",
            "lungs": "atlas_lungs.nii.gz",
            "fg": "atlas_body.nii.gz",
            "organs": {"heart": "atlas_heart.nii.gz", "trachea": "atlas_trachea.nii.gz"},
        },
        "subjects": subjects,
    }
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(config, indent=1))
    return cfg_path
