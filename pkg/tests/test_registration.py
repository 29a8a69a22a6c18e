import numpy as np
import pytest

from nodekit.errors import DataError, EmptyMaskError, GeometryError
from nodekit.registration import (
    ATLAS_TO_SUBJECT,
    SUBJECT_TO_ATLAS,
    AffineTransform,
    DisplacementField,
    RegistrationConfig,
    load_affine,
    load_field,
    masks_to_feature,
    register_affine,
    register_rigid,
    register_variational,
    rigid_from_params,
    rotate_field_into,
    save_affine,
    save_field,
    signed_distance,
    warp,
)
from nodekit.volume import LabelVolume, ScalarVolume, VolumeGeometry

from oracles import brute_dice, brute_signed_distance
from synth import PHANTOM_CENTER, sphere_phantom, two_sphere_phantom


def geom(dims=(8, 8, 8), spacing=(1, 1, 1)):
    return VolumeGeometry(dims, spacing, (0, 0, 0))


class TestAffineTransform:
    def test_last_row_enforced(self):
        m = np.eye(4)
        m[3, 0] = 1.0
        with pytest.raises(ValueError):
            AffineTransform(m)

    def test_rigid_requires_rotation(self):
        m = np.eye(4)
        m[0, 0] = 2.0
        with pytest.raises(ValueError):
            AffineTransform(m, "rigid")

    def test_apply_and_inverse(self, rng):
        t = rigid_from_params((0.1, -0.2, 0.3), (5, -3, 2), (10, 10, 10))
        pts = rng.normal(size=(20, 3))
        assert np.allclose(t.inverse().apply(t.apply(pts)), pts, atol=1e-10)

    def test_text_round_trip(self, tmp_path):
        t = rigid_from_params((0.05, 0.1, -0.2), (1, 2, 3), (4, 5, 6))
        path = tmp_path / "t.txt"
        save_affine(t, path)
        back = load_affine(path)
        assert back.kind == "rigid"
        assert np.allclose(back.matrix, t.matrix, atol=1e-12)

    def test_kind_inferred_without_comment(self, tmp_path):
        t = rigid_from_params((0, 0, 0.3), (1, 0, 0))
        path = tmp_path / "t.txt"
        with open(path, "w") as f:
            for row in t.matrix:
                f.write(" ".join(str(v) for v in row) + "\n")
        assert load_affine(path).kind == "rigid"


class TestSignedDistance:
    def test_single_voxel_against_brute_force(self):
        g = geom((7, 7, 7))
        mask = np.zeros((7, 7, 7), dtype=np.uint8)
        mask[3, 3, 3] = 1
        sd = signed_distance(LabelVolume(g, mask))
        assert sd.data[3, 3, 3] == pytest.approx(-0.5)
        assert sd.data[4, 3, 3] == pytest.approx(1.0)
        ref = brute_signed_distance(mask, (1, 1, 1))
        assert np.allclose(sd.data, ref, atol=1e-9)

    def test_random_masks_against_brute_force(self, rng):
        g = VolumeGeometry((6, 6, 6), (1.0, 1.5, 2.0), (0, 0, 0))
        for _ in range(3):
            mask = (rng.random((6, 6, 6)) < 0.2).astype(np.uint8)
            if not mask.any():
                mask[2, 2, 2] = 1
            sd = signed_distance(LabelVolume(g, mask))
            ref = brute_signed_distance(mask, (1.0, 1.5, 2.0))
            assert np.allclose(sd.data, ref, atol=1e-9)

    def test_full_mask_is_all_inside_clamp(self):
        g = geom((5, 5, 5))
        sd = signed_distance(LabelVolume(g, np.ones((5, 5, 5), np.uint8)))
        assert np.all(sd.data == -30.0)

    def test_clamp(self):
        g = VolumeGeometry((80, 5, 5), (1, 1, 1), (0, 0, 0))
        mask = np.zeros((80, 5, 5), dtype=np.uint8)
        mask[0, 2, 2] = 1
        sd = signed_distance(LabelVolume(g, mask))
        assert sd.data.max() == 30.0

    def test_empty_mask_raises(self):
        with pytest.raises(EmptyMaskError):
            signed_distance(LabelVolume(geom((4, 4, 4)), np.zeros((4, 4, 4), np.uint8)))

    def test_organ_selection(self):
        g = geom((6, 6, 6))
        a = np.zeros((6, 6, 6), np.uint8)
        a[1, 1, 1] = 1
        b = np.zeros((6, 6, 6), np.uint8)
        b[4, 4, 4] = 1
        masks = {"heart": LabelVolume(g, a), "aorta": LabelVolume(g, b)}
        feat = masks_to_feature(masks, select=("heart",))
        assert feat.data[1, 1, 1] < 0 and feat.data[4, 4, 4] > 0
        with pytest.raises(ValueError):
            masks_to_feature(masks, select=("esophagus",))
        with pytest.raises(ValueError):
            masks_to_feature(masks, select=())


class TestLinearRegistration:
    def test_identity_inputs(self):
        fixed = two_sphere_phantom()
        rec = register_rigid(fixed, fixed)
        assert np.linalg.norm(rec.translation) < 0.1
        assert rec.rotation_angle_deg() < 0.2

    def test_translation_recovery(self):
        fixed = two_sphere_phantom()
        t_true = rigid_from_params((0, 0, 0), (5, -3, 2), PHANTOM_CENTER)
        moving = two_sphere_phantom(t_true)
        rec = register_rigid(fixed, moving)
        assert np.linalg.norm(rec.translation - t_true.translation) < 0.5

    def test_rotation_recovery(self):
        fixed = two_sphere_phantom()
        t_true = rigid_from_params((0, 0, np.deg2rad(10)), (0, 0, 0), PHANTOM_CENTER)
        moving = two_sphere_phantom(t_true)
        rec = register_rigid(fixed, moving)
        assert abs(rec.rotation_angle_deg() - 10.0) < 1.0

    def test_constant_feature_rejected(self):
        g = geom()
        flat = ScalarVolume(g, np.zeros((8, 8, 8)))
        with pytest.raises(DataError):
            register_rigid(flat, flat)

    def test_affine_never_worse_than_init(self):
        fixed = two_sphere_phantom()
        t_true = rigid_from_params((0, 0, 0), (3, 1, -2), PHANTOM_CENTER)
        moving = two_sphere_phantom(t_true)
        init = AffineTransform(t_true.matrix, "affine")  # exact solution

        def mse(t):
            w = warp(moving, affine=t, field=DisplacementField.zero(fixed.geometry))
            return float(np.mean((w.data - fixed.data) ** 2))

        rec = register_affine(fixed, moving, init)
        assert mse(rec) <= mse(init) + 1e-12

    def test_affine_scale_recovery(self):
        fixed = two_sphere_phantom()
        m = np.eye(4)
        m[0, 0] = 1.2
        m[:3, 3] = PHANTOM_CENTER - m[:3, :3] @ PHANTOM_CENTER
        t_true = AffineTransform(m, "affine")
        moving = two_sphere_phantom(t_true)
        rec = register_affine(fixed, moving, AffineTransform.identity("affine"))
        assert abs(rec.linear[0, 0] - 1.2) < 0.05

    def test_affine_identity_inputs(self):
        fixed = two_sphere_phantom()
        rec = register_affine(fixed, fixed, AffineTransform.identity("affine"))
        assert np.allclose(rec.linear, np.eye(3), atol=0.01)
        assert np.linalg.norm(rec.translation) < 0.3


class TestVariational:
    def test_identity_inputs_give_near_zero_field(self):
        img, _ = sphere_phantom()
        field = register_variational(img, img)
        assert field.max_magnitude() < 0.5

    def test_sphere_shift_recovers_overlap(self):
        fixed_img, fixed_mask = sphere_phantom()
        moving_img, moving_mask = sphere_phantom(offset=(4.0, 0.0, 0.0))
        pre = brute_dice(fixed_mask.data, moving_mask.data)
        field = register_variational(fixed_img, moving_img)
        warped = warp(moving_mask, field=field)
        post = brute_dice(fixed_mask.data, warped.data)
        assert pre < 0.80
        assert post >= 0.90

    def test_mse_never_increases(self, rng):
        g = geom((12, 12, 12))
        from scipy.ndimage import gaussian_filter

        a = ScalarVolume(g, gaussian_filter(rng.normal(size=(12, 12, 12)), 1.5))
        b = ScalarVolume(g, gaussian_filter(rng.normal(size=(12, 12, 12)), 1.5))
        field = register_variational(a, b, RegistrationConfig(levels=2, iterations_per_level=30))
        warped = warp(b, field=field)
        assert np.mean((a.data - warped.data) ** 2) <= np.mean((a.data - b.data) ** 2)

    def test_misaligned_inputs_rejected(self):
        a = ScalarVolume(geom((8, 8, 8)), np.zeros((8, 8, 8)))
        b = ScalarVolume(VolumeGeometry((8, 8, 8), (2, 2, 2), (0, 0, 0)), np.zeros((8, 8, 8)))
        with pytest.raises(GeometryError):
            register_variational(a, b)


class TestWarp:
    def test_requires_a_transform(self):
        vol = ScalarVolume(geom(), np.zeros((8, 8, 8)))
        with pytest.raises(ValueError):
            warp(vol)

    def test_identity_transforms_are_identity(self, rng):
        g = geom()
        vol = ScalarVolume(g, rng.normal(size=(8, 8, 8)))
        out = warp(vol, affine=AffineTransform.identity(), field=DisplacementField.zero(g))
        assert np.allclose(out.data, vol.data, atol=1e-6)

    def test_translation_shifts_ramp(self):
        g = geom((10, 4, 4))
        ramp = np.ascontiguousarray(
            np.broadcast_to(np.arange(10, dtype=float)[:, None, None], (10, 4, 4))
        )
        vol = ScalarVolume(g, ramp)
        t = rigid_from_params((0, 0, 0), (2.0, 0, 0))
        out = warp(vol, affine=t)
        # interior voxels see ramp(x + 2)
        assert np.allclose(out.data[:8], ramp[:8] + 2.0, atol=1e-9)

    def test_label_warp_preserves_label_set(self, rng):
        g = geom()
        labels = LabelVolume(g, rng.integers(0, 4, (8, 8, 8)).astype(np.int32))
        t = rigid_from_params((0, 0, 0.1), (1.2, -0.3, 0.4), (4, 4, 4))
        out = warp(labels, affine=t)
        assert set(np.unique(out.data)) <= set(np.unique(labels.data))

    def test_label_linear_mode_rejected(self):
        g = geom()
        labels = LabelVolume(g, np.zeros((8, 8, 8), np.uint8))
        with pytest.raises(ValueError):
            warp(labels, affine=AffineTransform.identity(), mode="linear")

    def test_rotate_field_matches_composition(self, rng):
        # warp(vol, A, R@u) must equal sampling vol at A(x + u(x))
        g = geom((10, 10, 10))
        vol = ScalarVolume(g, np.moveaxis(
            np.broadcast_to(np.sin(np.arange(10) / 3.0)[:, None, None], (10, 10, 10)), 0, 0
        ).copy())
        affine = rigid_from_params((0, 0, 0.2), (1.0, 0.5, -0.2), (5, 5, 5))
        u = rng.normal(0, 0.5, (10, 10, 10, 3))
        field = DisplacementField(g, u, ATLAS_TO_SUBJECT)
        composed = warp(vol, affine=affine, field=rotate_field_into(affine, field))
        pts = g.grid_physical()
        expected_pos = affine.apply(pts + u)
        from scipy.ndimage import map_coordinates

        idx = vol.geometry.physical_to_index(expected_pos)
        expected = map_coordinates(vol.data, np.moveaxis(idx, -1, 0), order=1,
                                   mode="constant", cval=0.0)
        assert np.allclose(composed.data, expected, atol=1e-9)


class TestFieldSerialization:
    def test_round_trip(self, tmp_path, rng):
        g = VolumeGeometry((6, 5, 4), (1, 1.5, 2), (2, -1, 0.5))
        field = DisplacementField(g, rng.normal(size=(6, 5, 4, 3)).astype(np.float32),
                                  SUBJECT_TO_ATLAS)
        path = tmp_path / "f.nii.gz"
        save_field(field, path)
        back = load_field(path)
        assert back.direction_tag == SUBJECT_TO_ATLAS
        assert np.allclose(back.vectors, field.vectors, atol=1e-6)
        assert np.allclose(back.geometry.spacing, g.spacing)

    def test_plain_volume_rejected(self, tmp_path):
        from nodekit.volume import ScalarVolume, write_nifti

        path = tmp_path / "v.nii"
        write_nifti(ScalarVolume(geom((4, 4, 4)), np.zeros((4, 4, 4))), path)
        with pytest.raises(GeometryError):
            load_field(path)
