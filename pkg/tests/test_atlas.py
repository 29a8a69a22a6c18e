import numpy as np
import pytest

from nodekit.atlas import (
    ProbAtlas,
    build_distance_prior,
    build_prob_atlas,
    find_carina,
    transfer_priors,
)
from nodekit.errors import DegenerateIntensityError, EmptyMaskError, LandmarkError
from nodekit.registration import (
    ATLAS_TO_SUBJECT,
    SUBJECT_TO_ATLAS,
    AffineTransform,
    DisplacementField,
    rigid_from_params,
)
from nodekit.volume import LabelVolume, ScalarVolume, VolumeGeometry

from synth import y_tube_trachea


def geom(dims=(12, 12, 12), spacing=(1, 1, 1)):
    return VolumeGeometry(dims, spacing, (0, 0, 0))


def box_mask(g, lo, hi):
    data = np.zeros(g.dims, dtype=np.uint8)
    data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = 1
    return LabelVolume(g, data)


class TestBuildProbAtlas:
    def test_sigma_zero_limit_reproduces_single_mask(self):
        g = geom()
        mask = box_mask(g, (3, 3, 3), (7, 7, 7))
        atlas = build_prob_atlas([mask], sigma_vox=1e-6)
        assert np.array_equal(atlas.vol.data, mask.data.astype(float))

    def test_two_mask_average_before_smoothing(self):
        g = geom()
        a = box_mask(g, (2, 2, 2), (5, 5, 5))
        b = box_mask(g, (4, 4, 4), (7, 7, 7))
        atlas = build_prob_atlas([a, b], sigma_vox=1e-6)
        overlap = (a.data > 0) & (b.data > 0)
        either = ((a.data > 0) ^ (b.data > 0))
        assert np.all(atlas.vol.data[overlap] == 1.0)
        assert np.all(atlas.vol.data[either] == 0.5)

    def test_output_range_is_exactly_unit_interval(self, rng):
        g = geom()
        masks = [
            LabelVolume(g, (rng.random(g.dims) < 0.1).astype(np.uint8)) for _ in range(4)
        ]
        if not any(m.data.any() for m in masks):
            pytest.skip("degenerate draw")
        atlas = build_prob_atlas(masks, sigma_vox=1.5)
        assert atlas.vol.data.min() == 0.0
        assert atlas.vol.data.max() == pytest.approx(1.0, abs=1e-12)

    def test_permutation_invariance(self, rng):
        g = geom()
        masks = [
            LabelVolume(g, (rng.random(g.dims) < 0.15).astype(np.uint8)) for _ in range(5)
        ]
        a = build_prob_atlas(masks, sigma_vox=2.0)
        order = rng.permutation(5)
        b = build_prob_atlas([masks[i] for i in order], sigma_vox=2.0)
        assert np.allclose(a.vol.data, b.vol.data, atol=1e-12)

    def test_smoothing_preserves_mass_interior(self):
        g = geom((20, 20, 20))
        mask = box_mask(g, (8, 8, 8), (12, 12, 12))
        from scipy.ndimage import gaussian_filter

        smoothed = gaussian_filter(mask.data.astype(float), 2.0, mode="constant")
        assert smoothed.sum() == pytest.approx(float(mask.data.sum()), rel=0.01)

    def test_empty_inputs(self):
        g = geom()
        with pytest.raises(ValueError):
            build_prob_atlas([], sigma_vox=1.0)
        with pytest.raises(DegenerateIntensityError):
            build_prob_atlas([LabelVolume(g, np.zeros(g.dims, np.uint8))], sigma_vox=1.0)


class TestFindCarina:
    def test_split_slice_and_symmetry(self):
        trachea = y_tube_trachea(split_k=20)
        carina = find_carina(trachea)
        # first slice below the stem (k=19) is the first with two components
        assert carina[2] == pytest.approx(19.0)
        # branches are symmetric around the stem center in x
        assert carina[0] == pytest.approx(10.0, abs=0.5)

    def test_straight_tube_raises(self):
        g = VolumeGeometry((10, 10, 20), (1, 1, 1), (0, 0, 0))
        data = np.zeros(g.dims, dtype=np.uint8)
        data[4:7, 4:7, :] = 1
        with pytest.raises(LandmarkError):
            find_carina(LabelVolume(g, data))

    def test_empty_mask_raises(self):
        g = geom()
        with pytest.raises(EmptyMaskError):
            find_carina(LabelVolume(g, np.zeros(g.dims, np.uint8)))

    def test_walks_from_physical_superior_side(self):
        # flipping the k axis direction must not change the physical answer
        trachea = y_tube_trachea(split_k=20)
        flipped_dir = np.diag([1.0, 1.0, -1.0])
        g = trachea.geometry
        flipped = LabelVolume(
            VolumeGeometry(g.dims, g.spacing, g.origin, flipped_dir),
            trachea.data[:, :, ::-1].copy(),
        )
        carina = find_carina(flipped)
        # stem occupies flipped slices 0..9 (z in [-9, 0]); first split is slice 10
        assert carina[2] == pytest.approx(-10.0)


class TestDistancePrior:
    def test_zero_at_reference_and_arithmetic(self):
        g = geom((21, 21, 21))
        region = box_mask(g, (0, 0, 0), (21, 21, 21))
        ref = (10.0, 10.0, 10.0)
        prior = build_distance_prior(g, ref, region)
        assert prior.vol.data[10, 10, 10] == 0.0
        # max in-region distance is the corner: sqrt(3*10^2)
        max_dist = np.sqrt(3) * 10.0
        assert prior.vol.data[10, 10, 0] == pytest.approx(10.0 / max_dist)
        assert prior.vol.data.max() == pytest.approx(1.0)

    def test_value_is_quarter_at_ten_over_forty(self):
        g = VolumeGeometry((41, 5, 5), (1, 1, 1), (0, 0, 0))
        region = box_mask(g, (0, 0, 0), (41, 5, 5))
        prior = build_distance_prior(g, (0.0, 2.0, 2.0), region)
        assert prior.vol.data[10, 2, 2] == pytest.approx(10.0 / prior_max(g, region, (0, 2, 2)))

    def test_clamped_to_one_outside_region(self):
        g = geom((30, 5, 5))
        region = box_mask(g, (0, 0, 0), (10, 5, 5))
        prior = build_distance_prior(g, (0.0, 2.0, 2.0), region)
        assert prior.vol.data.max() == 1.0
        assert np.all(prior.vol.data <= 1.0)

    def test_reference_outside_grid_rejected(self):
        g = geom()
        region = box_mask(g, (0, 0, 0), g.dims)
        with pytest.raises(ValueError):
            build_distance_prior(g, (100.0, 0.0, 0.0), region)

    def test_radial_monotonicity(self, rng):
        g = geom((16, 16, 16))
        region = box_mask(g, (0, 0, 0), g.dims)
        for _ in range(5):
            ref = rng.uniform(2, 13, 3)
            prior = build_distance_prior(g, ref, region)
            snapped = np.asarray(prior.reference_point)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            radii = np.linspace(0, 6, 20)
            pts = snapped + radii[:, None] * direction
            idx = np.rint(g.physical_to_index(pts)).astype(int)
            ok = np.all((idx >= 0) & (idx < np.asarray(g.dims)), axis=1)
            vals = prior.vol.data[tuple(idx[ok].T)]
            assert np.all(np.diff(vals) >= -1e-12)


def prior_max(g, region, ref):
    pts = g.grid_physical()
    dist = np.linalg.norm(pts - np.asarray(ref, float), axis=-1)
    return float(dist[region.data > 0].max())


class TestTransferPriors:
    def _priors(self, g):
        data = np.zeros(g.dims)
        data[5, 5, 5] = 1.0
        from scipy.ndimage import gaussian_filter

        blurred = gaussian_filter(data, 1.5)
        blurred /= blurred.max()
        pa = ProbAtlas(ScalarVolume(g, blurred), 1.5, 1)
        region = box_mask(g, (0, 0, 0), g.dims)
        dm = build_distance_prior(g, (5.0, 5.0, 5.0), region)
        return pa, dm

    def test_identity_transfer(self):
        g = geom()
        pa, dm = self._priors(g)
        field = DisplacementField.zero(g, ATLAS_TO_SUBJECT)
        pa_s, dm_s = transfer_priors(pa, dm, AffineTransform.identity(), field, g)
        assert np.allclose(pa_s.data, pa.vol.data, atol=1e-6)
        assert np.allclose(dm_s.data, dm.vol.data, atol=1e-6)

    def test_translation_moves_reference(self):
        g = geom((16, 16, 16))
        pa, dm = self._priors(g)
        # subject grid shifted: transform maps subject coords -> atlas coords
        shift = np.array([2.0, 1.0, -1.0])
        t = rigid_from_params((0, 0, 0), shift)
        field = DisplacementField.zero(g, ATLAS_TO_SUBJECT)
        pa_s, dm_s = transfer_priors(pa, dm, t, field, g)
        ref = np.asarray(dm.reference_point)
        moved = np.rint(g.physical_to_index(ref - shift)).astype(int)
        assert dm_s.data[tuple(moved)] == pytest.approx(0.0, abs=0.05)
        assert pa_s.data.min() >= 0 and pa_s.data.max() <= 1

    def test_wrong_direction_tag_rejected(self):
        g = geom()
        pa, dm = self._priors(g)
        field = DisplacementField.zero(g, SUBJECT_TO_ATLAS)
        with pytest.raises(ValueError):
            transfer_priors(pa, dm, AffineTransform.identity(), field, g)

    def test_geometry_mismatch_rejected(self):
        g = geom()
        other = VolumeGeometry((12, 12, 12), (2, 2, 2), (0, 0, 0))
        pa, dm = self._priors(g)
        field = DisplacementField.zero(g, ATLAS_TO_SUBJECT)
        with pytest.raises(ValueError):
            transfer_priors(pa, dm, AffineTransform.identity(), field, other)
