import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kneeuda import kernels
from kneeuda.errors import LocalizationError
from kneeuda.preprocess import (
    AugmentConfig,
    augment,
    crop_roi,
    dsc,
    locate_roi,
    resize_volume,
    sample_rng,
    zscore_normalize,
)
from kneeuda.volumes import SegmentationMask, VolumeSample


def make_sample(voxels, spacing=(1.0, 1.0, 1.0), mask=None, sample_id="t0"):
    return VolumeSample(voxels=voxels, spacing=spacing, domain="source",
                        sample_id=sample_id, mask=mask)


def smooth_volume(shape, seed=0):
    g = np.meshgrid(*[np.linspace(0, 1, s) for s in shape], indexing="ij")
    return (np.sin(3 * g[0]) + np.cos(2 * g[1]) * g[2]).astype(np.float32)


class TestResize:
    def test_shape_and_spacing_rescale(self):
        v = make_sample(np.zeros((256, 256, 100), dtype=np.float32),
                        spacing=(0.5, 0.5, 1.0))
        out = resize_volume(v, (384, 384, 160))
        assert out.shape == (384, 384, 160)
        assert out.spacing == pytest.approx((0.5 * 256 / 384, 0.5 * 256 / 384,
                                             1.0 * 100 / 160))

    def test_identity_when_target_equals_input(self):
        v = make_sample(smooth_volume((12, 10, 8)))
        out = resize_volume(v, (12, 10, 8))
        np.testing.assert_array_equal(out.voxels, v.voxels)

    def test_constant_volume_stays_constant(self):
        v = make_sample(np.full((9, 7, 5), 3.25, dtype=np.float32))
        out = resize_volume(v, (13, 11, 6))
        np.testing.assert_allclose(out.voxels, 3.25, rtol=1e-6)

    def test_nonpositive_target_rejected(self):
        v = make_sample(np.zeros((4, 4, 4), dtype=np.float32))
        with pytest.raises(ValueError):
            resize_volume(v, (0, 4, 4))

    def test_mask_resized_nearest_stays_in_vocabulary(self):
        labels = np.zeros((10, 10, 10), dtype=np.uint16)
        labels[2:5, 2:5, 2:5] = 3
        v = make_sample(smooth_volume((10, 10, 10)), mask=SegmentationMask(labels))
        out = resize_volume(v, (15, 15, 15))
        assert set(np.unique(out.mask.labels)) <= {0, 3}

    def test_round_trip_rms_below_5_percent(self):
        vol = smooth_volume((24, 24, 16))
        v = make_sample(vol)
        back = resize_volume(resize_volume(v, (36, 36, 24)), (24, 24, 16))
        rms = np.sqrt(np.mean((back.voxels - vol) ** 2))
        dyn = vol.max() - vol.min()
        assert rms < 0.05 * dyn


class TestLocateRoi:
    def test_single_voxel_clamped_to_corner_limit(self):
        labels = np.zeros((384, 384, 160), dtype=np.uint16)
        labels[10, 10, 10] = 1
        assert locate_roi(SegmentationMask(labels), (256, 256, 128)) == (128, 128, 64)

    def test_full_mask_gives_volume_center(self):
        labels = np.ones((384, 384, 160), dtype=np.uint16)
        assert locate_roi(SegmentationMask(labels), (256, 256, 128)) == (192, 192, 80)

    def test_two_opposite_compartments_midpoint(self):
        labels = np.zeros((40, 40, 40), dtype=np.uint16)
        labels[0, 0, 0] = 1
        labels[39, 39, 39] = 2
        # union box center (0+39+1)//2 = 20, crop 16 -> clamp range [8, 32]
        assert locate_roi(SegmentationMask(labels), (16, 16, 16)) == (20, 20, 20)

    def test_all_background_errors(self):
        with pytest.raises(LocalizationError):
            locate_roi(SegmentationMask(np.zeros((8, 8, 8), dtype=np.uint16)))


class TestCropRoi:
    def test_interior_crop_no_padding(self):
        vol = np.random.default_rng(0).random((384, 384, 160)).astype(np.float32)
        out = crop_roi(make_sample(vol), (192, 192, 80), (256, 256, 128))
        assert out.shape == (256, 256, 128)
        np.testing.assert_array_equal(out.voxels, vol[64:320, 64:320, 16:144])

    def test_corner_center_zero_pads(self):
        vol = np.ones((40, 40, 20), dtype=np.float32)
        out = crop_roi(make_sample(vol), (0, 0, 0), (16, 16, 8))
        assert out.shape == (16, 16, 8)
        assert out.voxels[0, 0, 0] == 0.0  # padded region
        assert out.voxels[-1, -1, -1] == 1.0

    def test_identity_crop(self):
        vol = np.random.default_rng(1).random((16, 16, 8)).astype(np.float32)
        out = crop_roi(make_sample(vol), (8, 8, 4), (16, 16, 8))
        np.testing.assert_array_equal(out.voxels, vol)

    @given(st.tuples(st.integers(-5, 45), st.integers(-5, 45), st.integers(-5, 25)))
    @settings(max_examples=25, deadline=None)
    def test_output_shape_always_crop_shape(self, center):
        vol = np.ones((24, 24, 12), dtype=np.float32)
        out = crop_roi(make_sample(vol), center, (16, 16, 8))
        assert out.shape == (16, 16, 8)


class TestAugment:
    def test_probability_zero_is_bitwise_identity(self):
        vol = np.random.default_rng(0).random((12, 12, 8)).astype(np.float32)
        cfg = AugmentConfig(per_transform_probability=0.0)
        out = augment(make_sample(vol), cfg, sample_rng(0, "a"))
        np.testing.assert_array_equal(out.voxels, vol)

    def test_same_rng_state_bit_identical(self):
        vol = np.random.default_rng(1).random((12, 12, 8)).astype(np.float32)
        cfg = AugmentConfig(per_transform_probability=1.0)
        a = augment(make_sample(vol), cfg, sample_rng(3, "x"))
        b = augment(make_sample(vol), cfg, sample_rng(3, "x"))
        np.testing.assert_array_equal(a.voxels, b.voxels)

    def test_output_shape_preserved(self):
        vol = np.zeros((14, 10, 8), dtype=np.float32)
        cfg = AugmentConfig(per_transform_probability=1.0)
        out = augment(make_sample(vol), cfg, sample_rng(0, "s"))
        assert out.shape == (14, 10, 8)

    def test_intensity_factor_sampler_statistics(self):
        rng = sample_rng(0, "stats")
        cfg = AugmentConfig()
        draws = np.array([rng.uniform(*cfg.intensity_scale_range)
                          for _ in range(10_000)])
        assert draws.min() >= 0.8 and draws.max() <= 1.2
        assert abs(draws.mean() - 1.0) < 0.01

    def test_bad_config_rejected(self):
        with pytest.raises(ValueError):
            AugmentConfig(intensity_scale_range=(1.2, 0.8))
        with pytest.raises(ValueError):
            AugmentConfig(per_transform_probability=1.5)


class TestDsc:
    def make(self, labels):
        return SegmentationMask(np.asarray(labels, dtype=np.uint16))

    def test_identical_nonempty_is_one(self):
        a = self.make(np.ones((4, 4, 4)))
        assert dsc(a, a, 1) == 1.0

    def test_disjoint_is_zero(self):
        x = np.zeros((4, 4, 4)); x[0, 0, 0] = 1
        y = np.zeros((4, 4, 4)); y[1, 1, 1] = 1
        assert dsc(self.make(x), self.make(y), 1) == 0.0

    def test_half_overlap_fixture(self):
        # |A| = |B| = 4, overlap 2 -> 2*2/8 = 0.5
        x = np.zeros((4, 4, 4)); x[0, 0, :4] = 1
        y = np.zeros((4, 4, 4)); y[0, 0, 2:4] = 1; y[0, 1, 0:2] = 1
        assert dsc(self.make(x), self.make(y), 1) == 0.5

    def test_empty_vs_empty_is_one(self):
        z = self.make(np.zeros((3, 3, 3)))
        assert dsc(z, z, 5) == 1.0

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        a = self.make(rng.integers(0, 3, (6, 6, 6)))
        b = self.make(rng.integers(0, 3, (6, 6, 6)))
        for comp in (1, 2):
            assert dsc(a, b, comp) == dsc(b, a, comp)

    def test_shape_mismatch_errors(self):
        with pytest.raises(ValueError):
            dsc(self.make(np.zeros((3, 3, 3))), self.make(np.zeros((4, 4, 4))), 1)


class TestKernels:
    def test_numba_and_numpy_backends_agree(self):
        vol = np.random.default_rng(0).random((14, 12, 10)).astype(np.float32)
        m, off = kernels.rotation_transform(vol.shape, 7.5)
        a = kernels.affine_sample(vol, m, off, vol.shape, order=1, backend="numba")
        b = kernels.affine_sample(vol, m, off, vol.shape, order=1, backend="numpy")
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_nearest_backends_agree(self):
        vol = np.random.default_rng(1).integers(0, 6, (14, 12, 10)).astype(np.uint16)
        m, off = kernels.resize_transform(vol.shape, (20, 18, 12))
        a = kernels.affine_sample(vol, m, off, (20, 18, 12), order=0, backend="numba")
        b = kernels.affine_sample(vol, m, off, (20, 18, 12), order=0, backend="numpy")
        np.testing.assert_array_equal(a, b)

    def test_env_flag_selects_numpy(self, monkeypatch):
        monkeypatch.setenv("KNEEUDA_NO_NUMBA", "1")
        assert not kernels.numba_enabled()
        monkeypatch.delenv("KNEEUDA_NO_NUMBA")
        assert kernels.numba_enabled()

    def test_rotation_by_zero_is_identity(self):
        vol = np.random.default_rng(2).random((8, 8, 6)).astype(np.float32)
        m, off = kernels.rotation_transform(vol.shape, 0.0)
        out = kernels.affine_sample(vol, m, off, vol.shape, order=1)
        np.testing.assert_allclose(out, vol, atol=1e-6)


def test_zscore_normalize():
    vol = np.random.default_rng(0).random((10, 10, 10)).astype(np.float32) * 50 + 7
    out = zscore_normalize(make_sample(vol))
    assert abs(float(out.voxels.mean())) < 1e-5
    assert abs(float(out.voxels.std()) - 1.0) < 1e-4
