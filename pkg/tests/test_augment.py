import math

import numpy as np
import pytest
from scipy import ndimage

from wmhseg.augment import (
    AugmentPolicy,
    SynthConfig,
    augment_dataset,
    hflip,
    rescale_and_pad,
    rescale_and_pad_mask,
    rotate,
    synth_generate,
    zscore_normalize,
)
from wmhseg.datamodel import Mask2D, Slice2D, SliceMeta, load_manifest, read_mask, read_slice


def meta(**kw):
    base = dict(dataset_name="SYNTH", patient_id="p0", volume_id="v0", slice_index=0)
    base.update(kw)
    return SliceMeta(**base)


def make_slice(pixels):
    return Slice2D(pixels=np.asarray(pixels, np.float32), meta=meta())


class TestZScore:
    def test_one_two_three(self):
        # oracle: direct formula, mean 2, population std sqrt(2/3)
        std = math.sqrt(((1 - 2) ** 2 + 0 + (3 - 2) ** 2) / 3)
        expected = np.array([(1 - 2) / std, 0.0, (3 - 2) / std])
        out = zscore_normalize(make_slice([[1, 2, 3]]))
        np.testing.assert_allclose(out.pixels[0], expected, atol=1e-6)
        np.testing.assert_allclose(out.pixels[0], [-1.2247, 0.0, 1.2247], atol=1e-4)

    def test_constant_maps_to_zero(self):
        out = zscore_normalize(make_slice(np.full((5, 5), 7.0)))
        assert np.array_equal(out.pixels, np.zeros((5, 5), np.float32))

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        slc = make_slice(rng.standard_normal((32, 32)))
        once = zscore_normalize(slc)
        twice = zscore_normalize(once)
        np.testing.assert_allclose(once.pixels, twice.pixels, atol=1e-6)

    def test_moments(self):
        rng = np.random.default_rng(1)
        out = zscore_normalize(make_slice(500 + 40 * rng.standard_normal((128, 128))))
        assert abs(out.pixels.mean()) < 1e-4
        assert abs(out.pixels.std() - 1.0) < 1e-3


class TestRescaleAndPad:
    def test_downscale_to_target(self):
        out = rescale_and_pad(make_slice(np.random.default_rng(0).random((256, 256))), 128)
        assert out.pixels.shape == (128, 128)
        assert np.count_nonzero(out.pixels) > 0

    def test_aspect_preserving_pad(self):
        # 132x256 at target 128: content 66x128, 31 zero rows above and below
        slc = make_slice(np.ones((132, 256)))
        out = rescale_and_pad(slc, 128)
        assert out.pixels.shape == (128, 128)
        assert np.all(out.pixels[:31] == 0)
        assert np.all(out.pixels[97:] == 0)
        assert np.all(out.pixels[31:97] != 0)

    def test_identity(self):
        pixels = np.random.default_rng(2).random((128, 128)).astype(np.float32)
        out = rescale_and_pad(make_slice(pixels), 128)
        assert np.array_equal(out.pixels, pixels)

    def test_mask_counterpart_binary(self):
        mask = Mask2D(values=(np.random.default_rng(3).random((64, 48)) > 0.7).astype(np.uint8))
        out = rescale_and_pad_mask(mask, 32)
        assert out.values.shape == (32, 32)
        assert set(np.unique(out.values)) <= {0, 1}


class TestGeometry:
    def _pair(self, h=16, w=16, seed=0):
        rng = np.random.default_rng(seed)
        slc = make_slice(rng.random((h, w)))
        mask = Mask2D(values=(rng.random((h, w)) > 0.8).astype(np.uint8))
        return slc, mask

    def test_hflip_involution(self):
        slc, mask = self._pair()
        s2, m2 = hflip(*hflip(slc, mask))
        assert np.array_equal(s2.pixels, slc.pixels)
        assert np.array_equal(m2.values, mask.values)

    def test_rotate_zero_identity(self):
        slc, mask = self._pair()
        s2, m2 = rotate(slc, mask, 0.0)
        assert np.array_equal(s2.pixels, slc.pixels)
        assert np.array_equal(m2.values, mask.values)

    def test_rotate_90_coordinate_map(self):
        # closed-form oracle: p' = center + R(90) @ (p - center) on (row, col)
        h = w = 15
        r, c = 3, 11
        mask = np.zeros((h, w), np.uint8)
        mask[r, c] = 1
        slc = make_slice(np.zeros((h, w)))
        _, rotated = rotate(slc, Mask2D(values=mask), 90.0)
        cy = cx = (h - 1) / 2
        expected_r = round(cy + 0 * (r - cy) - 1 * (c - cx))
        expected_c = round(cx + 1 * (r - cy) + 0 * (c - cx))
        hot = np.argwhere(rotated.values == 1)
        assert hot.shape == (1, 2)
        assert tuple(hot[0]) == (expected_r, expected_c)

    def test_rotation_preserves_lesion_count_approximately(self):
        rng = np.random.default_rng(5)
        for seed in range(5):
            mask = np.zeros((32, 32), np.uint8)
            cy, cx = rng.integers(10, 22, size=2)
            rr, cc = np.mgrid[0:32, 0:32]
            mask[(rr - cy) ** 2 + (cc - cx) ** 2 <= 16] = 1
            slc = make_slice(rng.random((32, 32)))
            _, rotated = rotate(slc, Mask2D(values=mask), 10.0)
            before, after = int(mask.sum()), int(rotated.values.sum())
            assert abs(after - before) <= 0.15 * before

    def test_hflip_preserves_lesion_count_exactly(self):
        slc, mask = self._pair(seed=7)
        _, flipped = hflip(slc, mask)
        assert flipped.values.sum() == mask.values.sum()

    def test_dimension_mismatch(self):
        slc = make_slice(np.zeros((8, 8)))
        mask = Mask2D(values=np.zeros((8, 9), np.uint8))
        with pytest.raises(ValueError):
            hflip(slc, mask)
        with pytest.raises(ValueError):
            rotate(slc, mask, 10.0)


class TestAugmentDataset:
    def test_counts_and_tags(self, desk_dataset, tmp_path):
        policy = AugmentPolicy(do_hflip=True, rotation_degrees=(-10.0, 10.0), target_size=32)
        out = augment_dataset(desk_dataset, policy, tmp_path / "aug")
        assert len(out) == 4 * len(desk_dataset)
        tags = {rec.meta.augmentation_tag for rec in out}
        assert tags == {"orig", "hflip", "rot-10", "rot+10"}
        reload = load_manifest(tmp_path / "aug" / "manifest.tsv")
        assert [r.id for r in reload] == [r.id for r in out]

    def test_empty_policy_originals_only(self, desk_dataset, tmp_path):
        policy = AugmentPolicy(do_hflip=False, rotation_degrees=(), target_size=32)
        out = augment_dataset(desk_dataset, policy, tmp_path / "aug")
        assert len(out) == len(desk_dataset)
        assert all(rec.meta.augmentation_tag == "orig" for rec in out)

    def test_deterministic_bytes(self, desk_dataset, tmp_path):
        policy = AugmentPolicy(do_hflip=True, rotation_degrees=(10.0,), target_size=32)
        a = augment_dataset(desk_dataset, policy, tmp_path / "a", seed=1)
        b = augment_dataset(desk_dataset, policy, tmp_path / "b", seed=1)
        for ra, rb in zip(a, b):
            assert (tmp_path / "a" / ra.image_path).read_bytes() == (tmp_path / "b" / rb.image_path).read_bytes()
            assert (tmp_path / "a" / ra.mask_path).read_bytes() == (tmp_path / "b" / rb.mask_path).read_bytes()

    def test_output_shape_is_target(self, desk_dataset, tmp_path):
        policy = AugmentPolicy(do_hflip=False, rotation_degrees=(), target_size=64)
        out = augment_dataset(desk_dataset, policy, tmp_path / "aug")
        rec = out.records[0]
        assert read_slice(out.image_file(rec)).pixels.shape == (64, 64)
        assert read_mask(out.mask_file(rec)).values.shape == (64, 64)

    def test_policy_validation(self):
        with pytest.raises(ValueError):
            AugmentPolicy(target_size=100)  # not a power of two
        with pytest.raises(ValueError):
            AugmentPolicy(rotation_degrees=(200.0,))


class TestSynthGenerate:
    def test_counts_and_size(self, tmp_path):
        cfg = SynthConfig(n_patients=4, slices_per_patient=8, seed=0)
        manifest = synth_generate(cfg, tmp_path)
        assert len(manifest) == 32
        rec = manifest.records[0]
        slc = read_slice(manifest.image_file(rec))
        msk = read_mask(manifest.mask_file(rec))
        assert slc.pixels.shape == (128, 128)
        assert msk.values.shape == (128, 128)

    def test_zero_lesions_empty_masks(self, tmp_path):
        cfg = SynthConfig(n_patients=2, slices_per_patient=2, lesion_count_range=(0, 0), seed=1)
        manifest = synth_generate(cfg, tmp_path)
        for rec in manifest:
            assert read_mask(manifest.mask_file(rec)).values.sum() == 0

    def test_jitter_writes_rater_pairs_within_bound(self, tmp_path):
        jitter = 2.0
        cfg = SynthConfig(
            n_patients=2, slices_per_patient=3, image_size=64,
            lesion_count_range=(1, 3), lesion_radius_range=(2.0, 5.0),
            ambiguity_jitter=jitter, seed=2,
        )
        manifest = synth_generate(cfg, tmp_path)
        assert len(manifest) == 2 * 2 * 3
        by_image = {}
        for rec in manifest:
            by_image.setdefault(rec.image_path, []).append(rec)
        checked_any_diff = False
        for recs in by_image.values():
            assert len(recs) == 2
            m1 = read_mask(manifest.mask_file(recs[0])).values
            m2 = read_mask(manifest.mask_file(recs[1])).values
            diff = m1 != m2
            if not diff.any():
                continue
            checked_any_diff = True
            # distance-transform oracle: differing pixels lie within
            # jitter (+1 px discretization) of rater-0's boundary
            boundary = m1 ^ ndimage.binary_erosion(m1).astype(np.uint8)
            if not boundary.any():
                boundary = m1  # lesion smaller than the erosion kernel
            dist = ndimage.distance_transform_edt(~boundary.astype(bool))
            assert dist[diff].max() <= jitter + 1.0
        assert checked_any_diff

    def test_deterministic(self, tmp_path):
        cfg = SynthConfig(n_patients=2, slices_per_patient=2, seed=9)
        a = synth_generate(cfg, tmp_path / "a")
        b = synth_generate(cfg, tmp_path / "b")
        for ra, rb in zip(a, b):
            assert (tmp_path / "a" / ra.image_path).read_bytes() == (tmp_path / "b" / rb.image_path).read_bytes()

    def test_images_are_normalized(self, tmp_path):
        cfg = SynthConfig(n_patients=1, slices_per_patient=2, seed=4)
        manifest = synth_generate(cfg, tmp_path)
        slc = read_slice(manifest.image_file(manifest.records[0]))
        assert abs(slc.pixels.mean()) < 1e-4
        assert abs(slc.pixels.std() - 1.0) < 1e-3

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SynthConfig(lesion_radius_range=(0.5, 2.0))
        with pytest.raises(ValueError):
            SynthConfig(n_patients=0)
        with pytest.raises(ValueError):
            SynthConfig(ambiguity_jitter=-1.0)
