"""Geometry chain: resample -> crop -> normalize -> standardize, and its inverse.

Shape oracles were computed by hand from the rounding rule
out = round(in * spacing_in / spacing_out) and frozen here.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spineseg.preprocess import (
    LabelMap,
    Provenance,
    Volume,
    load_volume,
    make_slice_triplets,
    preprocess_subject,
    remove_zero_background,
    resample,
    resample_labels,
    restore_labels_to_original,
    save_preprocessed,
    load_preprocessed,
    standardize_geometry,
    zscore_normalize,
)


def _vol(shape, spacing, fill=1.0):
    return Volume(np.full(shape, fill, dtype=np.float32), spacing)


class TestResample:
    def test_shape_oracle_anisotropic(self):
        # 880x880 plane at 0.59mm, 12 slices at 5.5mm -> median target grid
        v = _vol((12, 880, 880), (5.5, 0.59, 0.59))
        out = resample(v, (4.4, 0.34, 0.34))
        assert out.shape == (15, 1527, 1527)
        assert out.spacing == (4.4, 0.34, 0.34)

    def test_shape_oracle_upsampled_z(self):
        out = resample(_vol((10, 512, 512), (4.0, 0.5, 0.5)), (4.4, 0.34, 0.34))
        assert out.shape == (9, 753, 753)

    def test_identity_is_bitwise(self):
        rng = np.random.default_rng(3)
        data = rng.normal(size=(4, 8, 8)).astype(np.float32)
        v = Volume(data, (4.4, 0.34, 0.34))
        out = resample(v, (4.4, 0.34, 0.34))
        assert out.data is data

    def test_constant_volume_stays_constant(self):
        out = resample(_vol((6, 40, 40), (5.0, 0.5, 0.5), fill=3.5), (4.4, 0.34, 0.34))
        np.testing.assert_allclose(out.data, 3.5, atol=1e-5)

    def test_labels_nearest_preserves_values(self):
        labels = LabelMap(
            np.random.default_rng(0).integers(0, 5, size=(6, 40, 40)).astype(np.int16),
            num_classes=5,
        )
        out = resample_labels(labels, (5.0, 0.5, 0.5), (4.4, 0.34, 0.34))
        assert out.data.dtype == np.int16
        assert set(np.unique(out.data)) <= set(np.unique(labels.data))

    def test_bad_target_spacing(self):
        with pytest.raises(ValueError):
            resample(_vol((4, 4, 4), (1, 1, 1)), (0.0, 1.0, 1.0))

    def test_degenerate_output_axis(self):
        with pytest.raises(ValueError, match="empty axis"):
            resample(_vol((1, 4, 4), (1.0, 1.0, 1.0)), (10.0, 1.0, 1.0))


class TestZscore:
    def test_two_value_oracle(self):
        # {0, 2}: mean 1, std 1 -> {-1, +1}
        data = np.array([[[0.0, 2.0]]], dtype=np.float32)
        out = zscore_normalize(Volume(data, (1, 1, 1)))
        np.testing.assert_allclose(out.data, [[[-1.0, 1.0]]], atol=1e-6)

    def test_result_is_standardized(self):
        rng = np.random.default_rng(5)
        v = Volume(rng.normal(3.0, 2.5, size=(4, 16, 16)).astype(np.float32), (1, 1, 1))
        out = zscore_normalize(v)
        assert abs(float(out.data.mean())) < 1e-5
        assert abs(float(out.data.std()) - 1.0) < 1e-4

    def test_constant_volume_maps_to_zero(self):
        out = zscore_normalize(_vol((2, 4, 4), (1, 1, 1), fill=7.0))
        np.testing.assert_allclose(out.data, 0.0)

    def test_single_voxel_rejected(self):
        with pytest.raises(ValueError):
            zscore_normalize(_vol((1, 1, 1), (1, 1, 1)))


class TestBackgroundCrop:
    def test_crop_box_and_offset(self):
        data = np.zeros((5, 6, 7), dtype=np.float32)
        data[1:4, 2:5, 3:6] = 1.0
        v = Volume(data, (1, 1, 1))
        labels = LabelMap(np.ones_like(data, dtype=np.int16), 2)
        out, out_labels, offset = remove_zero_background(v, labels)
        assert out.shape == (3, 3, 3)
        assert offset == (1, 2, 3)
        assert out.origin_offset == (1, 2, 3)
        assert out_labels.shape == (3, 3, 3)

    def test_offsets_accumulate(self):
        data = np.zeros((5, 6, 7), dtype=np.float32)
        data[1:4, 2:5, 3:6] = 1.0
        v = Volume(data, (1, 1, 1), origin_offset=(10, 10, 10))
        out, _, offset = remove_zero_background(v)
        assert offset == (11, 12, 13)

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError):
            remove_zero_background(_vol((2, 2, 2), (1, 1, 1), fill=0.0))


class TestStandardizeGeometry:
    def test_pad_small_plane_centered(self):
        v = _vol((12, 100, 200), (1, 1, 1))
        out, _, scaled, before, after = standardize_geometry(v, None, (224, 224), 12)
        assert out.shape == (12, 224, 224)
        assert scaled == (12, 100, 200)
        assert before == (0, 62, 12)
        assert after == (0, 62, 12)

    def test_scale_down_preserves_aspect(self):
        v = _vol((12, 448, 896), (1, 1, 1))
        out, _, scaled, _, _ = standardize_geometry(v, None, (224, 224), 12)
        # limiting axis is x: scale 224/896 = 0.25
        assert scaled == (12, 112, 224)
        assert out.shape == (12, 224, 224)

    def test_depth_padded_at_end(self):
        v = _vol((9, 64, 64), (1, 1, 1))
        out, _, _, before, after = standardize_geometry(v, None, (64, 64), 12)
        assert out.shape == (12, 64, 64)
        assert before[0] == 0 and after[0] == 3

    def test_pad_uses_minimum_and_label_zero(self):
        data = np.full((12, 10, 10), 5.0, dtype=np.float32)
        data[0, 0, 0] = -2.0
        labels = LabelMap(np.ones((12, 10, 10), dtype=np.int16), 2)
        out, out_labels, _, _, _ = standardize_geometry(
            Volume(data, (1, 1, 1)), labels, (16, 16), 12
        )
        assert float(out.data[0, 0, 0]) == -2.0
        assert float(out.data[0, 0, 15]) == -2.0  # padding filled with min
        assert int(out_labels.data[0, 0, 15]) == 0


class TestFullChain:
    def test_phantom_round_trip(self, phantom_subject, compact_cfg):
        vol, labels = phantom_subject
        fitted, fitted_labels, prov = preprocess_subject(
            "p0", vol, labels, compact_cfg.data.target_spacing,
            compact_cfg.data.inplane_size, compact_cfg.data.min_depth,
        )
        assert fitted.shape == (12, 224, 224)
        assert fitted_labels.shape == fitted.shape
        restored = restore_labels_to_original(fitted_labels.data, prov)
        assert restored.shape == vol.shape
        # phantom is generated at target spacing, so labels survive exactly
        np.testing.assert_array_equal(restored, labels.data)

    def test_restore_inverts_scaling_and_crop(self):
        rng = np.random.default_rng(11)
        data = np.zeros((12, 300, 260), dtype=np.float32)
        data[:, 20:280, 10:250] = rng.uniform(0.5, 1.5, size=(12, 260, 240)).astype(np.float32)
        labels = np.zeros_like(data, dtype=np.int16)
        labels[3:9, 60:220, 60:200] = 1
        vol = Volume(data, (4.4, 0.34, 0.34))
        fitted, fitted_labels, prov = preprocess_subject(
            "s", vol, LabelMap(labels, 2), (4.4, 0.34, 0.34), (224, 224), 12
        )
        assert fitted.shape == (12, 224, 224)
        restored = restore_labels_to_original(fitted_labels.data, prov)
        assert restored.shape == data.shape
        # nearest-neighbor down/up round trip keeps the bulk of the structure
        inter = np.logical_and(restored == 1, labels == 1).sum()
        union = np.logical_or(restored == 1, labels == 1).sum()
        assert inter / union > 0.9

    def test_provenance_json_round_trip(self, phantom_subject, compact_cfg):
        vol, labels = phantom_subject
        _, _, prov = preprocess_subject(
            "p0", vol, labels, compact_cfg.data.target_spacing,
            compact_cfg.data.inplane_size, compact_cfg.data.min_depth,
        )
        back = Provenance.from_json(prov.to_json())
        assert back == prov

    def test_save_load_cache(self, tmp_path, phantom_subject, compact_cfg):
        vol, labels = phantom_subject
        fitted, fitted_labels, prov = preprocess_subject(
            "p0", vol, labels, compact_cfg.data.target_spacing,
            compact_cfg.data.inplane_size, compact_cfg.data.min_depth,
        )
        save_preprocessed(tmp_path, fitted, fitted_labels, prov)
        v2, l2, p2 = load_preprocessed(tmp_path, "p0", compact_cfg.data.target_spacing)
        np.testing.assert_array_equal(v2.data, fitted.data)
        np.testing.assert_array_equal(l2.data, fitted_labels.data)
        assert l2.num_classes == fitted_labels.num_classes
        assert p2 == prov
        with pytest.raises(FileNotFoundError):
            load_preprocessed(tmp_path, "nope", compact_cfg.data.target_spacing)


class TestSliceTriplets:
    def test_boundary_replication_and_halving(self):
        rng = np.random.default_rng(2)
        data = rng.normal(size=(5, 32, 32)).astype(np.float32)
        triplets = make_slice_triplets(Volume(data, (4.4, 0.34, 0.34)), "s")
        assert len(triplets) == 5
        assert triplets[0].channels.shape == (3, 16, 16)
        # first slice: z-1 clamps to z
        np.testing.assert_array_equal(triplets[0].channels[0], triplets[0].channels[1])
        np.testing.assert_array_equal(triplets[-1].channels[1], triplets[-1].channels[2])
        # interior slices share planes with neighbors
        np.testing.assert_array_equal(triplets[2].channels[2], triplets[3].channels[1])
        assert [t.z_index for t in triplets] == list(range(5))


class TestLoadVolume:
    def test_sibling_mask_discovery(self, tmp_path):
        from spineseg.nifti import write_nifti

        sub = tmp_path / "case7"
        sub.mkdir()
        img = np.random.default_rng(0).uniform(0.1, 1.0, size=(4, 8, 8)).astype(np.float32)
        msk = np.zeros((4, 8, 8), dtype=np.int16)
        msk[1:3, 2:6, 2:6] = 3
        write_nifti(sub / "image.nii.gz", img, (4.4, 0.34, 0.34))
        write_nifti(sub / "mask.nii.gz", msk, (4.4, 0.34, 0.34))
        vol, labels = load_volume(sub / "image.nii.gz")
        assert labels is not None and labels.num_classes == 4
        np.testing.assert_array_equal(labels.data, msk)

    def test_mask_shape_mismatch(self, tmp_path):
        from spineseg.nifti import write_nifti

        write_nifti(tmp_path / "image.nii", np.ones((4, 8, 8), dtype=np.float32), (1, 1, 1))
        write_nifti(tmp_path / "mask.nii", np.zeros((4, 8, 9), dtype=np.int16), (1, 1, 1))
        with pytest.raises(ValueError, match="shape"):
            load_volume(tmp_path / "image.nii")


@settings(max_examples=25, deadline=None)
@given(
    z=st.integers(2, 6),
    y=st.integers(20, 60),
    x=st.integers(20, 60),
    sy=st.floats(0.3, 2.0),
)
def test_resample_shape_follows_rounding_rule(z, y, x, sy):
    v = Volume(np.ones((z, y, x), dtype=np.float32), (4.4, sy, sy))
    out = resample(v, (4.4, 0.7, 0.7))
    expect = (z, round(y * sy / 0.7), round(x * sy / 0.7))
    assert out.shape == expect
