import numpy as np
import pytest

from spineseg.manifest import load_manifest
from spineseg.phantom import (
    PHANTOM_CLASSES,
    PHANTOM_SHAPE,
    PHANTOM_SPACING,
    make_phantom,
    make_phantom_dataset,
    write_phantom_dataset,
)


def test_geometry_and_classes(phantom_subject):
    vol, labels = phantom_subject
    assert vol.shape == PHANTOM_SHAPE
    assert vol.spacing == PHANTOM_SPACING
    assert labels.num_classes == PHANTOM_CLASSES
    assert set(np.unique(labels.data)) == set(range(PHANTOM_CLASSES))


def test_strictly_positive_intensities(phantom_subject):
    vol, _ = phantom_subject
    assert float(vol.data.min()) > 0  # background removal must find nothing to crop
    assert vol.data.dtype == np.float32


def test_structures_brighter_than_background(phantom_subject):
    vol, labels = phantom_subject
    bg = vol.data[labels.data == 0].mean()
    for cls in range(1, PHANTOM_CLASSES):
        assert vol.data[labels.data == cls].mean() > bg


def test_deterministic_by_seed():
    v1, l1 = make_phantom(seed=5)
    v2, l2 = make_phantom(seed=5)
    np.testing.assert_array_equal(v1.data, v2.data)
    np.testing.assert_array_equal(l1.data, l2.data)
    v3, _ = make_phantom(seed=6)
    assert not np.array_equal(v1.data, v3.data)


def test_dataset_ids_and_variation():
    subjects = make_phantom_dataset(3, seed=2)
    assert [s[0] for s in subjects] == ["phantom00", "phantom01", "phantom02"]
    assert not np.array_equal(subjects[0][1].data, subjects[1][1].data)


def test_written_dataset_loads_back(tmp_path):
    write_phantom_dataset(tmp_path, 3, seed=4, n_unlabeled=1)
    man = load_manifest(tmp_path / "manifest.yaml")
    assert man.num_classes == PHANTOM_CLASSES
    assert man.labeled_ids == ["phantom00", "phantom01"]
    assert man.unlabeled_ids == ["phantom02"]
    from spineseg.preprocess import load_volume

    entry = man.entry("phantom00")
    vol, labels = load_volume(entry.image, entry.mask)
    assert vol.shape == PHANTOM_SHAPE
    assert labels is not None
    # regenerate to confirm files capture the same content up to dtype rounding
    ref_vol, ref_labels = make_phantom_dataset(3, seed=4)[0][1:]
    np.testing.assert_allclose(vol.data, ref_vol.data, atol=1e-6)
    np.testing.assert_array_equal(labels.data, ref_labels.data)


def test_unlabeled_subjects_have_no_mask(tmp_path):
    write_phantom_dataset(tmp_path, 2, seed=1, n_unlabeled=1)
    assert not (tmp_path / "phantom01" / "mask.nii.gz").exists()
    assert (tmp_path / "phantom01" / "image.nii.gz").exists()


def test_unlabeled_bounds(tmp_path):
    with pytest.raises(ValueError):
        write_phantom_dataset(tmp_path, 2, seed=1, n_unlabeled=2)
