"""Per-slice datasets for stage-one training.

Slices are consumed as half-scale triplets; ground truth follows by plain
decimation (every second pixel, top-left convention) which is the nearest
sampling consistent with even standardized plane sizes.
"""

from __future__ import annotations

import numpy as np
import torch
from torch.utils.data import Dataset

from ..preprocess import LabelMap, Volume, make_slice_triplets


def halve_plane_labels(labels: np.ndarray) -> np.ndarray:
    """(Z, H, W) integer labels -> (Z, H/2, W/2) by decimation."""
    if labels.ndim != 3:
        raise ValueError(f"expected (Z, H, W) labels, got {labels.shape}")
    return labels[:, ::2, ::2]


class SliceDataset(Dataset):
    """Half-scale slice triplets, optionally with matching label slices."""

    def __init__(self, subjects: list):
        """subjects: list of (subject_id, Volume, LabelMap | None)."""
        self.items = []
        self.labeled = None
        for subject_id, volume, labels in subjects:
            if not isinstance(volume, Volume):
                raise TypeError(f"expected Volume for {subject_id!r}")
            has_labels = labels is not None
            if self.labeled is None:
                self.labeled = has_labels
            elif self.labeled != has_labels:
                raise ValueError("cannot mix labeled and unlabeled subjects in one dataset")
            half_labels = None
            if has_labels:
                if not isinstance(labels, LabelMap):
                    raise TypeError(f"expected LabelMap for {subject_id!r}")
                half_labels = halve_plane_labels(labels.data)
            for triplet in make_slice_triplets(volume, subject_id):
                image = torch.from_numpy(np.ascontiguousarray(triplet.channels))
                if has_labels:
                    target = torch.from_numpy(
                        np.ascontiguousarray(half_labels[triplet.z_index])
                    ).long()
                    self.items.append((image, target))
                else:
                    self.items.append((image,))
        if not self.items:
            raise ValueError("empty slice dataset")

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        item = self.items[i]
        return item if self.labeled else item[0]


def slice_loader(dataset: SliceDataset, batch_size: int, seed: int, drop_last: bool = True):
    """Shuffling loader with a private torch generator for reproducibility."""
    gen = torch.Generator()
    gen.manual_seed(seed)
    return torch.utils.data.DataLoader(
        dataset, batch_size=batch_size, shuffle=True, generator=gen, drop_last=drop_last
    )
