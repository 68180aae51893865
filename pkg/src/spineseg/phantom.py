"""Synthetic spine-like phantoms for desk-scale end-to-end runs.

Each phantom is a (12, 224, 224) volume at the production target spacing with
strictly positive intensities, so the preprocessing chain is exercised as a
near-identity.  Seven foreground classes alternate bright ellipsoids (body
like) and thin boxy slabs (disc like) stacked along y, with per-phantom jitter
in position, size, and intensity so held-out phantoms are genuinely unseen.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import yaml
from scipy import ndimage

from .nifti import write_nifti
from .preprocess import LabelMap, Volume

PHANTOM_SHAPE = (12, 224, 224)
PHANTOM_SPACING = (4.4, 0.34, 0.34)
PHANTOM_CLASSES = 8  # background + 4 ellipsoids + 3 slabs


def _ellipsoid(shape, center, radii) -> np.ndarray:
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    cz, cy, cx = center
    rz, ry, rx = radii
    return ((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _box(shape, center, half) -> np.ndarray:
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    cz, cy, cx = center
    hz, hy, hx = half
    return (np.abs(zz - cz) <= hz) & (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)


def make_phantom(seed: int) -> tuple[Volume, LabelMap]:
    """One randomized phantom; all PHANTOM_CLASSES classes are present."""
    rng = np.random.default_rng(seed)
    shape = PHANTOM_SHAPE
    labels = np.zeros(shape, dtype=np.int16)
    image = 0.30 + 0.06 * ndimage.gaussian_filter(
        rng.standard_normal(shape), sigma=(0.5, 12.0, 12.0)
    )

    cx = 112.0 + rng.uniform(-10, 10)
    cz = 5.5 + rng.uniform(-0.8, 0.8)
    y = 18.0 + rng.uniform(0, 8)
    class_id = 1
    for segment in range(7):
        is_body = segment % 2 == 0
        if is_body:
            ry = rng.uniform(14, 17)
            rx = rng.uniform(26, 34)
            rz = rng.uniform(3.2, 4.2)
            cy = y + ry
            mask = _ellipsoid(shape, (cz, cy, cx + rng.uniform(-4, 4)), (rz, ry, rx))
            level = rng.uniform(0.95, 1.10)
            y = cy + ry + rng.uniform(1, 3)
        else:
            hy = rng.uniform(4, 6)
            hx = rng.uniform(22, 30)
            hz = rng.uniform(2.2, 3.2)
            cy = y + hy
            mask = _box(shape, (cz, cy, cx + rng.uniform(-4, 4)), (hz, hy, hx))
            level = rng.uniform(1.40, 1.55)
            y = cy + hy + rng.uniform(1, 3)
        mask &= labels == 0
        labels[mask] = class_id
        image[mask] = level + 0.04 * rng.standard_normal(int(mask.sum()))
        class_id += 1

    image += 0.03 * rng.standard_normal(shape)
    image = np.clip(image, 0.05, None).astype(np.float32)
    present = set(np.unique(labels).tolist())
    if present != set(range(PHANTOM_CLASSES)):
        raise RuntimeError(f"phantom seed {seed} lost classes: has {sorted(present)}")
    return (
        Volume(image, PHANTOM_SPACING),
        LabelMap(labels, PHANTOM_CLASSES),
    )


def make_phantom_dataset(n: int, seed: int) -> list[tuple[str, Volume, LabelMap]]:
    return [
        (f"phantom{i:02d}", *make_phantom(seed * 1000 + i)) for i in range(n)
    ]


def write_phantom_dataset(
    out_dir: str | Path, n: int, seed: int, n_unlabeled: int = 0
) -> Path:
    """Write NIfTI pairs plus a manifest; the last n_unlabeled subjects hide their masks."""
    if not 0 <= n_unlabeled < n:
        raise ValueError(f"n_unlabeled must be in [0, {n}), got {n_unlabeled}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labeled, unlabeled = [], []
    for subject_id, volume, labels in make_phantom_dataset(n, seed):
        subject_dir = out_dir / subject_id
        subject_dir.mkdir(exist_ok=True)
        write_nifti(subject_dir / "image.nii.gz", volume.data, volume.spacing)
        entry = {"id": subject_id, "image": f"{subject_id}/image.nii.gz"}
        if len(labeled) < n - n_unlabeled:
            write_nifti(subject_dir / "mask.nii.gz", labels.data, volume.spacing)
            entry["mask"] = f"{subject_id}/mask.nii.gz"
            labeled.append(entry)
        else:
            unlabeled.append(entry)
    manifest = out_dir / "manifest.yaml"
    manifest.write_text(
        yaml.safe_dump(
            {"num_classes": PHANTOM_CLASSES, "labeled": labeled, "unlabeled": unlabeled},
            sort_keys=False,
        )
    )
    return manifest
