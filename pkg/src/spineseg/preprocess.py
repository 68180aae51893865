"""Volume loading and the preprocessing chain feeding both stages.

Chain: resample to the dataset median spacing, crop away the zero background,
z-score normalize, then standardize geometry (scale-down-or-pad in plane, pad
depth).  Every geometric step records enough provenance to map predictions
back to the original grid, where evaluation happens.

Axis convention throughout: (z, y, x) with z the slice axis.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .nifti import read_nifti, write_nifti

EPS_STD = 1e-8
# Spacing differences below NIfTI float32 metadata precision are treated as equal.
SPACING_RTOL = 1e-5


@dataclass
class Volume:
    """Scalar intensity grid with voxel spacing and crop provenance."""

    data: np.ndarray  # (z, y, x) float
    spacing: tuple[float, float, float]  # mm per voxel, (z, y, x)
    origin_offset: tuple[int, int, int] = (0, 0, 0)  # crop origin in the pre-crop grid

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume needs >=1 voxel per axis, got shape {self.data.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be strictly positive, got {self.spacing}")
        if any(o < 0 for o in self.origin_offset):
            raise ValueError(f"origin_offset must be non-negative, got {self.origin_offset}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class LabelMap:
    """Integer class grid paired with a Volume; values in [0, num_classes)."""

    data: np.ndarray  # (z, y, x) int
    num_classes: int

    def __post_init__(self):
        if not np.issubdtype(self.data.dtype, np.integer):
            raise ValueError(f"label map must be integer, got {self.data.dtype}")
        lo, hi = int(self.data.min()), int(self.data.max())
        if lo < 0 or hi >= self.num_classes:
            raise ValueError(
                f"label values [{lo}, {hi}] outside [0, {self.num_classes - 1}]"
            )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class SliceTriplet:
    """Three stacked adjacent slices (z-1, z, z+1), downsampled in-plane by 2."""

    channels: np.ndarray  # (3, y/2, x/2) float32
    subject_id: str
    z_index: int

    def __post_init__(self):
        if self.channels.ndim != 3 or self.channels.shape[0] != 3:
            raise ValueError(f"triplet needs exactly 3 channels, got {self.channels.shape}")


def _find_mask(image_path: Path) -> Path | None:
    candidates = []
    if "image" in image_path.name:
        candidates.append(image_path.with_name(image_path.name.replace("image", "mask")))
    for ext in (".nii.gz", ".nii"):
        candidates.append(image_path.parent / f"mask{ext}")
    for c in candidates:
        if c.exists():
            return c
    return None


def load_volume(
    path: str | Path,
    mask_path: str | Path | None = None,
    num_classes: int | None = None,
) -> tuple[Volume, LabelMap | None]:
    """Load an intensity volume and, when a mask file is co-located, its label map.

    The mask is ``mask_path`` if given, otherwise a sibling file following the
    ``<subject>/{image,mask}.nii[.gz]`` layout.  When ``num_classes`` is None it
    is inferred from the mask's maximum value.
    """
    path = Path(path)
    data, spacing = read_nifti(path)
    volume = Volume(data=data.astype(np.float32), spacing=spacing)
    mask_path = Path(mask_path) if mask_path is not None else _find_mask(path)
    if mask_path is None:
        return volume, None
    mask_data, mask_spacing = read_nifti(mask_path)
    if mask_data.shape != data.shape:
        raise ValueError(
            f"mask shape {mask_data.shape} does not match volume shape {data.shape}"
        )
    if not np.allclose(mask_spacing, spacing, rtol=1e-3):
        raise ValueError(f"mask spacing {mask_spacing} does not match volume {spacing}")
    mask_data = np.rint(mask_data).astype(np.int16)
    if num_classes is None:
        num_classes = int(mask_data.max()) + 1
    return volume, LabelMap(data=mask_data, num_classes=num_classes)


def resample(
    volume: Volume,
    target_spacing: tuple[float, float, float],
    is_label: bool = False,
) -> Volume:
    """Resample to ``target_spacing`` (z, y, x).

    Output size per axis is round(in_size * in_spacing / out_spacing).  Images
    use cubic spline interpolation, labels nearest-neighbor.  A volume already
    at target spacing passes through bitwise unchanged.
    """
    if any(s <= 0 for s in target_spacing):
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    in_shape = np.array(volume.shape, dtype=np.float64)
    factors = np.array(volume.spacing) / np.array(target_spacing)
    out_shape = np.round(in_shape * factors).astype(int)
    if np.any(out_shape < 1):
        raise ValueError(f"resampling to {target_spacing} yields empty axis: {out_shape}")
    if tuple(out_shape) == volume.shape and np.allclose(factors, 1.0, rtol=0, atol=SPACING_RTOL):
        return Volume(volume.data, tuple(float(s) for s in target_spacing), volume.origin_offset)
    zoom = out_shape / in_shape  # exact factors so ndimage hits out_shape
    order = 0 if is_label else 3
    out = ndimage.zoom(volume.data, zoom, order=order, mode="nearest")
    assert out.shape == tuple(out_shape)
    return Volume(out, tuple(float(s) for s in target_spacing), volume.origin_offset)


def resample_labels(labels: LabelMap, spacing, target_spacing) -> LabelMap:
    carrier = Volume(labels.data.astype(np.float32), spacing)
    out = resample(carrier, target_spacing, is_label=True)
    return LabelMap(np.rint(out.data).astype(labels.data.dtype), labels.num_classes)


def remove_zero_background(
    volume: Volume, labels: LabelMap | None = None
) -> tuple[Volume, LabelMap | None, tuple[int, int, int]]:
    """Crop to the bounding box of strictly positive intensities.

    Returns the cropped volume, the identically cropped label map, and the crop
    origin for inverse mapping at evaluation time.
    """
    positive = volume.data > 0
    if not positive.any():
        raise ValueError("cannot remove background from an all-zero volume")
    slices = []
    offset = []
    for axis in range(3):
        axes = tuple(a for a in range(3) if a != axis)
        profile = positive.any(axis=axes)
        idx = np.where(profile)[0]
        slices.append(slice(int(idx[0]), int(idx[-1]) + 1))
        offset.append(int(idx[0]))
    offset = tuple(np.array(volume.origin_offset) + np.array(offset))
    cropped = Volume(volume.data[tuple(slices)], volume.spacing, offset)
    cropped_labels = None
    if labels is not None:
        cropped_labels = LabelMap(labels.data[tuple(slices)], labels.num_classes)
    return cropped, cropped_labels, offset


def zscore_normalize(volume: Volume) -> Volume:
    """Whole-volume z-score: (x - mean) / max(std, 1e-8)."""
    if volume.data.size < 2:
        raise ValueError("z-score needs at least 2 voxels")
    data = volume.data.astype(np.float32)
    mean = float(data.mean())
    std = max(float(data.std()), EPS_STD)
    return Volume((data - mean) / std, volume.spacing, volume.origin_offset)


def make_slice_triplets(volume: Volume, subject_id: str = "") -> list[SliceTriplet]:
    """One triplet per slice; boundary slices replicate the edge slice."""
    depth = volume.shape[0]
    half = ndimage.zoom(volume.data, (1.0, 0.5, 0.5), order=3, mode="nearest").astype(np.float32)
    triplets = []
    for z in range(depth):
        zm, zp = max(z - 1, 0), min(z + 1, depth - 1)
        channels = np.stack([half[zm], half[z], half[zp]])
        triplets.append(SliceTriplet(channels=channels, subject_id=subject_id, z_index=z))
    return triplets


@dataclass
class Provenance:
    """Geometry bookkeeping for mapping predictions back to the raw grid."""

    subject_id: str
    original_shape: tuple[int, int, int]
    original_spacing: tuple[float, float, float]
    target_spacing: tuple[float, float, float]
    resampled_shape: tuple[int, int, int]
    crop_offset: tuple[int, int, int]
    cropped_shape: tuple[int, int, int]
    scaled_shape: tuple[int, int, int]  # after in-plane scale-down, before padding
    pad_before: tuple[int, int, int]
    pad_after: tuple[int, int, int]

    def __post_init__(self):
        # numpy scalars sneak in from shape arithmetic; keep fields JSON-clean
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if isinstance(value, tuple):
                kind = float if "spacing" in field.name else int
                setattr(self, field.name, tuple(kind(v) for v in value))

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "Provenance":
        d = json.loads(text)
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def standardize_geometry(
    volume: Volume,
    labels: LabelMap | None,
    inplane_size: tuple[int, int],
    min_depth: int,
) -> tuple[Volume, LabelMap | None, tuple[int, int, int], tuple[int, int, int], tuple[int, int, int]]:
    """Fit the in-plane grid to exactly ``inplane_size`` and depth to >= min_depth.

    Oversized planes are scaled down uniformly (aspect preserved), then every
    axis is padded with the volume minimum (labels with 0).  Returns the fitted
    pair plus (scaled_shape, pad_before, pad_after) for inversion.
    """
    data = volume.data
    label_data = labels.data if labels is not None else None
    ty, tx = inplane_size
    _, y, x = data.shape
    if y > ty or x > tx:
        scale = min(ty / y, tx / x)
        out_y, out_x = int(round(y * scale)), int(round(x * scale))
        zoom = (1.0, out_y / y, out_x / x)
        data = ndimage.zoom(data, zoom, order=3, mode="nearest")
        if label_data is not None:
            label_data = ndimage.zoom(label_data, zoom, order=0, mode="nearest")
    scaled_shape = data.shape
    pad_z = max(min_depth - data.shape[0], 0)
    pad_y = ty - data.shape[1]
    pad_x = tx - data.shape[2]
    before = (0, pad_y // 2, pad_x // 2)
    after = (pad_z, pad_y - before[1], pad_x - before[2])
    pads = tuple(zip(before, after))
    if pad_z or pad_y or pad_x:
        fill = float(data.min())
        data = np.pad(data, pads, mode="constant", constant_values=fill)
        if label_data is not None:
            label_data = np.pad(label_data, pads, mode="constant", constant_values=0)
    out_volume = Volume(data.astype(np.float32), volume.spacing, volume.origin_offset)
    out_labels = LabelMap(label_data, labels.num_classes) if labels is not None else None
    return out_volume, out_labels, scaled_shape, before, after


def preprocess_subject(
    subject_id: str,
    volume: Volume,
    labels: LabelMap | None,
    target_spacing: tuple[float, float, float],
    inplane_size: tuple[int, int],
    min_depth: int = 12,
) -> tuple[Volume, LabelMap | None, Provenance]:
    """Run the full chain; labels follow every geometric step with nearest sampling."""
    original_shape, original_spacing = volume.shape, volume.spacing
    resampled = resample(volume, target_spacing)
    resampled_labels = (
        resample_labels(labels, original_spacing, target_spacing) if labels is not None else None
    )
    if resampled_labels is not None and resampled_labels.shape != resampled.shape:
        raise ValueError("label map diverged from volume during resampling")
    cropped, cropped_labels, crop_offset = remove_zero_background(resampled, resampled_labels)
    normalized = zscore_normalize(cropped)
    fitted, fitted_labels, scaled_shape, before, after = standardize_geometry(
        normalized, cropped_labels, inplane_size, min_depth
    )
    prov = Provenance(
        subject_id=subject_id,
        original_shape=original_shape,
        original_spacing=tuple(float(s) for s in original_spacing),
        target_spacing=tuple(float(s) for s in target_spacing),
        resampled_shape=resampled.shape,
        crop_offset=crop_offset,
        cropped_shape=cropped.shape,
        scaled_shape=scaled_shape,
        pad_before=before,
        pad_after=after,
    )
    return fitted, fitted_labels, prov


def restore_labels_to_original(pred: np.ndarray, prov: Provenance) -> np.ndarray:
    """Map an integer prediction from preprocessed space back to the raw grid.

    Inverts padding, in-plane scaling, background cropping, and resampling (all
    label steps nearest-neighbor).  Output shape equals the raw input grid.
    """
    slices = tuple(
        slice(b, s - a) for b, s, a in zip(prov.pad_before, pred.shape, prov.pad_after)
    )
    pred = pred[slices]
    if pred.shape != prov.scaled_shape:
        raise ValueError(f"prediction shape {pred.shape} does not match provenance")
    if prov.scaled_shape != prov.cropped_shape:
        zoom = np.array(prov.cropped_shape) / np.array(prov.scaled_shape)
        pred = ndimage.zoom(pred, zoom, order=0, mode="nearest")
    full = np.zeros(prov.resampled_shape, dtype=pred.dtype)
    oz, oy, ox = prov.crop_offset
    dz, dy, dx = pred.shape
    full[oz : oz + dz, oy : oy + dy, ox : ox + dx] = pred
    if prov.resampled_shape != prov.original_shape:
        zoom = np.array(prov.original_shape) / np.array(prov.resampled_shape)
        full = ndimage.zoom(full, zoom, order=0, mode="nearest")
    assert full.shape == tuple(prov.original_shape)
    return full


def save_preprocessed(
    cache_dir: str | Path,
    vol: Volume,
    labels: LabelMap | None,
    prov: Provenance,
):
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    arrays = {"image": vol.data.astype(np.float32)}
    if labels is not None:
        arrays["mask"] = labels.data.astype(np.int16)
        arrays["num_classes"] = np.int64(labels.num_classes)
    np.savez_compressed(cache_dir / f"{prov.subject_id}.npz", **arrays)
    (cache_dir / f"{prov.subject_id}.json").write_text(prov.to_json())


def load_preprocessed(
    cache_dir: str | Path, subject_id: str, target_spacing
) -> tuple[Volume, LabelMap | None, Provenance]:
    cache_dir = Path(cache_dir)
    npz_path = cache_dir / f"{subject_id}.npz"
    if not npz_path.exists():
        raise FileNotFoundError(f"no preprocessed cache for subject {subject_id!r} in {cache_dir}")
    with np.load(npz_path) as z:
        image = z["image"]
        mask = z["mask"] if "mask" in z.files else None
        num_classes = int(z["num_classes"]) if "num_classes" in z.files else None
    prov = Provenance.from_json((cache_dir / f"{subject_id}.json").read_text())
    vol = Volume(image, tuple(float(s) for s in target_spacing))
    labels = LabelMap(mask, num_classes) if mask is not None else None
    return vol, labels, prov


def save_labelmap(path: str | Path, labels: np.ndarray, spacing):
    write_nifti(path, labels.astype(np.int16), spacing)
