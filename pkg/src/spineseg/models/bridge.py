"""Glue between the per-slice stage and the volumetric stage.

Two artefacts cross the stage boundary, both restored to the preprocessed
volume's geometry (the per-slice network saw a half-scale plane):

* confidence volume: peer probability stacks upsampled x2 in-plane, averaged,
  renormalised over classes -> (C, Z, H, W)
* feature stack: peer feature maps upsampled x2 in-plane and concatenated on
  channels -> (2*C2, Z, H/4, W/4); kept pre-projection because the per-peer
  channel projections train with stage two

Patch extraction is category balanced: pick a class uniformly among those
present in the mask, a voxel uniformly within it, centre the window there,
clamp to bounds, and snap the in-plane origin down to a multiple of 4 so the
quarter-resolution feature crop lands on integer coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

_NORM_EPS = 1e-12


def _check_slice_stack(stack: torch.Tensor, name: str) -> None:
    if stack.ndim != 4:
        raise ValueError(f"{name} must be (Z, C, h, w), got {tuple(stack.shape)}")


def fuse_confidence_stacks(probs_a: torch.Tensor, probs_b: torch.Tensor) -> torch.Tensor:
    """Per-slice peer probabilities (Z, C, h, w) -> confidence volume (C, Z, 2h, 2w)."""
    _check_slice_stack(probs_a, "probs_a")
    if probs_a.shape != probs_b.shape:
        raise ValueError(f"peer shapes differ: {tuple(probs_a.shape)} vs {tuple(probs_b.shape)}")
    up_a = F.interpolate(probs_a, scale_factor=2, mode="bilinear", align_corners=False)
    up_b = F.interpolate(probs_b, scale_factor=2, mode="bilinear", align_corners=False)
    vol = (0.5 * (up_a + up_b)).clamp_min(0.0)
    vol = vol.permute(1, 0, 2, 3)
    return vol / vol.sum(dim=0, keepdim=True).clamp_min(_NORM_EPS)


def stack_feature_maps(feats_a: torch.Tensor, feats_b: torch.Tensor) -> torch.Tensor:
    """Per-slice peer features (Z, C2, h/4, w/4) -> stack (2*C2, Z, h/2, w/2)."""
    _check_slice_stack(feats_a, "feats_a")
    if feats_a.shape != feats_b.shape:
        raise ValueError(f"peer shapes differ: {tuple(feats_a.shape)} vs {tuple(feats_b.shape)}")
    stacked = []
    for feats in (feats_a, feats_b):
        up = F.interpolate(feats, scale_factor=2, mode="bilinear", align_corners=False)
        stacked.append(up.permute(1, 0, 2, 3))
    return torch.cat(stacked, dim=0)


class PeerFeatureProjection(nn.Module):
    """Separate learned channel lift for each peer's half of the stack."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.project_a = nn.Conv3d(in_channels, out_channels, 1, bias=False)
        self.project_b = nn.Conv3d(in_channels, out_channels, 1, bias=False)

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        if stack.ndim != 5 or stack.shape[1] != 2 * self.in_channels:
            raise ValueError(
                f"expected (B, {2 * self.in_channels}, Z, w, h) stack, got {tuple(stack.shape)}"
            )
        half_a, half_b = torch.chunk(stack, 2, dim=1)
        return torch.cat([self.project_a(half_a), self.project_b(half_b)], dim=1)


def hybrid_feature_volume(projection: PeerFeatureProjection, stack: torch.Tensor) -> torch.Tensor:
    """Lift a peer feature stack (2*C2, Z, W/4, H/4) to the fused width (2*C3, ...).

    The projection is pointwise, so lifting the whole volume and cropping
    patches afterwards equals cropping first and lifting per patch; training
    uses the latter to bound memory.
    """
    if stack.ndim != 4:
        raise ValueError(f"expected (2*C2, Z, W/4, H/4) stack, got {tuple(stack.shape)}")
    return projection(stack.unsqueeze(0)).squeeze(0)


class ChannelReduction(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.reduce = nn.Conv3d(in_channels, out_channels, 1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.reduce(x)


@dataclass(frozen=True)
class PatchSpec:
    """Patch window in preprocessed-volume coordinates; in-plane origin is 4-aligned."""

    origin: tuple  # (z0, y0, x0)
    size: tuple  # (dz, dy, dx)
    subject_id: str = ""

    def __post_init__(self):
        z0, y0, x0 = self.origin
        _, dy, dx = self.size
        if y0 % 4 or x0 % 4:
            raise ValueError(f"in-plane origin {(y0, x0)} not aligned to 4")
        if dy % 4 or dx % 4:
            raise ValueError(f"in-plane size {(dy, dx)} not divisible by 4")
        if min(self.origin) < 0 or min(self.size) < 1:
            raise ValueError(f"bad patch window {self.origin} + {self.size}")

    def slices(self):
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.size))

    def feature_slices(self):
        """Same window at quarter in-plane resolution, z untouched."""
        z0, y0, x0 = self.origin
        dz, dy, dx = self.size
        return (slice(z0, z0 + dz), slice(y0 // 4, (y0 + dy) // 4), slice(x0 // 4, (x0 + dx) // 4))


class BalancedPatchSampler:
    """Category-balanced patch origins over one subject's label volume."""

    def __init__(self, labels: np.ndarray, patch_size, rng: np.random.Generator, subject_id: str = ""):
        if labels.ndim != 3:
            raise ValueError(f"labels must be (Z, H, W), got {labels.shape}")
        self.subject_id = subject_id
        self.shape = labels.shape
        self.patch_size = tuple(int(s) for s in patch_size)
        for dim, size in zip(self.shape, self.patch_size):
            if size > dim:
                raise ValueError(f"patch {self.patch_size} exceeds volume {self.shape}")
        self.rng = rng
        self.present_classes = tuple(int(c) for c in np.unique(labels))
        flat = labels.reshape(-1)
        self._class_voxels = {c: np.flatnonzero(flat == c) for c in self.present_classes}

    def sample(self) -> PatchSpec:
        cls = self.present_classes[self.rng.integers(len(self.present_classes))]
        voxels = self._class_voxels[cls]
        centre = np.unravel_index(voxels[self.rng.integers(len(voxels))], self.shape)
        origin = []
        for c, size, dim in zip(centre, self.patch_size, self.shape):
            o = min(max(int(c) - size // 2, 0), dim - size)
            origin.append(o)
        origin[1] -= origin[1] % 4
        origin[2] -= origin[2] % 4
        return PatchSpec(tuple(origin), self.patch_size, self.subject_id)

    def sample_many(self, n: int):
        return [self.sample() for _ in range(n)]


def crop_volume(volume: torch.Tensor, spec: PatchSpec) -> torch.Tensor:
    """Crop (..., Z, H, W) at full resolution."""
    zs, ys, xs = spec.slices()
    return volume[..., zs, ys, xs]


def crop_features(features: torch.Tensor, spec: PatchSpec) -> torch.Tensor:
    """Crop (..., Z, H/4, W/4) at quarter in-plane resolution."""
    zs, ys, xs = spec.feature_slices()
    return features[..., zs, ys, xs]


def assemble_stage2_input(
    image: torch.Tensor,
    confidence: torch.Tensor,
    feature_stack: torch.Tensor,
    spec: PatchSpec,
):
    """Cut one training example out of the cached stage-one artefacts.

    image (Z, H, W), confidence (C, Z, H, W), feature_stack (2*C2, Z, H/4, W/4)
    -> (input patch (1+C, dz, dy, dx), feature patch (2*C2, dz, dy/4, dx/4)).
    """
    if image.ndim != 3 or confidence.ndim != 4 or feature_stack.ndim != 4:
        raise ValueError("expected image (Z,H,W), confidence (C,Z,H,W), features (2C2,Z,H/4,W/4)")
    image_patch = crop_volume(image, spec).unsqueeze(0)
    confidence_patch = crop_volume(confidence, spec)
    patch = torch.cat([image_patch, confidence_patch], dim=0)
    return patch, crop_features(feature_stack, spec)
