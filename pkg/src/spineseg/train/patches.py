"""Category-balanced patch batches assembled from cached stage-one artifacts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..models.bridge import BalancedPatchSampler, PatchSpec, assemble_stage2_input, crop_volume
from ..preprocess import LabelMap, Volume
from .cache import Stage1Artifacts


@dataclass
class PatchSource:
    """One subject's tensors plus its balanced sampler."""

    subject_id: str
    image: torch.Tensor  # (Z, H, W) float32
    confidence: torch.Tensor  # (C1, Z, H, W) float32
    features: torch.Tensor  # (2*C2, Z, H/4, W/4) float32
    labels: torch.Tensor  # (Z, H, W) long
    sampler: BalancedPatchSampler


def make_patch_source(
    subject_id: str,
    volume: Volume,
    labels: LabelMap,
    artifacts: Stage1Artifacts,
    patch_size,
    rng: np.random.Generator,
) -> PatchSource:
    z, h, w = volume.shape
    conf = artifacts.confidence
    feats = artifacts.features
    if feats is None:
        raise ValueError(f"stage-one cache for {subject_id!r} was built without features")
    if conf.shape[1:] != (z, h, w):
        raise ValueError(f"confidence grid {conf.shape[1:]} does not match volume {(z, h, w)}")
    if feats.shape[1:] != (z, h // 4, w // 4):
        raise ValueError(
            f"feature grid {feats.shape[1:]} does not match quarter plane {(z, h // 4, w // 4)}"
        )
    if labels.shape != volume.shape:
        raise ValueError(f"label grid {labels.shape} does not match volume {volume.shape}")
    return PatchSource(
        subject_id=subject_id,
        image=torch.from_numpy(np.ascontiguousarray(volume.data)),
        confidence=torch.from_numpy(conf),
        features=torch.from_numpy(feats),
        labels=torch.from_numpy(np.ascontiguousarray(labels.data)).long(),
        sampler=BalancedPatchSampler(labels.data, patch_size, rng, subject_id),
    )


def epoch_patches(sources: list[PatchSource], per_subject: int, rng: np.random.Generator):
    """One epoch's worth of (source, PatchSpec) draws, shuffled across subjects."""
    pairs = [(src, src.sampler.sample()) for src in sources for _ in range(per_subject)]
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


def assemble_batch(pairs: list[tuple[PatchSource, PatchSpec]]):
    """Stack patches -> (input (B, 1+C1, z, y, x), features (B, 2*C2, z, y/4, x/4), labels)."""
    inputs, feats, labels = [], [], []
    for src, spec in pairs:
        patch, fpatch = assemble_stage2_input(src.image, src.confidence, src.features, spec)
        inputs.append(patch)
        feats.append(fpatch)
        labels.append(crop_volume(src.labels, spec))
    return torch.stack(inputs), torch.stack(feats), torch.stack(labels)
