"""Whole-volume two-stage inference and the fold ensemble.

Peak memory is bounded by the configured number of concurrent patches, never
by volume size: stage-two patches are cropped, forwarded in small batches, and
stitched incrementally from CPU tensors.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from ..config import ExperimentConfig
from ..models.bridge import assemble_stage2_input
from ..preprocess import Provenance, Volume, preprocess_subject, restore_labels_to_original
from ..train.cache import Stage1Artifacts, compute_stage1_artifacts
from .tiling import stitch, tile_volume


def predict_patches(fine_net, image, confidence, features, plan, max_batch: int):
    """Run stage two over a tile plan; returns one probability block per spec."""
    was_training = fine_net.training
    fine_net.eval()
    blocks = []
    try:
        with torch.no_grad():
            for at in range(0, len(plan), max_batch):
                chunk = plan[at : at + max_batch]
                inputs, feats = [], []
                for spec in chunk:
                    patch, fpatch = assemble_stage2_input(image, confidence, features, spec)
                    inputs.append(patch)
                    feats.append(fpatch)
                out = fine_net(torch.stack(inputs), torch.stack(feats))
                for j, spec in enumerate(chunk):
                    probs = out.probs[j]
                    if not torch.isfinite(probs).all():
                        raise RuntimeError(
                            f"non-finite probabilities in patch {at + j} at origin {spec.origin}"
                        )
                    blocks.append(probs.float())
    finally:
        fine_net.train(was_training)
    return blocks


def infer_preprocessed(
    net_a,
    net_b,
    fine_net,
    volume: Volume,
    cfg: ExperimentConfig,
    artifacts: Stage1Artifacts | None = None,
) -> torch.Tensor:
    """Class probabilities (C1, Z, H, W) for one preprocessed volume."""
    if artifacts is None:
        artifacts = compute_stage1_artifacts(net_a, net_b, volume)
    image = torch.from_numpy(np.ascontiguousarray(volume.data))
    confidence = torch.from_numpy(artifacts.confidence)
    features = torch.from_numpy(artifacts.features)
    plan = tile_volume(
        volume.shape,
        cfg.stage2.patch_size,
        cfg.inference.inplane_stride,
        cfg.inference.z_stride,
    )
    blocks = predict_patches(
        fine_net, image, confidence, features, plan, cfg.inference.max_patch_batch
    )
    return stitch(plan, blocks, volume.shape)


def ensemble_average(prob_volumes: list[torch.Tensor]) -> torch.Tensor:
    """Elementwise mean of per-fold probability volumes on identical grids."""
    if not prob_volumes:
        raise ValueError("nothing to ensemble")
    first = prob_volumes[0].shape
    for p in prob_volumes[1:]:
        if p.shape != first:
            raise ValueError(f"ensemble grids differ: {tuple(first)} vs {tuple(p.shape)}")
    return torch.stack(prob_volumes).mean(dim=0)


def run_two_stage(
    subject_id: str,
    raw_volume: Volume,
    models: list[tuple],
    cfg: ExperimentConfig,
) -> tuple[np.ndarray, Provenance, torch.Tensor]:
    """Raw volume -> (label map on the raw grid, provenance, preprocessed-space probs).

    models: one or more (net_a, net_b, fine_net) triples; with several, their
    probability volumes are averaged before the argmax.
    """
    volume, _, prov = preprocess_subject(
        subject_id,
        raw_volume,
        None,
        cfg.data.target_spacing,
        cfg.data.inplane_size,
        cfg.data.min_depth,
    )
    probs = ensemble_average(
        [infer_preprocessed(net_a, net_b, fine, volume, cfg) for net_a, net_b, fine in models]
    )
    pred = probs.argmax(dim=0).numpy().astype(np.int16)
    return restore_labels_to_original(pred, prov), prov, probs


_PALETTE = [
    (0, 0, 0),
    (230, 75, 55), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 190),
    (0, 128, 128), (230, 190, 255), (170, 110, 40), (255, 250, 200), (128, 0, 0),
    (170, 255, 195), (128, 128, 0), (255, 215, 180), (0, 0, 128),
]


def write_qc_overlay(path: str | Path, image: np.ndarray, labels: np.ndarray, z: int | None = None):
    """Mid-slice grayscale with translucent class colors, for quick visual checks."""
    from PIL import Image

    if image.shape != labels.shape:
        raise ValueError(f"image {image.shape} and labels {labels.shape} differ")
    z = image.shape[0] // 2 if z is None else z
    plane = image[z].astype(np.float64)
    span = plane.max() - plane.min()
    gray = np.zeros_like(plane) if span == 0 else (plane - plane.min()) / span
    rgb = np.stack([gray * 255] * 3, axis=-1)
    lab = labels[z]
    for cls in np.unique(lab):
        if cls == 0:
            continue
        color = np.array(_PALETTE[int(cls) % len(_PALETTE)], dtype=np.float64)
        mask = lab == cls
        rgb[mask] = 0.5 * rgb[mask] + 0.5 * color
    Image.fromarray(rgb.astype(np.uint8)).save(path)
