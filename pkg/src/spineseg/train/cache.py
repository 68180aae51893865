"""Frozen stage-one outputs cached per subject, so stage two never reruns stage one.

Cached per subject: the fused confidence volume and the pre-projection peer
feature stack (the per-peer channel lift trains with stage two, so it cannot
be baked into the cache).  Every cache file records the producing checkpoint
hashes and the experiment config hash; loading with a different expectation
fails rather than silently mixing artifacts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..checkpoint import file_hash
from ..metrics import mean_foreground_dsc
from ..models.bridge import fuse_confidence_stacks, stack_feature_maps
from ..preprocess import LabelMap, Volume, make_slice_triplets


@dataclass
class Stage1Artifacts:
    confidence: np.ndarray  # (C1, Z, H, W) float32, channel-normalized
    features: np.ndarray | None  # (2*C2, Z, H/4, W/4) float32


def _predict_slices(net, volume: Volume, batch_size: int):
    triplets = make_slice_triplets(volume)
    probs, feats = [], []
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            for at in range(0, len(triplets), batch_size):
                chunk = triplets[at : at + batch_size]
                batch = torch.from_numpy(np.stack([t.channels for t in chunk]))
                out = net(batch)
                probs.append(out.probs)
                feats.append(out.features)
    finally:
        net.train(was_training)
    return torch.cat(probs), torch.cat(feats)


def compute_stage1_artifacts(
    net_a,
    net_b,
    volume: Volume,
    batch_size: int = 8,
    with_features: bool = True,
) -> Stage1Artifacts:
    """Run both frozen peers over every slice and fuse their outputs."""
    probs_a, feats_a = _predict_slices(net_a, volume, batch_size)
    probs_b, feats_b = _predict_slices(net_b, volume, batch_size)
    confidence = fuse_confidence_stacks(probs_a, probs_b).numpy().astype(np.float32)
    features = None
    if with_features:
        features = stack_feature_maps(feats_a, feats_b).numpy().astype(np.float32)
    return Stage1Artifacts(confidence=confidence, features=features)


def stage1_source_hash(ckpt_a: str | Path, ckpt_b: str | Path) -> str:
    return f"{file_hash(ckpt_a)}-{file_hash(ckpt_b)}"


def save_stage1_cache(
    cache_dir: str | Path,
    subject_id: str,
    artifacts: Stage1Artifacts,
    source_hash: str,
    config_hash: str,
):
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    arrays = {"confidence": artifacts.confidence}
    if artifacts.features is not None:
        arrays["features"] = artifacts.features
    np.savez_compressed(cache_dir / f"{subject_id}.stage1.npz", **arrays)
    meta = {"subject_id": subject_id, "source_hash": source_hash, "config_hash": config_hash}
    (cache_dir / f"{subject_id}.stage1.json").write_text(json.dumps(meta))


def load_stage1_cache(
    cache_dir: str | Path,
    subject_id: str,
    expect_source_hash: str | None = None,
    expect_config_hash: str | None = None,
) -> Stage1Artifacts:
    cache_dir = Path(cache_dir)
    npz_path = cache_dir / f"{subject_id}.stage1.npz"
    if not npz_path.exists():
        raise FileNotFoundError(f"no stage-one cache for subject {subject_id!r} in {cache_dir}")
    meta = json.loads((cache_dir / f"{subject_id}.stage1.json").read_text())
    if expect_source_hash is not None and meta["source_hash"] != expect_source_hash:
        raise ValueError(
            f"stage-one cache for {subject_id!r} was produced by checkpoints "
            f"{meta['source_hash']}, expected {expect_source_hash}"
        )
    if expect_config_hash is not None and meta["config_hash"] != expect_config_hash:
        raise ValueError(
            f"stage-one cache for {subject_id!r} belongs to config {meta['config_hash']}, "
            f"expected {expect_config_hash}"
        )
    with np.load(npz_path) as z:
        confidence = z["confidence"]
        features = z["features"] if "features" in z.files else None
    return Stage1Artifacts(confidence=confidence, features=features)


def validation_dsc(net_a, net_b, subjects, batch_size: int = 8) -> float:
    """Mean foreground DSC of the fused stage-one prediction in preprocessed space."""
    scores = []
    for volume, labels in subjects:
        if not isinstance(labels, LabelMap):
            raise TypeError("validation subjects need label maps")
        art = compute_stage1_artifacts(net_a, net_b, volume, batch_size, with_features=False)
        pred = art.confidence.argmax(axis=0)
        scores.append(mean_foreground_dsc(pred, labels.data, labels.num_classes))
    return float(np.mean(scores))
