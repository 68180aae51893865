"""Checkpoint archive: a flat name->tensor npz with a JSON header entry.

The header carries an architecture hash (model class + sorted tensor
names/shapes/dtypes) and the experiment config hash, so loading a checkpoint
into a differently-shaped network or a different experiment fails loudly.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

HEADER_KEY = "__header__"
FORMAT_VERSION = 1


def architecture_hash(model: torch.nn.Module) -> str:
    entries = sorted(
        (name, str(tuple(t.shape)), str(t.dtype).replace("torch.", ""))
        for name, t in model.state_dict().items()
    )
    digest = hashlib.sha256(
        json.dumps([type(model).__name__, entries]).encode()
    ).hexdigest()
    return digest[:16]


def save_checkpoint(path: str | Path, model: torch.nn.Module, header: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header["architecture_hash"] = architecture_hash(model)
    arrays = {
        name: tensor.detach().cpu().numpy() for name, tensor in model.state_dict().items()
    }
    if HEADER_KEY in arrays:
        raise ValueError(f"tensor name {HEADER_KEY!r} is reserved")
    arrays[HEADER_KEY] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    np.savez_compressed(path, **arrays)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with np.load(path) as z:
        if HEADER_KEY not in z.files:
            raise ValueError(f"{path}: not a checkpoint archive (missing header)")
        header = json.loads(z[HEADER_KEY].tobytes().decode())
        tensors = {name: z[name] for name in z.files if name != HEADER_KEY}
    return header, tensors


def load_checkpoint(
    path: str | Path,
    model: torch.nn.Module,
    expect_config_hash: str | None = None,
) -> dict:
    """Load tensors into ``model``; rejects architecture or config mismatches."""
    header, tensors = read_checkpoint(path)
    if expect_config_hash is not None and header.get("config_hash") != expect_config_hash:
        raise ValueError(
            f"{path}: checkpoint config hash {header.get('config_hash')} does not match "
            f"active config {expect_config_hash}"
        )
    expected = architecture_hash(model)
    if header.get("architecture_hash") != expected:
        raise ValueError(
            f"{path}: architecture hash {header.get('architecture_hash')} does not match "
            f"model {type(model).__name__} ({expected})"
        )
    state = {name: torch.from_numpy(arr.copy()) for name, arr in tensors.items()}
    model.load_state_dict(state)
    return header


def file_hash(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()[:16]
