"""Dataset manifests: which subjects exist, where their files live, who is unlabeled.

Paths in the manifest are relative to the data root, which is the
SPINESEG_DATA_ROOT environment variable when set and the manifest's own
directory otherwise.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from .config import DATA_ROOT_ENV


@dataclass(frozen=True)
class SubjectEntry:
    subject_id: str
    image: Path
    mask: Path | None = None

    @property
    def labeled(self) -> bool:
        return self.mask is not None


@dataclass(frozen=True)
class Manifest:
    num_classes: int | None
    labeled: tuple
    unlabeled: tuple

    def entry(self, subject_id: str) -> SubjectEntry:
        for e in (*self.labeled, *self.unlabeled):
            if e.subject_id == subject_id:
                return e
        raise KeyError(f"subject {subject_id!r} not in manifest")

    @property
    def labeled_ids(self) -> list[str]:
        return [e.subject_id for e in self.labeled]

    @property
    def unlabeled_ids(self) -> list[str]:
        return [e.subject_id for e in self.unlabeled]


def _entries(raw, root: Path, require_mask: bool) -> list[SubjectEntry]:
    entries = []
    for item in raw:
        if "id" not in item or "image" not in item:
            raise ValueError(f"manifest entry needs 'id' and 'image': {item}")
        mask = item.get("mask")
        if require_mask and mask is None:
            raise ValueError(f"labeled entry {item['id']!r} is missing a mask")
        entries.append(
            SubjectEntry(
                subject_id=str(item["id"]),
                image=root / item["image"],
                mask=root / mask if mask else None,
            )
        )
    ids = [e.subject_id for e in entries]
    if len(ids) != len(set(ids)):
        raise ValueError("duplicate subject ids in manifest")
    return entries


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    text = path.read_text()
    raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    if not isinstance(raw, dict) or "labeled" not in raw:
        raise ValueError(f"manifest {path} must be a mapping with a 'labeled' list")
    root = Path(os.environ.get(DATA_ROOT_ENV) or path.parent)
    labeled = _entries(raw["labeled"], root, require_mask=True)
    unlabeled = _entries(raw.get("unlabeled", []), root, require_mask=False)
    both = {e.subject_id for e in labeled} & {e.subject_id for e in unlabeled}
    if both:
        raise ValueError(f"subjects listed as both labeled and unlabeled: {sorted(both)}")
    return Manifest(
        num_classes=int(raw.get("num_classes", 0)) or None,
        labeled=tuple(labeled),
        unlabeled=tuple(unlabeled),
    )
