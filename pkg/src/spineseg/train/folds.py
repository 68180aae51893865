"""Deterministic cross-validation fold planning."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class FoldPlan:
    """Disjoint, exhaustive subject folds plus the unlabeled pool."""

    seed: int
    folds: tuple  # tuple of tuples of subject ids
    unlabeled: tuple = ()

    def __post_init__(self):
        flat = [s for fold in self.folds for s in fold]
        if len(flat) != len(set(flat)):
            raise ValueError("folds overlap")
        shared = set(flat) & set(self.unlabeled)
        if shared:
            raise ValueError(f"subjects in both labeled folds and unlabeled pool: {sorted(shared)}")

    @property
    def n_folds(self) -> int:
        return len(self.folds)

    def split(self, k: int) -> tuple[list, list]:
        """(train ids, validation ids) for fold index k."""
        if not 0 <= k < self.n_folds:
            raise ValueError(f"fold index {k} out of range [0, {self.n_folds})")
        val = list(self.folds[k])
        train = [s for i, fold in enumerate(self.folds) if i != k for s in fold]
        return train, val

    def save(self, path: str | Path):
        payload = {
            "seed": self.seed,
            "folds": [list(f) for f in self.folds],
            "unlabeled": list(self.unlabeled),
        }
        Path(path).write_text(json.dumps(payload, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "FoldPlan":
        d = json.loads(Path(path).read_text())
        return cls(
            seed=d["seed"],
            folds=tuple(tuple(f) for f in d["folds"]),
            unlabeled=tuple(d.get("unlabeled", [])),
        )


def make_folds(subject_ids, seed: int, n_folds: int = 5, unlabeled_ids=()) -> FoldPlan:
    """Shuffle subjects with the seed and split into near-equal folds.

    The first (len % n_folds) folds take one extra subject, so 172 subjects
    split 35/35/34/34/34.
    """
    ids = sorted(str(s) for s in subject_ids)
    if len(ids) < n_folds:
        raise ValueError(f"need at least {n_folds} subjects, got {len(ids)}")
    rng = np.random.default_rng(seed)
    rng.shuffle(ids)
    base, extra = divmod(len(ids), n_folds)
    folds = []
    at = 0
    for k in range(n_folds):
        size = base + (1 if k < extra else 0)
        folds.append(tuple(ids[at : at + size]))
        at += size
    return FoldPlan(seed=seed, folds=tuple(folds), unlabeled=tuple(str(s) for s in unlabeled_ids))
