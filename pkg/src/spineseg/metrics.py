"""Dice similarity coefficient and per-structure reporting.

DSC is evaluated on integer label maps in the original image space.  A class
missing from the ground truth yields None and is excluded from averages; a
class present in ground truth but not predicted scores 0.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .labels import structure_names


def dsc(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float | None:
    """2|P n G| / (|P| + |G|) for one class; None when the class is absent from gt."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    p = pred == class_id
    g = gt == class_id
    n_g = int(g.sum())
    if n_g == 0:
        return None
    n_p = int(p.sum())
    if n_p == 0:
        return 0.0
    return 2.0 * int((p & g).sum()) / (n_p + n_g)


def subject_dsc(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> dict[int, float | None]:
    """DSC per foreground class for one subject."""
    return {c: dsc(pred, gt, c) for c in range(1, num_classes)}


def mean_foreground_dsc(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    """Average over foreground classes present in gt; NaN when none are."""
    scores = [v for v in subject_dsc(pred, gt, num_classes).values() if v is not None]
    return float(np.mean(scores)) if scores else float("nan")


def structure_report(
    per_subject: dict[str, dict[int, float | None]], num_classes: int
) -> tuple[dict[str, float | None], float]:
    """Per-structure means across subjects (absence-excluded) and the overall mean."""
    names = structure_names(num_classes)
    means: dict[str, float | None] = {}
    all_scores = []
    for class_id in range(1, num_classes):
        scores = [
            table[class_id]
            for table in per_subject.values()
            if table.get(class_id) is not None
        ]
        means[names[class_id - 1]] = float(np.mean(scores)) if scores else None
        all_scores.extend(scores)
    overall = float(np.mean(all_scores)) if all_scores else float("nan")
    return means, overall


def write_dsc_csv(path: str | Path, per_subject: dict[str, dict[int, float | None]], num_classes: int):
    """One row per (subject, structure): subject, structure name, DSC or empty."""
    names = structure_names(num_classes)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["subject", "structure", "dsc"])
        for subject, table in sorted(per_subject.items()):
            for class_id in range(1, num_classes):
                value = table.get(class_id)
                writer.writerow([subject, names[class_id - 1], "" if value is None else f"{value:.6f}"])


def format_report(means: dict[str, float | None], overall: float) -> str:
    lines = [f"{'structure':<10} {'mean DSC':>9}"]
    for name, value in means.items():
        lines.append(f"{name:<10} {'absent' if value is None else f'{value:9.4f}'}")
    lines.append(f"{'overall':<10} {overall:9.4f}")
    return "\n".join(lines)
