"""Stage-one semi-supervised training: two peers cross-supervised on unlabeled data.

On labeled slices both networks take the usual cross-entropy + Dice loss.  On
unlabeled slices each network is supervised by the other's argmax pseudo
label.  Pseudo labels are computed on the un-mixed inputs; images and pseudo
labels are then mixed pairwise with the same rectangle before the supervised
pass, so neither network learns from its own mixing artifacts.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..checkpoint import save_checkpoint
from ..config import ExperimentConfig
from ..losses import LossReport, cross_entropy_labels, segmentation_loss
from ..models import DeepLab2D

__all__ = [
    "CutMixSpec",
    "Stage1LossReport",
    "Stage1Trainer",
    "cps_loss",
    "cutmix_pair",
    "generate_pseudo_labels",
    "sample_cutmix",
    "supervised_loss",
    "train_step_2d",
]


def generate_pseudo_labels(probs: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) probabilities -> (B, 1, H, W) detached argmax labels.

    torch.argmax returns the first maximal index, so ties break toward the
    lowest class.
    """
    if probs.ndim != 4:
        raise ValueError(f"expected (B, C, H, W) probabilities, got {tuple(probs.shape)}")
    return probs.detach().argmax(dim=1, keepdim=True)


@dataclass(frozen=True)
class CutMixSpec:
    """Axis-aligned rectangle pasted from source b; outside it source a shows."""

    y0: int
    x0: int
    height: int
    width: int

    def mask(self, plane_hw, device=None) -> torch.Tensor:
        """Boolean (H, W) mask, True where source a is kept."""
        h, w = plane_hw
        if not (0 <= self.y0 and self.y0 + self.height <= h and 0 <= self.x0 and self.x0 + self.width <= w):
            raise ValueError(f"rectangle {self} exceeds plane {plane_hw}")
        m = torch.ones(h, w, dtype=torch.bool, device=device)
        m[self.y0 : self.y0 + self.height, self.x0 : self.x0 + self.width] = False
        return m


def sample_cutmix(plane_hw, rng: np.random.Generator) -> CutMixSpec:
    """Rectangle with area ratio sqrt-derived from a uniform draw, kept in (0, 1)."""
    h, w = plane_hw
    lam = rng.uniform(0.0, 1.0)
    cut = math.sqrt(1.0 - lam)
    rh = min(max(int(round(h * cut)), 1), h - 1)
    rw = min(max(int(round(w * cut)), 1), w - 1)
    y0 = int(rng.integers(0, h - rh + 1))
    x0 = int(rng.integers(0, w - rw + 1))
    return CutMixSpec(y0=y0, x0=x0, height=rh, width=rw)


def cutmix_pair(a: torch.Tensor, b: torch.Tensor, spec: CutMixSpec) -> torch.Tensor:
    """Mix two same-shape tensors; every output pixel comes from exactly one source."""
    if a.shape != b.shape:
        raise ValueError(f"cutmix inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    mask = spec.mask(a.shape[-2:], device=a.device)
    return torch.where(mask, a, b)


def cps_loss(
    probs_1: torch.Tensor,
    probs_2: torch.Tensor,
    pseudo_1: torch.Tensor,
    pseudo_2: torch.Tensor,
) -> torch.Tensor:
    """Cross supervision: each network's probabilities against the peer's labels."""
    return cross_entropy_labels(probs_2, pseudo_1) + cross_entropy_labels(probs_1, pseudo_2)


def supervised_loss(probs_1: torch.Tensor, probs_2: torch.Tensor, targets: torch.Tensor):
    """Cross-entropy + Dice for both networks against ground truth; summed report."""
    if targets.numel() == 0:
        raise ValueError("empty labeled batch")
    r1 = segmentation_loss(probs_1, targets)
    r2 = segmentation_loss(probs_2, targets)
    return LossReport(l_ce=r1.l_ce + r2.l_ce, l_dc=r1.l_dc + r2.l_dc, total=r1.total + r2.total)


@dataclass(frozen=True)
class Stage1LossReport:
    l_sup: float
    l_cps: float
    total: float


def _mixed_unlabeled(net_a, net_b, unlabeled, rng):
    """Pseudo labels on un-mixed inputs, then pairwise mixing with shared rectangles."""
    if unlabeled.shape[0] % 2:
        unlabeled = unlabeled[:-1]
    with torch.no_grad():
        pseudo_a = generate_pseudo_labels(net_a(unlabeled).probs)
        pseudo_b = generate_pseudo_labels(net_b(unlabeled).probs)
    images, mixed_a, mixed_b = [], [], []
    plane = unlabeled.shape[-2:]
    for i in range(0, unlabeled.shape[0], 2):
        spec = sample_cutmix(plane, rng)
        images.append(cutmix_pair(unlabeled[i], unlabeled[i + 1], spec))
        mixed_a.append(cutmix_pair(pseudo_a[i], pseudo_a[i + 1], spec))
        mixed_b.append(cutmix_pair(pseudo_b[i], pseudo_b[i + 1], spec))
    return torch.stack(images), torch.stack(mixed_a), torch.stack(mixed_b)


def train_step_2d(
    net_a,
    net_b,
    opt_a,
    opt_b,
    labeled_images: torch.Tensor,
    labeled_targets: torch.Tensor,
    unlabeled_images: torch.Tensor | None = None,
    cps_weight: float = 1.0,
    rng: np.random.Generator | None = None,
    cutmix: bool = True,
) -> Stage1LossReport:
    """One optimizer step for each network on the combined stage-one loss."""
    sup = supervised_loss(
        net_a(labeled_images).probs, net_b(labeled_images).probs, labeled_targets
    )
    l_sup = sup.total
    use_unlabeled = (
        unlabeled_images is not None and unlabeled_images.shape[0] >= 2 and cps_weight != 0.0
    )
    if use_unlabeled:
        if cutmix:
            if rng is None:
                raise ValueError("cutmix requires an rng")
            mixed, pseudo_a, pseudo_b = _mixed_unlabeled(net_a, net_b, unlabeled_images, rng)
        else:
            mixed = unlabeled_images
            with torch.no_grad():
                pseudo_a = generate_pseudo_labels(net_a(mixed).probs)
                pseudo_b = generate_pseudo_labels(net_b(mixed).probs)
        l_cps = cps_loss(net_a(mixed).probs, net_b(mixed).probs, pseudo_a, pseudo_b)
        total = l_sup + cps_weight * l_cps
    else:
        l_cps = torch.zeros((), device=labeled_images.device)
        total = l_sup
    if not torch.isfinite(total):
        raise RuntimeError(
            f"non-finite stage-one loss: l_sup={float(l_sup.detach())} l_cps={float(l_cps.detach())}"
        )
    opt_a.zero_grad(set_to_none=True)
    opt_b.zero_grad(set_to_none=True)
    total.backward()
    opt_a.step()
    opt_b.step()
    return Stage1LossReport(
        l_sup=float(l_sup.detach()), l_cps=float(l_cps.detach()), total=float(total.detach())
    )


class Stage1Trainer:
    """Owns the two peers, their optimizers and schedules, and the epoch loop."""

    def __init__(self, cfg: ExperimentConfig, out_dir: str | Path, device: str = "cpu"):
        self.cfg = cfg
        self.device = torch.device(device)
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        torch.manual_seed(cfg.seed)
        self.net_a = DeepLab2D(
            cfg.net2d, cfg.num_classes, cfg.feature2d_channels, instance_id=0
        ).to(self.device)
        self.net_b = DeepLab2D(
            cfg.net2d, cfg.num_classes, cfg.feature2d_channels, instance_id=1
        ).to(self.device)
        s1 = cfg.stage1
        self.opt_a = torch.optim.Adam(
            self.net_a.parameters(), lr=s1.lr, weight_decay=s1.weight_decay
        )
        self.opt_b = torch.optim.Adam(
            self.net_b.parameters(), lr=s1.lr, weight_decay=s1.weight_decay
        )
        self.sched_a = torch.optim.lr_scheduler.MultiStepLR(
            self.opt_a, milestones=list(s1.lr_milestones), gamma=s1.lr_gamma
        )
        self.sched_b = torch.optim.lr_scheduler.MultiStepLR(
            self.opt_b, milestones=list(s1.lr_milestones), gamma=s1.lr_gamma
        )
        self.rng = np.random.default_rng(cfg.seed)
        self.history: list[dict] = []

    def _checkpoint(self, tag: str, epoch: int, val_dsc: float | None):
        header = {
            "stage": 1,
            "epoch": epoch,
            "val_dsc": val_dsc,
            "config_hash": self.cfg.hash(),
            "config": self.cfg.to_dict(),
        }
        save_checkpoint(self.out_dir / f"stage1_a_{tag}.npz", self.net_a, dict(header, peer="a"))
        save_checkpoint(self.out_dir / f"stage1_b_{tag}.npz", self.net_b, dict(header, peer="b"))

    def _write_csv(self):
        path = self.out_dir / "stage1_log.csv"
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "l_sup", "l_cps", "total", "val_dsc"])
            writer.writeheader()
            writer.writerows(self.history)

    def fit(self, labeled_loader, unlabeled_loader=None, val_fn=None, epochs: int | None = None):
        """Train for the configured epochs; returns the per-epoch history.

        val_fn(net_a, net_b) -> float is called every cfg.stage1.val_every
        epochs and at the end; the best-validation pair is checkpointed
        alongside the final pair.
        """
        cfg1 = self.cfg.stage1
        epochs = cfg1.epochs if epochs is None else epochs
        best = -float("inf")
        unlabeled_iter = None
        for epoch in range(1, epochs + 1):
            self.net_a.train()
            self.net_b.train()
            sums = np.zeros(3)
            steps = 0
            for batch in labeled_loader:
                images, targets = batch
                images = images.to(self.device)
                targets = targets.to(self.device)
                unlabeled = None
                if unlabeled_loader is not None and cfg1.cps_weight != 0.0:
                    if unlabeled_iter is None:
                        unlabeled_iter = iter(unlabeled_loader)
                    try:
                        unlabeled = next(unlabeled_iter)
                    except StopIteration:
                        unlabeled_iter = iter(unlabeled_loader)
                        unlabeled = next(unlabeled_iter)
                    unlabeled = unlabeled.to(self.device)
                report = train_step_2d(
                    self.net_a,
                    self.net_b,
                    self.opt_a,
                    self.opt_b,
                    images,
                    targets,
                    unlabeled,
                    cps_weight=cfg1.cps_weight,
                    rng=self.rng,
                    cutmix=cfg1.cutmix,
                )
                sums += (report.l_sup, report.l_cps, report.total)
                steps += 1
            self.sched_a.step()
            self.sched_b.step()
            means = sums / max(steps, 1)
            val_dsc = None
            if val_fn is not None and (epoch % cfg1.val_every == 0 or epoch == epochs):
                val_dsc = float(val_fn(self.net_a, self.net_b))
                if val_dsc > best:
                    best = val_dsc
                    self._checkpoint("best", epoch, val_dsc)
            self.history.append(
                {
                    "epoch": epoch,
                    "l_sup": means[0],
                    "l_cps": means[1],
                    "total": means[2],
                    "val_dsc": "" if val_dsc is None else val_dsc,
                }
            )
        self._checkpoint("last", epochs, None)
        self._write_csv()
        return self.history
