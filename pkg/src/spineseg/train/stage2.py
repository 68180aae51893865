"""Stage-two training: the volumetric network over category-balanced patches.

Stage-one parameters are frozen behind the artifact cache; the trainable set
is the 3D backbone, the peer projections, the channel reduction, the attention
fusion, and the prediction head, all inside one module.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch

from ..checkpoint import save_checkpoint
from ..config import ExperimentConfig
from ..losses import segmentation_loss
from ..models import FineNet
from .patches import PatchSource, assemble_batch, epoch_patches


class Stage2Trainer:
    def __init__(self, cfg: ExperimentConfig, out_dir: str | Path, device: str = "cpu"):
        self.cfg = cfg
        self.device = torch.device(device)
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        torch.manual_seed(cfg.seed + 1)
        self.net = FineNet(cfg).to(self.device)
        s2 = cfg.stage2
        self.opt = torch.optim.Adam(self.net.parameters(), lr=s2.lr, weight_decay=s2.weight_decay)
        self.sched = torch.optim.lr_scheduler.MultiStepLR(
            self.opt, milestones=list(s2.lr_milestones), gamma=s2.lr_gamma
        )
        self.rng = np.random.default_rng(cfg.seed + 1)
        self.history: list[dict] = []

    def _checkpoint(self, tag: str, epoch: int, val_dsc: float | None):
        header = {
            "stage": 2,
            "epoch": epoch,
            "val_dsc": val_dsc,
            "config_hash": self.cfg.hash(),
            "config": self.cfg.to_dict(),
        }
        save_checkpoint(self.out_dir / f"stage2_{tag}.npz", self.net, header)

    def _write_csv(self):
        with (self.out_dir / "stage2_log.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "l_ce", "l_dc", "total", "val_dsc"])
            writer.writeheader()
            writer.writerows(self.history)

    def train_step(self, pairs) -> dict:
        inputs, feats, labels = assemble_batch(pairs)
        inputs = inputs.to(self.device)
        feats = feats.to(self.device)
        labels = labels.to(self.device)
        out = self.net(inputs, feats)
        report = segmentation_loss(out.probs, labels)
        if not torch.isfinite(report.total):
            raise RuntimeError(
                f"non-finite stage-two loss: l_ce={float(report.l_ce.detach())}"
                f" l_dc={float(report.l_dc.detach())}"
            )
        self.opt.zero_grad(set_to_none=True)
        report.total.backward()
        self.opt.step()
        return report.detached()

    def fit(self, sources: list[PatchSource], val_fn=None, epochs: int | None = None):
        """val_fn(net) -> float, called every cfg.stage2.val_every epochs and at the end."""
        s2 = self.cfg.stage2
        epochs = s2.epochs if epochs is None else epochs
        best = -float("inf")
        for epoch in range(1, epochs + 1):
            self.net.train()
            pairs = epoch_patches(sources, s2.patches_per_subject, self.rng)
            sums = np.zeros(3)
            steps = 0
            for at in range(0, len(pairs), s2.batch_size):
                stats = self.train_step(pairs[at : at + s2.batch_size])
                sums += (stats["l_ce"], stats["l_dc"], stats["total"])
                steps += 1
            self.sched.step()
            means = sums / max(steps, 1)
            val_dsc = None
            if val_fn is not None and (epoch % s2.val_every == 0 or epoch == epochs):
                val_dsc = float(val_fn(self.net))
                if val_dsc > best:
                    best = val_dsc
                    self._checkpoint("best", epoch, val_dsc)
            self.history.append(
                {
                    "epoch": epoch,
                    "l_ce": means[0],
                    "l_dc": means[1],
                    "total": means[2],
                    "val_dsc": "" if val_dsc is None else val_dsc,
                }
            )
        self._checkpoint("last", epochs, None)
        self._write_csv()
        return self.history
