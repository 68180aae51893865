"""Cross-entropy and Dice losses over probability maps, plus the stage losses.

Both losses consume softmax probabilities, not logits.  Cross-entropy averages
over every counted pixel of the batch; Dice is computed per sample and class
and averaged, with a small smoothing term so classes absent from both target
and prediction score as perfect overlap.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

PROB_FLOOR = 1e-12
DICE_SMOOTH = 1e-5


def one_hot(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Index map (N, *spatial) or (N, 1, *spatial) -> one-hot float (N, C, *spatial)."""
    if labels.ndim >= 3 and labels.shape[1] == 1:
        labels = labels.squeeze(1)
    oh = torch.nn.functional.one_hot(labels.long(), num_classes)
    dims = (0, labels.ndim) + tuple(range(1, labels.ndim))
    return oh.permute(dims).to(torch.float32)


def cross_entropy(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean of -target * log(probs) over all counted pixels of the batch.

    ``target`` is one-hot with the same shape as ``probs``; probabilities are
    floored at 1e-12 before the log.
    """
    if probs.shape != target.shape:
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)} vs target {tuple(target.shape)}")
    log_p = probs.clamp_min(PROB_FLOOR).log()
    n_pixels = probs.numel() // probs.shape[1]
    return -(target * log_p).sum() / n_pixels


def cross_entropy_labels(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy against an integer class map; labels carry no gradient."""
    return cross_entropy(probs, one_hot(labels.detach(), probs.shape[1]))


def dice_loss(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Negative soft Dice, averaged over samples and classes; range [-1, 0]."""
    if probs.shape != target.shape:
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)} vs target {tuple(target.shape)}")
    dims = tuple(range(2, probs.ndim))
    intersection = (probs * target).sum(dims)
    denom = (probs + target).sum(dims)
    dice = (2.0 * intersection + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    return -dice.mean()


@dataclass
class LossReport:
    l_ce: torch.Tensor
    l_dc: torch.Tensor
    total: torch.Tensor

    def detached(self) -> dict[str, float]:
        return {
            "l_ce": float(self.l_ce.detach()),
            "l_dc": float(self.l_dc.detach()),
            "total": float(self.total.detach()),
        }


def segmentation_loss(probs: torch.Tensor, labels: torch.Tensor) -> LossReport:
    """Compound CE + Dice against an integer label map (used by the 3D stage)."""
    target = one_hot(labels.detach(), probs.shape[1])
    l_ce = cross_entropy(probs, target)
    l_dc = dice_loss(probs, target)
    return LossReport(l_ce=l_ce, l_dc=l_dc, total=l_ce + l_dc)
