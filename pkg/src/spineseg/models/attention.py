"""Self-attention blocks over feature volumes and their cross-branch fusion.

Three row layouts share one attention core.  Each mode flattens the volume into
``alpha`` rows of length ``beta``, builds an ``alpha x alpha`` affinity from
projected queries and keys, and re-weights the value rows:

==============  =====================  ========  ========
mode            row unit               alpha     beta
==============  =====================  ========  ========
inter_slice     one z slice            Z         C*W*H
intra_slice     one in-plane position  W*H       C*Z
channel         one channel            C         Z*W*H
==============  =====================  ========  ========

(W, H) here are the attention input's own in-plane dims, i.e. a quarter of the
patch plane.  Queries and keys are projected to C/d channels before
flattening (d=8 for the slice/position modes, d=1 for channel), so their rows
have length beta/d.

The fusion module applies inter-slice attention to the volumetric branch and
intra-slice attention to the planar branch, adds each (scaled by a
zero-initialised gamma) onto the opposite branch, and runs channel attention
over the concatenation.  At gamma zero the pre-channel streams are exactly the
raw opposite branches, so the attended paths fade in during training.
"""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

_MODES = ("inter_slice", "intra_slice", "channel")


def flatten_rows(x: torch.Tensor, mode: str) -> torch.Tensor:
    """(B, C, Z, W, H) -> (B, alpha, beta) for the given row layout."""
    b, c, z, w, h = x.shape
    if mode == "inter_slice":
        return x.permute(0, 2, 1, 3, 4).reshape(b, z, c * w * h)
    if mode == "intra_slice":
        return x.permute(0, 3, 4, 1, 2).reshape(b, w * h, c * z)
    if mode == "channel":
        return x.reshape(b, c, z * w * h)
    raise ValueError(f"unknown attention mode {mode!r}")


def unflatten_rows(rows: torch.Tensor, mode: str, shape) -> torch.Tensor:
    """Inverse of flatten_rows; bitwise round-trip."""
    b, c, z, w, h = shape
    if mode == "inter_slice":
        return rows.reshape(b, z, c, w, h).permute(0, 2, 1, 3, 4)
    if mode == "intra_slice":
        return rows.reshape(b, w, h, c, z).permute(0, 3, 4, 1, 2)
    if mode == "channel":
        return rows.reshape(b, c, z, w, h)
    raise ValueError(f"unknown attention mode {mode!r}")


class AttentionBlock(nn.Module):
    """Pure attention output, no residual; the caller owns any gamma scale.

    q and k are bias-free 1x1x1 convs to C/d channels, v a biased 1x1x1 conv
    at full width.  A = softmax(k' q') row-wise, output rows = A^T v'.
    """

    def __init__(self, channels: int, mode: str, reduction: int = 8):
        super().__init__()
        if mode not in _MODES:
            raise ValueError(f"unknown attention mode {mode!r}")
        if mode == "channel":
            reduction = 1
        if channels % reduction:
            raise ValueError(f"channels {channels} not divisible by reduction {reduction}")
        self.mode = mode
        self.reduction = reduction
        self.query = nn.Conv3d(channels, channels // reduction, 1, bias=False)
        self.key = nn.Conv3d(channels, channels // reduction, 1, bias=False)
        self.value = nn.Conv3d(channels, channels, 1)

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Row-stochastic (B, alpha, alpha) affinity, for inspection."""
        k = flatten_rows(self.key(x), self.mode)  # (B, alpha, beta/d)
        q = flatten_rows(self.query(x), self.mode).transpose(1, 2)  # (B, beta/d, alpha)
        return torch.softmax(torch.bmm(k, q), dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        weights = self.attention_weights(x)
        v = flatten_rows(self.value(x), self.mode)  # (B, alpha, beta)
        return unflatten_rows(torch.bmm(weights.transpose(1, 2), v), self.mode, x.shape)


class CrossAttentionFusion(nn.Module):
    """Exchange slice-wise and plane-wise context between the two branches.

    planar branch:     features distilled from the per-slice network
    volumetric branch: features from the 3D backbone, which carry the
                       inter-slice context, hence the inter-slice block
                       attends this branch and the intra-slice block the other
    Each attended branch lands as a gamma-scaled residual on the raw opposite
    branch; channel attention then mixes the 2*channels concatenation.
    """

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        self.channels = channels
        self.inter = AttentionBlock(channels, "inter_slice", reduction)
        self.intra = AttentionBlock(channels, "intra_slice", reduction)
        self.channel = AttentionBlock(2 * channels, "channel")
        self.gamma_inter = nn.Parameter(torch.zeros(()))
        self.gamma_intra = nn.Parameter(torch.zeros(()))

    def fuse_branches(self, planar: torch.Tensor, volumetric: torch.Tensor):
        """The two pre-channel streams; at gamma zero these equal the raw inputs."""
        if planar.shape != volumetric.shape:
            raise ValueError(
                f"branch shapes differ: {tuple(planar.shape)} vs {tuple(volumetric.shape)}"
            )
        first = self.gamma_inter * self.inter(volumetric) + planar
        second = self.gamma_intra * self.intra(planar) + volumetric
        return first, second

    def forward(self, planar: torch.Tensor, volumetric: torch.Tensor) -> torch.Tensor:
        first, second = self.fuse_branches(planar, volumetric)
        return self.channel(torch.cat([first, second], dim=1))


class PredictionHead(nn.Module):
    """Per-voxel class scores at full patch resolution from 1/4-plane features."""

    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        self.classify = nn.Conv3d(in_channels, num_classes, 1)

    def forward(self, x):
        return F.interpolate(
            self.classify(x), scale_factor=(1, 4, 4), mode="trilinear", align_corners=False
        )
