"""Stage-two network: volumetric backbone plus attention fusion of both stages."""

from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn

from ..config import ExperimentConfig
from .attention import CrossAttentionFusion, PredictionHead
from .bridge import ChannelReduction, PeerFeatureProjection
from .deeplab3d import DeepLab3D


class FineOutput(NamedTuple):
    logits: torch.Tensor  # (B, C, Z, h, w)
    probs: torch.Tensor  # softmax of logits over dim 1


class FineNet(nn.Module):
    """Input patch is the image concatenated with the coarse confidence volume.

    The cached peer feature stack rides along at quarter in-plane resolution;
    it is lifted per peer, reduced to the backbone width, and fused with the
    backbone output by cross attention before the prediction head.
    """

    def __init__(self, cfg: ExperimentConfig):
        super().__init__()
        self.num_classes = cfg.num_classes
        self.feature2d_channels = cfg.feature2d_channels
        self.backbone = DeepLab3D(
            cfg.net3d, in_channels=1 + cfg.num_classes, feature_channels=cfg.feature3d_channels
        )
        self.projection = PeerFeatureProjection(cfg.feature2d_channels, cfg.feature3d_channels)
        self.reduction = ChannelReduction(2 * cfg.feature3d_channels, cfg.feature3d_channels)
        self.fusion = CrossAttentionFusion(cfg.feature3d_channels)
        self.head = PredictionHead(cfg.fused_channels, cfg.num_classes)

    def forward(self, patch: torch.Tensor, peer_features: torch.Tensor) -> FineOutput:
        if patch.ndim != 5 or patch.shape[1] != 1 + self.num_classes:
            raise ValueError(
                f"expected (B, {1 + self.num_classes}, Z, h, w) patch, got {tuple(patch.shape)}"
            )
        b, _, z, h, w = patch.shape
        want = (b, 2 * self.feature2d_channels, z, h // 4, w // 4)
        if tuple(peer_features.shape) != want:
            raise ValueError(f"expected {want} peer features, got {tuple(peer_features.shape)}")
        volumetric = self.backbone(patch)
        planar = self.reduction(self.projection(peer_features))
        logits = self.head(self.fusion(planar, volumetric))
        return FineOutput(logits=logits, probs=torch.softmax(logits, dim=1))
