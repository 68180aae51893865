"""Stage-two 3D backbone: z-preserving encoder-decoder over full-resolution patches.

Slice spacing is an order of magnitude coarser than in-plane spacing, so every
stride, pooling and dilation acts in-plane only; the z extent survives end to
end.  The encoder reaches 1/16 in-plane with a dilated last stage, pyramid
pooling dilates in-plane only, and the decoder returns a feature at 1/4 of the
patch plane.
"""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

from ..config import Net3DConfig
from .blocks import Bottleneck3D, SepConv3d, init_weights, norm3d


class ASPP3D(nn.Module):
    def __init__(self, in_ch, out_ch, rates):
        super().__init__()
        branches = [
            nn.Sequential(nn.Conv3d(in_ch, out_ch, 1, bias=False), norm3d(out_ch), nn.ReLU(inplace=True))
        ]
        for r in rates:
            branches.append(
                nn.Sequential(
                    nn.Conv3d(in_ch, out_ch, 3, padding=(1, r, r), dilation=(1, r, r), bias=False),
                    norm3d(out_ch),
                    nn.ReLU(inplace=True),
                )
            )
        self.branches = nn.ModuleList(branches)
        self.pool = nn.Sequential(
            nn.AdaptiveAvgPool3d(1),
            nn.Conv3d(in_ch, out_ch, 1, bias=False),
            nn.ReLU(inplace=True),
        )
        self.project = nn.Sequential(
            nn.Conv3d(out_ch * (len(branches) + 1), out_ch, 1, bias=False),
            norm3d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        outs = [branch(x) for branch in self.branches]
        outs.append(F.interpolate(self.pool(x), size=x.shape[-3:], mode="trilinear", align_corners=False))
        return self.project(torch.cat(outs, dim=1))


class DeepLab3D(nn.Module):
    def __init__(self, cfg: Net3DConfig, in_channels: int, feature_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.feature_channels = feature_channels
        self.stem = nn.Sequential(
            nn.Conv3d(in_channels, cfg.stem_channels, 3, stride=(1, 2, 2), padding=1, bias=False),
            norm3d(cfg.stem_channels),
            nn.ReLU(inplace=True),
        )
        self.pool = nn.MaxPool3d((1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1))
        strides = (1, 2, 2, 1)
        dilations = (1, 1, 1, 2)
        stages = []
        in_ch = cfg.stem_channels
        for i, (blocks, out_ch) in enumerate(zip(cfg.stage_blocks, cfg.stage_channels)):
            width = cfg.cardinality * cfg.bottleneck_width * (2**i)
            layer = []
            for b in range(blocks):
                layer.append(
                    Bottleneck3D(
                        in_ch if b == 0 else out_ch,
                        out_ch,
                        width,
                        cfg.cardinality,
                        cfg.se_reduction,
                        stride=strides[i] if b == 0 else 1,
                        dilation=dilations[i],
                    )
                )
            stages.append(nn.Sequential(*layer))
            in_ch = out_ch
        self.stage1, self.stage2, self.stage3, self.stage4 = stages
        self.aspp = ASPP3D(cfg.stage_channels[-1], cfg.aspp_channels, cfg.aspp_rates)
        self.low_level_proj = nn.Sequential(
            nn.Conv3d(cfg.stage_channels[0], cfg.low_level_channels, 1, bias=False),
            norm3d(cfg.low_level_channels),
            nn.ReLU(inplace=True),
        )
        self.refine = nn.Sequential(
            SepConv3d(cfg.aspp_channels + cfg.low_level_channels, feature_channels),
            SepConv3d(feature_channels, feature_channels),
        )
        init_weights(self)

    def forward(self, x):
        """(B, in_channels, Z, w, h) -> (B, feature_channels, Z, w/4, h/4)."""
        if x.ndim != 5 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"expected (B, {self.in_channels}, Z, w, h) input, got {tuple(x.shape)}"
            )
        x = self.pool(self.stem(x))
        low = self.stage1(x)  # in-plane /4, z untouched
        x = self.stage2(low)
        x = self.stage3(x)
        x = self.stage4(x)  # in-plane /16
        x = self.aspp(x)
        x = F.interpolate(x, size=low.shape[-3:], mode="trilinear", align_corners=False)
        return self.refine(torch.cat([x, self.low_level_proj(low)], dim=1))
