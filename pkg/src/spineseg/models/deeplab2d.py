"""Stage-one 2D network: grouped-convolution SE encoder, dilated pyramid pooling,
and a two-hop decoder that exposes the fused low/high-level feature.

The encoder runs at output stride 16 (last stage dilated).  The decoder fuses
the stride-4 low-level feature with the 4x-upsampled pyramid output; that
fusion, refined to ``feature_channels``, is the feature handed to stage two.
Logits are classified at 1/4 resolution and bilinearly upsampled to the input
grid.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn
from torch.nn import functional as F

from ..config import Net2DConfig
from .blocks import Bottleneck2D, init_weights, norm2d


class Stage1Output(NamedTuple):
    logits: torch.Tensor  # (B, C1, H, W) at input resolution
    probs: torch.Tensor  # channel softmax of logits
    features: torch.Tensor  # (B, C2, H/4, W/4) fused decoder feature


class SEResNeXtEncoder2D(nn.Module):
    def __init__(self, cfg: Net2DConfig):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, cfg.stem_channels, 7, stride=2, padding=3, bias=False),
            norm2d(cfg.stem_channels),
            nn.ReLU(inplace=True),
        )
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)
        strides = (1, 2, 2, 1)
        dilations = (1, 1, 1, 2)  # dilate the last stage: output stride 16
        stages = []
        in_ch = cfg.stem_channels
        for i, (blocks, out_ch) in enumerate(zip(cfg.stage_blocks, cfg.stage_channels)):
            width = cfg.cardinality * cfg.bottleneck_width * (2**i)
            layer = []
            for b in range(blocks):
                layer.append(
                    Bottleneck2D(
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
        self.out_channels = cfg.stage_channels[-1]
        self.low_level_out_channels = cfg.stage_channels[0]

    def forward(self, x):
        x = self.pool(self.stem(x))
        low = self.stage1(x)  # stride 4
        x = self.stage2(low)
        x = self.stage3(x)
        x = self.stage4(x)  # stride 16
        return low, x


class ASPP2D(nn.Module):
    def __init__(self, in_ch, out_ch, rates):
        super().__init__()
        branches = [
            nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, bias=False), norm2d(out_ch), nn.ReLU(inplace=True))
        ]
        for r in rates:
            branches.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, out_ch, 3, padding=r, dilation=r, bias=False),
                    norm2d(out_ch),
                    nn.ReLU(inplace=True),
                )
            )
        self.branches = nn.ModuleList(branches)
        self.pool = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(in_ch, out_ch, 1, bias=False),
            nn.ReLU(inplace=True),
        )
        self.project = nn.Sequential(
            nn.Conv2d(out_ch * (len(branches) + 1), out_ch, 1, bias=False),
            norm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        outs = [branch(x) for branch in self.branches]
        pooled = F.interpolate(self.pool(x), size=x.shape[-2:], mode="bilinear", align_corners=False)
        outs.append(pooled)
        return self.project(torch.cat(outs, dim=1))


class DeepLab2D(nn.Module):
    """One stage-one peer; two differently-seeded instances cross-supervise each other."""

    def __init__(self, cfg: Net2DConfig, num_classes: int, feature_channels: int, instance_id: int = 1):
        super().__init__()
        self.instance_id = instance_id
        self.num_classes = num_classes
        self.feature_channels = feature_channels
        self.encoder = SEResNeXtEncoder2D(cfg)
        self.aspp = ASPP2D(self.encoder.out_channels, cfg.aspp_channels, cfg.aspp_rates)
        self.low_level_proj = nn.Sequential(
            nn.Conv2d(self.encoder.low_level_out_channels, cfg.low_level_channels, 1, bias=False),
            norm2d(cfg.low_level_channels),
            nn.ReLU(inplace=True),
        )
        self.refine = nn.Sequential(
            nn.Conv2d(cfg.aspp_channels + cfg.low_level_channels, cfg.decoder_channels, 3, padding=1, bias=False),
            norm2d(cfg.decoder_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(cfg.decoder_channels, feature_channels, 3, padding=1, bias=False),
            norm2d(feature_channels),
            nn.ReLU(inplace=True),
        )
        self.classifier = nn.Sequential(
            nn.Dropout(0.1), nn.Conv2d(feature_channels, num_classes, 1)
        )
        init_weights(self)

    def forward(self, x) -> Stage1Output:
        if x.ndim != 4 or x.shape[1] != self.encoder.stem[0].in_channels:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        low, high = self.encoder(x)
        context = self.aspp(high)
        context = F.interpolate(context, size=low.shape[-2:], mode="bilinear", align_corners=False)
        fused = self.refine(torch.cat([context, self.low_level_proj(low)], dim=1))
        logits = self.classifier(fused)
        logits = F.interpolate(logits, size=x.shape[-2:], mode="bilinear", align_corners=False)
        return Stage1Output(logits=logits, probs=torch.softmax(logits, dim=1), features=fused)

    def encoder_state(self) -> dict[str, torch.Tensor]:
        return {f"encoder.{k}": v for k, v in self.encoder.state_dict().items()}

    def load_pretrained_encoder(self, tensors: dict) -> list[str]:
        """Copy encoder tensors from a flat name->array mapping.

        Every encoder tensor must be present with an exactly matching shape;
        mismatches are reported by name.  Non-encoder entries in ``tensors``
        (decoder, heads) are ignored: those parts stay at their random init.
        """
        own = self.encoder.state_dict()
        missing = [k for k in own if f"encoder.{k}" not in tensors and k not in tensors]
        if missing:
            raise ValueError(f"pretrained archive missing encoder tensors: {missing[:5]}")
        bad = []
        new_state = {}
        for k, v in own.items():
            src = tensors.get(f"encoder.{k}", tensors.get(k))
            src = torch.as_tensor(src)
            if tuple(src.shape) != tuple(v.shape):
                bad.append(f"{k}: checkpoint {tuple(src.shape)} vs model {tuple(v.shape)}")
            else:
                new_state[k] = src.to(v.dtype)
        if bad:
            raise ValueError("pretrained encoder shape mismatch: " + "; ".join(bad))
        self.encoder.load_state_dict(new_state)
        return sorted(new_state)
