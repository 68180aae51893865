"""Shared building blocks: squeeze-excitation, grouped bottlenecks, separable 3D convs.

2D blocks use batch norm (momentum 0.1, matching common pretrained encoders);
3D blocks use instance norm so small patch batches stay stable and evaluation
is independent of batch composition.
"""

from __future__ import annotations

import torch
from torch import nn


def init_weights(module: nn.Module):
    """He fan-in init for convs, unit/zero for norm layers, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm3d, nn.InstanceNorm3d, nn.GroupNorm)):
            if m.weight is not None:
                nn.init.ones_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def norm2d(channels: int) -> nn.Module:
    return nn.BatchNorm2d(channels, momentum=0.1)


def norm3d(channels: int) -> nn.Module:
    return nn.InstanceNorm3d(channels, affine=True, track_running_stats=False)


class SqueezeExcite(nn.Module):
    """Channel gating from globally pooled statistics; works for 2D and 3D."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        pooled = x.mean(dim=tuple(range(2, x.ndim)))
        gate = torch.sigmoid(self.fc2(torch.relu(self.fc1(pooled))))
        return x * gate.reshape(*gate.shape, *([1] * (x.ndim - 2)))


class Bottleneck2D(nn.Module):
    def __init__(self, in_ch, out_ch, width, cardinality, se_reduction, stride=1, dilation=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, width, 1, bias=False)
        self.bn1 = norm2d(width)
        self.conv2 = nn.Conv2d(
            width, width, 3, stride=stride, padding=dilation, dilation=dilation,
            groups=cardinality, bias=False,
        )
        self.bn2 = norm2d(width)
        self.conv3 = nn.Conv2d(width, out_ch, 1, bias=False)
        self.bn3 = norm2d(out_ch)
        self.se = SqueezeExcite(out_ch, se_reduction)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), norm2d(out_ch)
            )

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.se(self.bn3(self.conv3(out)))
        return self.relu(out + identity)


class Bottleneck3D(nn.Module):
    """Grouped 3D bottleneck; stride and dilation act in-plane only (z untouched)."""

    def __init__(self, in_ch, out_ch, width, cardinality, se_reduction, stride=1, dilation=1):
        super().__init__()
        s = (1, stride, stride)
        d = (1, dilation, dilation)
        p = (1, dilation, dilation)
        self.conv1 = nn.Conv3d(in_ch, width, 1, bias=False)
        self.n1 = norm3d(width)
        self.conv2 = nn.Conv3d(
            width, width, 3, stride=s, padding=p, dilation=d, groups=cardinality, bias=False
        )
        self.n2 = norm3d(width)
        self.conv3 = nn.Conv3d(width, out_ch, 1, bias=False)
        self.n3 = norm3d(out_ch)
        self.se = SqueezeExcite(out_ch, se_reduction)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv3d(in_ch, out_ch, 1, stride=s, bias=False), norm3d(out_ch)
            )

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        out = self.relu(self.n1(self.conv1(x)))
        out = self.relu(self.n2(self.conv2(out)))
        out = self.se(self.n3(self.conv3(out)))
        return self.relu(out + identity)


class SepConv3d(nn.Module):
    """Depthwise 3x3x3 + pointwise 1x1x1 with norm and activation."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.depthwise = nn.Conv3d(in_ch, in_ch, 3, padding=1, groups=in_ch, bias=False)
        self.pointwise = nn.Conv3d(in_ch, out_ch, 1, bias=False)
        self.norm = norm3d(out_ch)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.relu(self.norm(self.pointwise(self.depthwise(x))))
