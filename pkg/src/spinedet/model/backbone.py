"""3D ResNet-50 style encoder with an FPN whose finest level sits at stride 2."""
from __future__ import annotations

import math

import torch.nn as nn
import torch.nn.functional as F


def group_norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(ch, 8), ch)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_ch, planes, stride=1):
        super().__init__()
        out_ch = planes * self.expansion
        self.conv1 = nn.Conv3d(in_ch, planes, 1, bias=False)
        self.gn1 = group_norm(planes)
        self.conv2 = nn.Conv3d(planes, planes, 3, stride=stride, padding=1, bias=False)
        self.gn2 = group_norm(planes)
        self.conv3 = nn.Conv3d(planes, out_ch, 1, bias=False)
        self.gn3 = group_norm(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv3d(in_ch, out_ch, 1, stride=stride, bias=False), group_norm(out_ch))

    def forward(self, x):
        idt = x if self.shortcut is None else self.shortcut(x)
        x = F.relu(self.gn1(self.conv1(x)))
        x = F.relu(self.gn2(self.conv2(x)))
        x = self.gn3(self.conv3(x))
        return F.relu(x + idt)


class ResNetFPN(nn.Module):
    """Returns ``[P1, P2, P3, P4]`` at strides 2, 4, 8, 16, each with ``fpn_channels``.

    The stem runs at full resolution (no stride, no max-pool) so the first
    residual stage, and hence P1, lands at stride 2.
    """

    def __init__(self, base: int = 64, fpn_channels: int = 256, depths=(3, 4, 6, 3)):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv3d(1, base, 3, padding=1, bias=False), group_norm(base), nn.ReLU(inplace=True))
        stages, in_ch = [], base
        for i, depth in enumerate(depths):
            planes = base * 2**i
            blocks = [Bottleneck(in_ch, planes, stride=2)]
            in_ch = planes * Bottleneck.expansion
            blocks += [Bottleneck(in_ch, planes) for _ in range(depth - 1)]
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)
        self.lateral = nn.ModuleList(
            nn.Conv3d(base * 2**i * Bottleneck.expansion, fpn_channels, 1) for i in range(len(depths))
        )
        self.smooth = nn.Conv3d(fpn_channels, fpn_channels, 3, padding=1)
        self.total_stride = 2 ** len(depths)

    def forward(self, x):
        feats = []
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        p = self.lateral[-1](feats[-1])
        pyramid = [p]
        for lat, f in zip(reversed(self.lateral[:-1]), reversed(feats[:-1])):
            p = lat(f) + F.interpolate(p, size=f.shape[2:], mode="nearest")
            pyramid.append(p)
        pyramid = pyramid[::-1]
        pyramid[0] = self.smooth(pyramid[0])
        return pyramid
