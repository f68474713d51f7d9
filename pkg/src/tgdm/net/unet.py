"""Convolutional backbones: the stage-1 light U-Net and the stage-2 residual U-Net."""
from __future__ import annotations

from typing import List, Tuple

import torch
import torch.nn as nn


def _norm_act(ch: int):
    return [nn.InstanceNorm3d(ch, affine=True), nn.LeakyReLU(0.01, inplace=True)]


class DoubleConv(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv3d(cin, cout, 3, padding=1), *_norm_act(cout),
            nn.Conv3d(cout, cout, 3, padding=1), *_norm_act(cout),
        )


class ResBlock(nn.Module):
    """conv-norm-act-conv-norm plus an identity (or 1x1 projected) shortcut."""

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv3d(cin, cout, 3, stride=stride, padding=1), *_norm_act(cout),
            nn.Conv3d(cout, cout, 3, padding=1), nn.InstanceNorm3d(cout, affine=True),
        )
        self.skip = (
            nn.Identity() if cin == cout and stride == 1
            else nn.Sequential(nn.Conv3d(cin, cout, 1, stride=stride), nn.InstanceNorm3d(cout, affine=True))
        )
        self.act = nn.LeakyReLU(0.01, inplace=True)

    def forward(self, x):
        return self.act(self.body(x) + self.skip(x))


def _check_input(x: torch.Tensor, in_channels: int, levels: int):
    if x.dim() != 5 or x.shape[1] != in_channels:
        raise ValueError(f"expected (B, {in_channels}, D, H, W), got {tuple(x.shape)}")
    if any(s % 2 ** (levels - 1) for s in x.shape[2:]):
        raise ValueError(f"spatial shape {tuple(x.shape[2:])} not divisible by {2 ** (levels - 1)}")


class LightUNet(nn.Module):
    """Plain U-Net: ``levels`` resolution levels, filters doubling from ``base``."""

    def __init__(self, in_channels: int = 1, num_classes: int = 2, levels: int = 3, base: int = 16):
        super().__init__()
        self.in_channels, self.levels = in_channels, levels
        widths = [base * 2**i for i in range(levels)]
        self.enc = nn.ModuleList(DoubleConv(cin, cout) for cin, cout in zip([in_channels] + widths[:-1], widths))
        self.pool = nn.MaxPool3d(2)
        self.up = nn.ModuleList(nn.ConvTranspose3d(widths[i + 1], widths[i], 2, stride=2) for i in range(levels - 1))
        self.dec = nn.ModuleList(DoubleConv(2 * widths[i], widths[i]) for i in range(levels - 1))
        self.head = nn.Conv3d(widths[0], num_classes, 1)

    def forward(self, x):
        _check_input(x, self.in_channels, self.levels)
        skips = []
        for i, block in enumerate(self.enc):
            x = block(x if i == 0 else self.pool(x))
            skips.append(x)
        x = skips.pop()
        for i in reversed(range(self.levels - 1)):
            x = self.dec[i](torch.cat([self.up[i](x), skips[i]], dim=1))
        return self.head(x)


class ResUNet(nn.Module):
    """Residual U-Net with strided-conv downsampling and transposed-conv upsampling.

    ``encode`` and ``decode`` are exposed separately so the point modules can
    act on the bottleneck (stride ``2**(levels-1)``).
    """

    def __init__(self, in_channels: int = 1, num_classes: int = 21, levels: int = 4, base: int = 32):
        super().__init__()
        self.in_channels, self.levels = in_channels, levels
        self.widths = [base * 2**i for i in range(levels)]
        w = self.widths
        self.enc = nn.ModuleList(
            [ResBlock(in_channels, w[0])] + [ResBlock(w[i - 1], w[i], stride=2) for i in range(1, levels)]
        )
        self.up = nn.ModuleList(nn.ConvTranspose3d(w[i + 1], w[i], 2, stride=2) for i in range(levels - 1))
        self.dec = nn.ModuleList(ResBlock(2 * w[i], w[i]) for i in range(levels - 1))
        self.head = nn.Conv3d(w[0], num_classes, 1)

    @property
    def bottleneck_channels(self) -> int:
        return self.widths[-1]

    def encode(self, x) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        _check_input(x, self.in_channels, self.levels)
        skips = []
        for block in self.enc:
            x = block(x)
            skips.append(x)
        return skips.pop(), skips

    def decode(self, x, skips: List[torch.Tensor]):
        for i in reversed(range(self.levels - 1)):
            x = self.dec[i](torch.cat([self.up[i](x), skips[i]], dim=1))
        return self.head(x)

    def forward(self, x):
        bottleneck, skips = self.encode(x)
        return self.decode(bottleneck, skips)
