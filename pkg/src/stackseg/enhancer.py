"""Multi-scale feature enhancer: fuses 1/4, 1/8 and 1/16 maps into one 1/4 map."""
from __future__ import annotations

import numpy as np

from . import functional as F
from .errors import DimensionError
from .nn import BatchNorm2d, Conv2d, Module
from .tensor import concat, relu


class SmoothBlock(Module):
    """3x3 conv, batch norm, ReLU."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float64):
        self.conv = Conv2d(channels, channels, 3, rng, dtype=dtype)
        self.bn = BatchNorm2d(channels, dtype=dtype)

    def forward(self, x):
        return relu(self.bn(self.conv(x)))


class FeatureEnhancer(Module):
    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float64):
        c = channels
        self.smooth8 = SmoothBlock(c, rng, dtype)
        self.smooth16 = SmoothBlock(c, rng, dtype)
        self.fuse_reduce = Conv2d(3 * c, c, 1, rng, dtype=dtype)
        self.fuse_bn = BatchNorm2d(c, dtype=dtype)
        self.fuse_conv1 = Conv2d(c, c, 3, rng, dtype=dtype)
        self.fuse_conv2 = Conv2d(c, c, 3, rng, dtype=dtype)
        self.proj_out = Conv2d(c, c, 1, rng, dtype=dtype)

    def forward(self, f4, f8, f16):
        c, h, w = f4.shape
        if f8.shape != (c, h // 2, w // 2) or f16.shape != (c, h // 4, w // 4) or h % 4 or w % 4:
            raise DimensionError(
                f"enhancer needs a 1 : 1/2 : 1/4 pyramid with equal channels, got {f4.shape}, {f8.shape}, {f16.shape}")
        up8 = F.bilinear_resize(f8, h, w)
        up16 = F.bilinear_resize(f16, h, w)
        u8 = up8 + self.smooth8(up8)
        u16 = up16 + self.smooth16(up16)
        fused = self.fuse_bn(self.fuse_reduce(concat([f4, u8, u16], axis=0)))
        fused = relu(self.fuse_conv1(fused))
        fused = relu(self.fuse_conv2(fused))
        return self.proj_out(fused) + f4


def enhance(f4, f8, f16, enhancer: FeatureEnhancer):
    return enhancer(f4, f8, f16)
