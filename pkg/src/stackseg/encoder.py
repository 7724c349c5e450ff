"""ViT-style image encoder with frozen base weights and low-rank bypasses.

The encoder tokenises the image into ``patch_size`` patches, runs
``depth`` pre-norm transformer blocks, and returns three feature maps at
1/4, 1/8 and 1/16 of the input resolution.  Only the low-rank ``A``/``B``
matrices attached to the query and value projections are trainable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .errors import ConfigError, DimensionError
from .nn import MLP, Conv2d, LayerNorm, Linear, Module, multi_head_attention
from .positional import encode_grid
from .tensor import Tensor, as_tensor, gelu, matmul, transpose


@dataclass
class EncoderConfig:
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 4
    lora_rank: int = 4
    lora_scale: float | None = None  # defaults to 1 / lora_rank
    input_resolution: int = 64
    mlp_ratio: int = 4
    out_channels: int = 32

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.input_resolution % (self.patch_size * 4):
            raise ConfigError(
                f"input_resolution {self.input_resolution} not divisible by patch_size*4 = {self.patch_size * 4}")
        if self.lora_scale is None:
            self.lora_scale = 1.0 / self.lora_rank


class LoraLinear(Module):
    """Frozen linear map plus a trainable rank-``r`` bypass ``scale * B @ A``."""

    def __init__(self, d_in: int, d_out: int, rank: int, scale: float, rng: np.random.Generator,
                 dtype=np.float64):
        bound = 1.0 / np.sqrt(d_in)
        self.base_weight = Tensor(rng.uniform(-bound, bound, (d_out, d_in)).astype(dtype))
        self.base_bias = Tensor(rng.uniform(-bound, bound, d_out).astype(dtype))
        self.A = Tensor(rng.normal(0.0, 0.02, (rank, d_in)).astype(dtype), requires_grad=True)
        self.B = Tensor(np.zeros((d_out, rank), dtype=dtype), requires_grad=True)
        self.rank = rank
        self.scale = scale
        self.enabled = True

    def base(self, x):
        return F.linear(x, self.base_weight, self.base_bias)

    def forward(self, x):
        out = self.base(x)
        if not self.enabled:
            return out
        low = matmul(matmul(x, transpose(self.A)), transpose(self.B))
        return out + low * self.scale


class EncoderBlock(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float64):
        d = cfg.embed_dim
        self.norm1 = LayerNorm(d, dtype=dtype, frozen=True)
        self.q = LoraLinear(d, d, cfg.lora_rank, cfg.lora_scale, rng, dtype)
        self.k = Linear(d, d, rng, dtype=dtype, frozen=True)
        self.v = LoraLinear(d, d, cfg.lora_rank, cfg.lora_scale, rng, dtype)
        self.proj = Linear(d, d, rng, dtype=dtype, frozen=True)
        self.norm2 = LayerNorm(d, dtype=dtype, frozen=True)
        self.mlp = MLP([d, d * cfg.mlp_ratio, d], rng, dtype=dtype, activation=gelu, frozen=True)
        self.heads = cfg.num_heads

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.proj(multi_head_attention(self.q(h), self.k(h), self.v(h), self.heads))
        return x + self.mlp(self.norm2(x))


@dataclass
class EncoderFeatures:
    f4: Tensor
    f8: Tensor
    f16: Tensor


class ImageEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float64):
        p, d, c = cfg.patch_size, cfg.embed_dim, cfg.out_channels
        self.cfg = cfg
        self.patch_embed = Linear(p * p, d, rng, dtype=dtype, frozen=True)
        self.blocks = [EncoderBlock(cfg, rng, dtype) for _ in range(cfg.depth)]
        self.neck = Conv2d(d, c, 1, rng, dtype=dtype, frozen=True)
        self.down8 = Conv2d(c, c, 3, rng, stride=2, dtype=dtype, frozen=True)
        self.down16 = Conv2d(c, c, 3, rng, stride=2, dtype=dtype, frozen=True)
        self._dtype = dtype

    def lora_layers(self) -> list[LoraLinear]:
        return [m for m in self.modules() if isinstance(m, LoraLinear)]

    def set_lora(self, enabled: bool) -> None:
        for layer in self.lora_layers():
            layer.enabled = enabled

    def forward(self, image, lora: bool = True) -> EncoderFeatures:
        image = as_tensor(image, self._dtype)
        if image.ndim != 3 or image.shape[0] != 1:
            raise DimensionError(f"encoder expects a 1xHxW image, got {image.shape}")
        _, h, w = image.shape
        if h % 16 or w % 16:
            raise DimensionError(f"image size {h}x{w} is not divisible by 16")
        p = self.cfg.patch_size
        if h % p or w % p:
            raise DimensionError(f"image size {h}x{w} is not divisible by patch size {p}")
        gh, gw = h // p, w // p
        patches = transpose(image.reshape(gh, p, gw, p), (0, 2, 1, 3)).reshape(gh * gw, p * p)
        pos = encode_grid(gh, gw, self.cfg.embed_dim).astype(self._dtype)
        x = self.patch_embed(patches) + pos

        previous = [layer.enabled for layer in self.lora_layers()]
        self.set_lora(lora)
        try:
            for block in self.blocks:
                x = block(x)
        finally:
            for layer, flag in zip(self.lora_layers(), previous):
                layer.enabled = flag

        grid = transpose(x, (1, 0)).reshape(self.cfg.embed_dim, gh, gw)
        f4 = self.neck(grid)
        if (gh, gw) != (h // 4, w // 4):
            f4 = F.bilinear_resize(f4, h // 4, w // 4)
        f8 = self.down8(f4)
        f16 = self.down16(f8)
        return EncoderFeatures(f4, f8, f16)


def encode(image, encoder: ImageEncoder) -> EncoderFeatures:
    """Multi-scale features of a ``1 x H x W`` image."""
    return encoder(image)


def trainable_parameters(encoder: ImageEncoder) -> list[Tensor]:
    """The low-rank matrices of every bypass, in block order."""
    out = []
    for layer in encoder.lora_layers():
        out.extend([layer.A, layer.B])
    return out


def trainable_fraction(encoder: ImageEncoder) -> float:
    trainable = sum(p.size for p in trainable_parameters(encoder))
    return trainable / encoder.num_parameters()
