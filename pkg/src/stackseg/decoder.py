"""Mask prompt encoders and the two-stage mask decoder."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import functional as F
from .errors import DimensionError
from .nn import MLP, Attention, Conv2d, ConvTranspose2d, LayerNorm, Module
from .positional import encode_grid, encode_point, pixel_to_grid
from .tensor import Tensor, as_tensor, concat, gelu, matmul, transpose

MAX_POINT_PROMPTS = 8


@dataclass
class PromptEmbedding:
    dense: Tensor                       # C x H/4 x W/4
    sparse: Tensor                      # T x C, first row is the default token
    centroids: list = field(default_factory=list)   # (row, col) in feature-grid units


@dataclass
class DecoderStageOutput:
    logits: Tensor                      # 1 x Hs x Ws
    decoder_features: Tensor            # C x H/4 x W/4


def mask_centroids(mask: np.ndarray, threshold: float = 0.5, limit: int = MAX_POINT_PROMPTS) -> list:
    """Pixel centroids of the ``limit`` largest connected components, largest first."""
    labels, n = ndimage.label(mask > threshold)
    if n == 0:
        return []
    idx = np.arange(1, n + 1)
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, idx)
    order = sorted(idx, key=lambda i: (-sizes[i - 1], i))[:limit]
    centres = ndimage.center_of_mass(np.ones_like(labels, dtype=np.float64), labels, order)
    return [(float(r), float(c)) for r, c in centres]


class PromptEncoder(Module):
    """Dense mask embedding plus point tokens at connected-component centroids."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float64):
        self.conv1 = Conv2d(1, max(channels // 4, 1), 3, rng, stride=2, dtype=dtype)
        self.conv2 = Conv2d(max(channels // 4, 1), channels, 3, rng, stride=2, dtype=dtype)
        self.default_token = Tensor(rng.normal(0, 0.5, (1, channels)).astype(dtype), requires_grad=True)
        self.point_embed = Tensor(rng.normal(0, 0.5, (1, channels)).astype(dtype), requires_grad=True)
        self.channels = channels
        self._dtype = dtype

    def forward(self, mask) -> PromptEmbedding:
        mask = as_tensor(mask, self._dtype)
        dense = gelu(self.conv2(gelu(self.conv1(mask))))
        _, h, w = mask.shape
        sh, sw = h / dense.shape[1], w / dense.shape[2]
        centres = [(pixel_to_grid(r, sh), pixel_to_grid(c, sw)) for r, c in mask_centroids(mask.data[0])]
        tokens = [self.default_token]
        if centres:
            pe = np.stack([encode_point(r, c, self.channels) for r, c in centres]).astype(self._dtype)
            tokens.append(self.point_embed + pe)
        return PromptEmbedding(dense, concat(tokens, axis=0), centres)


class TwoWayBlock(Module):
    def __init__(self, dim: int, heads: int, mlp_dim: int, rng: np.random.Generator, dtype=np.float64,
                 skip_first_pe: bool = False):
        self.self_attn = Attention(dim, heads, rng, dtype)
        self.norm1 = LayerNorm(dim, dtype)
        self.cross_token_to_image = Attention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = MLP([dim, mlp_dim, dim], rng, dtype=dtype)
        self.norm3 = LayerNorm(dim, dtype)
        self.cross_image_to_token = Attention(dim, heads, rng, dtype)
        self.norm4 = LayerNorm(dim, dtype)
        self.skip_first_pe = skip_first_pe

    def forward(self, queries, keys, query_pe, key_pe):
        if self.skip_first_pe:
            queries = self.self_attn(queries, queries, queries)
        else:
            q = queries + query_pe
            queries = queries + self.self_attn(q, q, queries)
        queries = self.norm1(queries)

        q, k = queries + query_pe, keys + key_pe
        queries = self.norm2(queries + self.cross_token_to_image(q, k, keys))
        queries = self.norm3(queries + self.mlp(queries))

        q, k = queries + query_pe, keys + key_pe
        keys = self.norm4(keys + self.cross_image_to_token(k, q, queries))
        return queries, keys


class TwoWayTransformer(Module):
    """Tokens and image positions attend to each other in alternation."""

    def __init__(self, dim: int, depth: int, heads: int, mlp_dim: int, rng: np.random.Generator,
                 dtype=np.float64):
        self.blocks = [TwoWayBlock(dim, heads, mlp_dim, rng, dtype, skip_first_pe=(i == 0))
                       for i in range(depth)]
        self.final_attn = Attention(dim, heads, rng, dtype)
        self.norm_final = LayerNorm(dim, dtype)

    def forward(self, image, image_pe, tokens):
        queries, keys = tokens, image
        for block in self.blocks:
            queries, keys = block(queries, keys, tokens, image_pe)
        q, k = queries + tokens, keys + image_pe
        queries = self.norm_final(queries + self.final_attn(q, k, keys))
        return queries, keys


def _decoder_inputs(img_feat, prompt: PromptEmbedding, dtype):
    c, h, w = img_feat.shape
    if prompt.dense.shape != img_feat.shape:
        raise DimensionError(f"dense prompt {prompt.dense.shape} does not match image features {img_feat.shape}")
    src = transpose((img_feat + prompt.dense).reshape(c, h * w), (1, 0))
    pe = Tensor(encode_grid(h, w, c).astype(dtype))
    return src, pe


class MaskDecoderStage1(Module):
    """Two-way transformer and a 1/4-resolution pixel head (coarse prior)."""

    def __init__(self, channels: int, depth: int, heads: int, mlp_dim: int, rng: np.random.Generator,
                 dtype=np.float64):
        self.transformer = TwoWayTransformer(channels, depth, heads, mlp_dim, rng, dtype)
        self.mask_token = Tensor(rng.normal(0, 0.5, (1, channels)).astype(dtype), requires_grad=True)
        self.hyper = MLP([channels, channels, channels], rng, dtype=dtype)
        self._dtype = dtype

    def forward(self, img_feat, prompt: PromptEmbedding) -> DecoderStageOutput:
        c, h, w = img_feat.shape
        src, pe = _decoder_inputs(img_feat, prompt, self._dtype)
        tokens = concat([self.mask_token, prompt.sparse], axis=0)
        queries, keys = self.transformer(src, pe, tokens)
        feats = transpose(keys, (1, 0))                          # C x P
        hyper = self.hyper(queries[0:1])                         # 1 x C
        logits = matmul(hyper, feats).reshape(1, h, w)
        return DecoderStageOutput(logits, feats.reshape(c, h, w))


class MaskDecoderStage2(Module):
    """Two-way transformer and a hierarchical pixel decoder to full resolution.

    The first stage's image features enter through a skip connection before
    two stride-2 transposed convolutions.
    """

    def __init__(self, channels: int, depth: int, heads: int, mlp_dim: int, rng: np.random.Generator,
                 dtype=np.float64):
        c = channels
        self.transformer = TwoWayTransformer(c, depth, heads, mlp_dim, rng, dtype)
        self.mask_token = Tensor(rng.normal(0, 0.5, (1, c)).astype(dtype), requires_grad=True)
        self.skip_fuse = Conv2d(2 * c, c, 1, rng, dtype=dtype)
        self.up1 = ConvTranspose2d(c, c // 2, 2, rng, stride=2, dtype=dtype)
        self.up2 = ConvTranspose2d(c // 2, c // 4, 2, rng, stride=2, dtype=dtype)
        self.hyper = MLP([c, c, c // 4], rng, dtype=dtype)
        self._dtype = dtype

    def forward(self, img_feat, prompt: PromptEmbedding, stage1: DecoderStageOutput) -> Tensor:
        c, h, w = img_feat.shape
        if stage1.decoder_features.shape[1:] != (h, w):
            raise DimensionError(
                f"stage-1 features {stage1.decoder_features.shape} do not match image features {img_feat.shape}")
        src, pe = _decoder_inputs(img_feat, prompt, self._dtype)
        tokens = concat([self.mask_token, prompt.sparse], axis=0)
        queries, keys = self.transformer(src, pe, tokens)
        feats = transpose(keys, (1, 0)).reshape(c, h, w)
        x = gelu(self.skip_fuse(concat([feats, stage1.decoder_features], axis=0)))
        x = gelu(self.up1(x))
        x = gelu(self.up2(x))
        co, ho, wo = x.shape
        hyper = self.hyper(queries[0:1])                         # 1 x C/4
        return matmul(hyper, x.reshape(co, ho * wo)).reshape(1, ho, wo)


def decode_stage1(img_feat, prompt, decoder: MaskDecoderStage1) -> DecoderStageOutput:
    return decoder(img_feat, prompt)


def decode_stage2(img_feat, prompt, stage1, decoder: MaskDecoderStage2) -> Tensor:
    return decoder(img_feat, prompt, stage1)


def upsample_logits(logits, h: int, w: int):
    return F.bilinear_resize(logits, h, w)
