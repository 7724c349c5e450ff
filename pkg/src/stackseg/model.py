"""Full segmentation model and the slice-by-slice self-prompting loop."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import functional as F
from .decoder import (DecoderStageOutput, MaskDecoderStage1, MaskDecoderStage2, PromptEmbedding,
                      PromptEncoder)
from .encoder import EncoderConfig, ImageEncoder
from .enhancer import FeatureEnhancer
from .errors import ConfigError, ContractError
from .memory import MemoryBank, MemoryEncoder
from .nn import Module
from .tensor import Tensor, as_tensor, no_grad, sigmoid


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    channels: int = 32
    memory_dim: int = 16
    memory_slots: int = 8
    memory_alpha: float = 0.3
    decoder_depth: int = 2
    decoder_heads: int = 4
    decoder_mlp_dim: int = 64
    use_enhancer: bool = True
    use_memory: bool = True
    use_bidirectional: bool = True
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if self.encoder.out_channels != self.channels:
            self.encoder = replace(self.encoder, out_channels=self.channels)
        if self.channels % 4 or self.channels % self.decoder_heads:
            raise ConfigError(f"channels {self.channels} must be divisible by 4 and by decoder_heads")
        if self.memory_dim > self.channels:
            raise ConfigError("memory_dim cannot exceed channels")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def toy_profile(**overrides) -> ModelConfig:
    """64x64 inputs, patch 4, embed 64, depth 2, heads 4, LoRA rank 4."""
    cfg = ModelConfig(encoder=EncoderConfig(patch_size=4, embed_dim=64, depth=2, num_heads=4, lora_rank=4,
                                            input_resolution=64, out_channels=32),
                      channels=32, memory_dim=16)
    return replace(cfg, **overrides) if overrides else cfg


def full_profile(**overrides) -> ModelConfig:
    """512x512 geometry: 256-channel features at 128x128, 128-channel memory."""
    cfg = ModelConfig(encoder=EncoderConfig(patch_size=4, embed_dim=256, depth=4, num_heads=8, lora_rank=4,
                                            input_resolution=512, out_channels=256),
                      channels=256, memory_dim=128, decoder_heads=8, decoder_mlp_dim=512)
    return replace(cfg, **overrides) if overrides else cfg


PROFILES = {"toy": toy_profile, "full": full_profile}


@dataclass
class SliceContext:
    """State carried from one slice to the next along z."""

    prev_final_mask: Tensor
    bank: MemoryBank
    slice_index: int = 0

    @classmethod
    def start(cls, shape: tuple, bank: MemoryBank, dtype=np.float32) -> "SliceContext":
        bank.reset()
        return cls(Tensor(np.zeros((1,) + tuple(shape), dtype=dtype)), bank, 0)


@dataclass
class SliceResult:
    final_mask: Tensor                  # probabilities, 1 x H x W
    logits: Tensor                      # 1 x H x W
    stage1: DecoderStageOutput
    prompt1_input: Tensor
    prompt2_input: Tensor | None
    prompt1: PromptEmbedding
    prompt2: PromptEmbedding | None
    combined: Tensor | None             # memory representation to store


class SegmentationModel(Module):
    def __init__(self, cfg: ModelConfig | None = None):
        cfg = cfg or toy_profile()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.np_dtype
        c = cfg.channels
        self.encoder = ImageEncoder(cfg.encoder, rng, dt)
        self.enhancer = FeatureEnhancer(c, rng, dt)
        self.memory = MemoryEncoder(c, cfg.memory_dim, rng, dt)
        self.prompt1 = PromptEncoder(c, rng, dt)
        self.prompt2 = PromptEncoder(c, rng, dt)
        self.stage1 = MaskDecoderStage1(c, cfg.decoder_depth, cfg.decoder_heads, cfg.decoder_mlp_dim, rng, dt)
        self.stage2 = MaskDecoderStage2(c, cfg.decoder_depth, cfg.decoder_heads, cfg.decoder_mlp_dim, rng, dt)

    @property
    def dtype(self):
        return self.cfg.np_dtype

    def new_bank(self) -> MemoryBank:
        return MemoryBank(self.cfg.memory_slots, self.cfg.memory_alpha, self.cfg.memory_dim)

    def active_parameters(self) -> list[Tensor]:
        """Trainable parameters of the components switched on in the config."""
        parts = [self.encoder, self.prompt1, self.stage1]
        if self.cfg.use_enhancer:
            parts.append(self.enhancer)
        if self.cfg.use_memory:
            parts.append(self.memory)
        if self.cfg.use_bidirectional:
            parts.extend([self.prompt2, self.stage2])
        return [p for m in parts for p in m.trainable_parameters()]

    def image_features(self, image) -> Tensor:
        feats = self.encoder(image)
        if self.cfg.use_enhancer:
            return self.enhancer(feats.f4, feats.f8, feats.f16)
        return feats.f4

    def forward_slice(self, image, prev_mask, bank: MemoryBank | None) -> SliceResult:
        """One pass of the pipeline; the bank is read but not updated."""
        image = as_tensor(image, self.dtype)
        prev_mask = as_tensor(prev_mask, self.dtype)
        if image.ndim != 3 or image.shape[0] != 1 or prev_mask.shape != image.shape:
            raise ContractError(f"image {image.shape} and previous mask {prev_mask.shape} must both be 1xHxW")
        _, h, w = image.shape
        feat = self.image_features(image)

        combined = None
        if self.cfg.use_memory:
            if bank is None:
                raise ContractError("memory is enabled but no bank was given")
            feat, combined = self.memory(feat, prev_mask, bank)

        if self.cfg.use_bidirectional:
            p1 = self.prompt1(prev_mask)
            s1 = self.stage1(feat, p1)
            hint = sigmoid(F.bilinear_resize(s1.logits, h, w))
            p2 = self.prompt2(hint)
            logits = self.stage2(feat, p2, s1)
            p1_input, p2_input = prev_mask, hint
        else:
            zero = Tensor(np.zeros_like(prev_mask.data))
            p1 = self.prompt1(zero)
            s1 = self.stage1(feat, p1)
            logits = F.bilinear_resize(s1.logits, h, w)
            p2, p1_input, p2_input = None, zero, None
        return SliceResult(sigmoid(logits), logits, s1, p1_input, p2_input, p1, p2, combined)

    def segment_slice(self, image, ctx: SliceContext) -> tuple[SliceResult, SliceContext]:
        return segment_slice(image, ctx, self)


def segment_slice(image, ctx: SliceContext, model: SegmentationModel) -> tuple[SliceResult, SliceContext]:
    """Segment one slice and advance the context.

    The final mask becomes the next slice's first prompt; the combined
    memory representation updates the bank.
    """
    if ctx.slice_index == 0 and np.any(ctx.prev_final_mask.data):
        raise ContractError("slice 0 must start from an all-zero previous mask")
    result = model.forward_slice(image, ctx.prev_final_mask, ctx.bank)
    if model.cfg.use_memory and result.combined is not None:
        with no_grad():
            ctx.bank.update(result.combined)
    ctx.prev_final_mask = result.final_mask if not result.final_mask.requires_grad else result.final_mask.detach()
    ctx.slice_index += 1
    return result, ctx
