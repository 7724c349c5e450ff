"""Training loop: chained slices, scheduled self-prompting, deep supervision."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .augment import AugmentationConfig, sample_transform
from .losses import LossWeights, total_loss
from .model import SegmentationModel
from .optim import AdamW
from .pipeline import evaluate_masks, segment_volume
from .tensor import Tensor, backward
from .volume import VolumeStack


@dataclass
class TrainConfig:
    lr: float = 5e-4
    steps: int = 1000
    batch_size: int = 1
    chain_length: int = 2
    gt_prompt_prob: float = 0.5
    stage1_weight: float = 0.5
    stage2_weight: float = 1.0
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    augment: bool = True
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig(**self.augmentation)
        self.betas = tuple(self.betas)


def downsample_target(mask: np.ndarray, factor: int) -> np.ndarray:
    """Area-average pooling by ``factor`` followed by a 0.5 threshold."""
    c, h, w = mask.shape
    pooled = mask.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    return (pooled > 0.5).astype(mask.dtype)


class Trainer:
    """Owns the optimizer and RNG; one :meth:`step` is one AdamW update."""

    def __init__(self, model: SegmentationModel, volumes: Sequence[VolumeStack], cfg: TrainConfig,
                 optimizer: AdamW | None = None):
        for v in volumes:
            if v.labels is None:
                from .errors import ConfigError

                raise ConfigError(f"volume {v.name!r} has no labels; training needs labelled data")
        self.model = model
        self.volumes = list(volumes)
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.optimizer = optimizer or AdamW(model.active_parameters(), lr=cfg.lr, betas=cfg.betas,
                                            eps=cfg.eps, weight_decay=cfg.weight_decay)
        self.weights = LossWeights()

    @property
    def step_count(self) -> int:
        return self.optimizer.step_count

    def _sample_chain(self):
        cfg = self.cfg
        vol = self.volumes[int(self.rng.integers(len(self.volumes)))]
        k = min(cfg.chain_length, vol.depth)
        t0 = int(self.rng.integers(0, vol.depth - k + 1))
        images = vol.slices[t0:t0 + k].astype(np.float64)
        masks = vol.labels[t0:t0 + k].astype(np.float64)
        prev = vol.labels[t0 - 1].astype(np.float64) if t0 > 0 else np.zeros_like(masks[0])
        if cfg.augment:
            tf = sample_transform(cfg.augmentation, self.rng, images.shape)
            images = tf.apply_image(images)
            masks = tf.apply_mask(masks)
            prev = tf.apply_mask(prev)
        return images, masks, prev, t0

    def chain_loss(self, images: np.ndarray, masks: np.ndarray, prev_gt: np.ndarray, first_index: int):
        """Summed loss over a chain of consecutive slices; bank updates are detached."""
        cfg, model = self.cfg, self.model
        dt = model.dtype
        bank = model.new_bank()
        use_gt = first_index > 0 and self.rng.random() < cfg.gt_prompt_prob
        prev = (prev_gt if use_gt else np.zeros_like(prev_gt))[None].astype(dt)
        losses, parts = [], []
        for k in range(len(images)):
            target = masks[k][None].astype(dt)
            res = model.forward_slice(images[k][None].astype(dt), prev, bank)
            final = total_loss(res.logits, target, self.weights)
            loss = final.total * (cfg.stage2_weight if model.cfg.use_bidirectional else 1.0)
            if model.cfg.use_bidirectional and cfg.stage1_weight:
                t1 = downsample_target(target, target.shape[1] // res.stage1.logits.shape[1])
                loss = loss + total_loss(res.stage1.logits, t1, self.weights).total * cfg.stage1_weight
            losses.append(loss)
            parts.append(final)
            if model.cfg.use_memory:
                bank.update(res.combined)
            if self.rng.random() < cfg.gt_prompt_prob:
                prev = target
            else:
                prev = res.final_mask.data.copy()
        total = losses[0]
        for extra in losses[1:]:
            total = total + extra
        total = total * (1.0 / len(losses))
        return total, parts

    def step(self) -> dict:
        t0 = time.perf_counter()
        self.model.train()
        self.optimizer.zero_grad()
        stats = {"loss": 0.0, "dice": 0.0, "bce": 0.0}
        for _ in range(self.cfg.batch_size):
            images, masks, prev, first = self._sample_chain()
            total, parts = self.chain_loss(images, masks, prev, first)
            backward(total * (1.0 / self.cfg.batch_size))
            stats["loss"] += total.item() / self.cfg.batch_size
            stats["dice"] += float(np.mean([p.dice.item() for p in parts])) / self.cfg.batch_size
            stats["bce"] += float(np.mean([p.bce.item() for p in parts])) / self.cfg.batch_size
        lr = self.optimizer.current_lr()
        for p in self.optimizer.params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        self.optimizer.step()
        stats.update(step=self.step_count, lr=lr, time=time.perf_counter() - t0)
        return stats

    def fit(self, steps: int | None = None, callback: Callable[[dict], None] | None = None) -> list[dict]:
        steps = self.cfg.steps if steps is None else steps
        history = []
        for _ in range(steps):
            rec = self.step()
            history.append(rec)
            if callback is not None:
                callback(rec)
        return history


def evaluate(model: SegmentationModel, stack: VolumeStack, window: int | None = None, overlap: int = 0,
             threshold: float = 0.5) -> dict:
    masks = segment_volume(stack, model, window, overlap)
    out = evaluate_masks(masks, stack.labels, threshold)
    out["per_slice_dice"] = [
        float(2 * np.logical_and(m > threshold, t).sum() / max((m > threshold).sum() + t.sum(), 1))
        for m, t in zip(masks, stack.labels.astype(bool))
    ]
    return out


def fit_batch(model: SegmentationModel, images: np.ndarray, masks: np.ndarray, steps: int = 50,
              lr: float = 5e-4, seed: int = 0) -> list[float]:
    """Optimise the combined loss on a fixed batch of independent slices (no prompts, empty memory)."""
    opt = AdamW(model.active_parameters(), lr=lr)
    dt = model.dtype
    model.train()
    history = []
    for _ in range(steps):
        opt.zero_grad()
        total = None
        for img, m in zip(images, masks):
            res = model.forward_slice(img[None].astype(dt), np.zeros((1,) + m.shape, dt), model.new_bank())
            loss = total_loss(res.logits, Tensor(m[None].astype(dt))).total
            total = loss if total is None else total + loss
        total = total * (1.0 / len(images))
        backward(total)
        for p in opt.params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        opt.step()
        history.append(total.item())
    return history
