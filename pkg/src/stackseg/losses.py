"""Segmentation losses: soft Dice, BCE from logits, and their equal-weight sum."""
from __future__ import annotations

from dataclasses import dataclass

from .errors import DimensionError
from .tensor import Tensor, as_tensor, bce_with_logits, mul, sigmoid, tsum

DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    w_dice: float = 0.5
    w_bce: float = 0.5

    def __post_init__(self):
        if abs(self.w_dice + self.w_bce - 1.0) > 1e-12:
            raise ValueError(f"loss weights must sum to 1, got {self.w_dice} + {self.w_bce}")


def _check(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: prediction {a.shape} and target {b.shape} differ")


def dice_loss(pred, target, eps: float = DICE_EPS) -> Tensor:
    """``1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`` on probabilities."""
    pred = as_tensor(pred)
    target = as_tensor(target, pred.dtype)
    _check(pred, target, "dice_loss")
    inter = tsum(mul(pred, target))
    denom = tsum(pred) + tsum(target) + eps
    return 1.0 - (inter * 2.0 + eps) / denom


def bce_loss(logits, target) -> Tensor:
    logits = as_tensor(logits)
    target = as_tensor(target, logits.dtype)
    _check(logits, target, "bce_loss")
    return bce_with_logits(logits, target)


@dataclass
class LossParts:
    total: Tensor
    dice: Tensor
    bce: Tensor


def total_loss(logits, target, weights: LossWeights = LossWeights()) -> LossParts:
    """Weighted Dice + BCE on one logit map."""
    logits = as_tensor(logits)
    target = as_tensor(target, logits.dtype)
    d = dice_loss(sigmoid(logits), target)
    b = bce_loss(logits, target)
    return LossParts(d * weights.w_dice + b * weights.w_bce, d, b)
