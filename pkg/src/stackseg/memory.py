"""Slot memory: per-position attention over a ring of past states, EMA updates.

The current slice's features are projected to ``d`` channels and added to
an embedding of the previous slice's mask.  At every spatial position the
combined vector queries the ``m <= M`` slot vectors stored at the same
position, and the attention read-out is added back residually.  After the
slice is segmented the bank's running average is updated and pushed into
the slot ring (oldest slot evicted first).
"""
from __future__ import annotations

import math
from collections import deque

import numpy as np

from . import functional as F
from .errors import DimensionError
from .nn import Conv2d, Module
from .tensor import Tensor, as_tensor, matmul, mul, relu, softmax, tsum


class MemoryBank:
    """Ring of ``max_slots`` feature maps plus the exponential moving average."""

    def __init__(self, max_slots: int = 8, alpha: float = 0.3, dim: int | None = None,
                 ema_state: np.ndarray | None = None):
        if not 0.0 < alpha < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {alpha}")
        self.max_slots = max_slots
        self.alpha = alpha
        self.dim = dim
        self.slots: deque[np.ndarray] = deque(maxlen=max_slots)
        self.ema_state = None if ema_state is None else np.array(ema_state, copy=True)
        self.updates = 0

    def __len__(self) -> int:
        return len(self.slots)

    @property
    def geometry(self) -> tuple | None:
        if self.slots:
            return self.slots[0].shape
        return None if self.ema_state is None else self.ema_state.shape

    def reset(self) -> None:
        self.slots.clear()
        self.ema_state = None
        self.updates = 0

    def update(self, combined) -> None:
        """EMA step ``M_t = (1 - alpha) M_{t-1} + alpha F_t`` then push into the ring.

        Never recorded for differentiation.  With no prior state the first
        update stores ``F_t`` itself.
        """
        feat = combined.data if isinstance(combined, Tensor) else np.asarray(combined)
        geom = self.geometry
        if geom is not None and feat.shape != geom:
            raise DimensionError(f"bank holds maps of shape {geom}, got {feat.shape}")
        if self.ema_state is None:
            self.ema_state = feat.copy()
        else:
            self.ema_state = (1.0 - self.alpha) * self.ema_state + self.alpha * feat
        self.slots.append(self.ema_state.copy())
        self.updates += 1

    def stacked(self) -> np.ndarray:
        """Slots as an ``m x d x H x W`` array, oldest first."""
        return np.stack(list(self.slots))

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        if self.ema_state is not None:
            out["ema_state"] = self.ema_state
        for i, s in enumerate(self.slots):
            out[f"slot.{i}"] = s
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.reset()
        self.ema_state = arrays.get("ema_state")
        i = 0
        while f"slot.{i}" in arrays:
            self.slots.append(np.array(arrays[f"slot.{i}"]))
            i += 1


class Pointwise(Module):
    """1x1 convolution held as a ``C_out x C_in`` matrix."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float64):
        bound = 1.0 / math.sqrt(c_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (c_out, c_in)).astype(dtype), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, c_out).astype(dtype), requires_grad=True)

    def forward(self, x):
        return F.pointwise(x, self.weight, self.bias)

    def apply_stacked(self, x: Tensor) -> Tensor:
        """Apply to an ``m x C_in x P`` stack of flattened maps."""
        return matmul(self.weight, x) + self.bias.reshape(-1, 1)


class MemoryEncoder(Module):
    def __init__(self, channels: int, dim: int, rng: np.random.Generator, dtype=np.float64):
        if channels < dim:
            raise DimensionError(f"memory width {dim} exceeds feature channels {channels}")
        self.proj = Pointwise(channels, dim, rng, dtype)
        self.mask_conv1 = Conv2d(1, dim, 3, rng, stride=2, dtype=dtype)
        self.mask_conv2 = Conv2d(dim, dim, 3, rng, stride=2, dtype=dtype)
        self.q = Pointwise(dim, dim, rng, dtype)
        self.k = Pointwise(dim, dim, rng, dtype)
        self.v = Pointwise(dim, dim, rng, dtype)
        self.out_proj = Pointwise(dim, channels, rng, dtype)
        self.dim = dim
        self._dtype = dtype

    def project_features(self, f):
        return self.proj(f)

    def encode_mask(self, prev_mask, target_h: int, target_w: int):
        m = as_tensor(prev_mask, self._dtype)
        x = relu(self.mask_conv1(m))
        x = relu(self.mask_conv2(x))
        if x.shape[1:] != (target_h, target_w):
            x = F.bilinear_resize(x, target_h, target_w)
        return x

    def combine(self, features, prev_mask):
        proj = self.project_features(features)
        return proj + self.encode_mask(prev_mask, proj.shape[1], proj.shape[2])

    def read(self, combined, bank: MemoryBank):
        """Pre-residual attention read-out and the slot weights.

        Returns ``(readout d x H x W, weights m x H x W)`` or ``None`` for an
        empty bank.
        """
        if len(bank) == 0:
            return None
        d, h, w = combined.shape
        slots = bank.stacked()
        if slots.shape[1:] != (d, h, w):
            raise DimensionError(f"slot maps {slots.shape[1:]} do not match combined features {combined.shape}")
        m = slots.shape[0]
        mem = Tensor(slots.reshape(m, d, h * w).astype(self._dtype, copy=False))
        q = self.q.apply_stacked(combined.reshape(1, d, h * w))      # 1 x d x P
        k = self.k.apply_stacked(mem)                                  # m x d x P
        v = self.v.apply_stacked(mem)
        scores = tsum(mul(q, k), axis=1) * (1.0 / math.sqrt(d))        # m x P
        weights = softmax(scores, axis=0)
        readout = tsum(mul(weights.reshape(m, 1, h * w), v), axis=0)  # d x P
        return readout.reshape(d, h, w), weights.reshape(m, h, w)

    def attend(self, combined, bank: MemoryBank):
        res = self.read(combined, bank)
        if res is None:
            return combined
        return combined + res[0]

    def forward(self, features, prev_mask, bank: MemoryBank):
        """Memory-conditioned features and the combined representation to store."""
        combined = self.combine(features, prev_mask)
        attended = self.attend(combined, bank)
        return features + self.out_proj(attended), combined


def reference_self_attention(x, q: Pointwise, k: Pointwise, v: Pointwise):
    """Full spatial self-attention over all ``H*W`` positions (cost reference only)."""
    d, h, w = x.shape
    flat = x.reshape(1, d, h * w)
    qq = q.apply_stacked(flat).reshape(d, h * w)
    kk = k.apply_stacked(flat).reshape(d, h * w)
    vv = v.apply_stacked(flat).reshape(d, h * w)
    scores = matmul(qq.transpose(1, 0), kk) * (1.0 / math.sqrt(d))   # P x P
    weights = softmax(scores, axis=-1)
    return matmul(vv, weights.transpose(1, 0)).reshape(d, h, w)
