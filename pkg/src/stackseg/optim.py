"""AdamW with decoupled weight decay."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class AdamW:
    def __init__(self, params: list[Tensor], lr: float = 5e-4, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01,
                 lr_schedule: Callable[[int], float] | None = None):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_schedule = lr_schedule
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        if self.lr_schedule is None:
            return self.lr
        return self.lr * self.lr_schedule(self.step_count)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractError(f"trainable parameter {i} of shape {p.shape} has no gradient")
        lr = self.current_lr()
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype, copy=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step: int) -> None:
        for i in range(len(self.params)):
            self.m[i][...] = arrays[f"m.{i}"]
            self.v[i][...] = arrays[f"v.{i}"]
        self.step_count = step
