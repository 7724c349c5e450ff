"""Minimal module system: parameter registration, train/eval mode, layers."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, matmul, softmax, transpose


class Module:
    """Container that discovers parameters and submodules from its attributes.

    Tensors stored as attributes are parameters; a parameter is frozen when
    ``requires_grad`` is False.  Names listed in ``_buffers`` are plain
    numpy arrays that are saved in checkpoints but never trained.
    """

    _buffers: tuple[str, ...] = ()
    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        for name, t in self._walk(prefix):
            if id(t) not in seen:
                seen.add(id(t))
                yield name, t

    def _walk(self, prefix: str):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value._walk(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk(f"{name}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        return [t for t in self.parameters() if t.requires_grad]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in self._buffers:
            yield f"{prefix}{key}", getattr(self, key)
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{key}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def num_parameters(self, trainable_only: bool = False) -> int:
        ps = self.trainable_parameters() if trainable_only else self.parameters()
        return int(sum(p.size for p in ps))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 dtype=np.float64, frozen: bool = False):
        self.weight = Tensor(_uniform(rng, (d_out, d_in), d_in, dtype), requires_grad=not frozen)
        self.bias = Tensor(_uniform(rng, (d_out,), d_in, dtype), requires_grad=not frozen) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 padding: int | None = None, bias: bool = True, dtype=np.float64, frozen: bool = False):
        fan_in = c_in * kernel * kernel
        self.weight = Tensor(_uniform(rng, (c_out, c_in, kernel, kernel), fan_in, dtype),
                             requires_grad=not frozen)
        self.bias = Tensor(_uniform(rng, (c_out,), fan_in, dtype), requires_grad=not frozen) if bias else None
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 2,
                 dtype=np.float64):
        fan_in = c_out * kernel * kernel
        self.weight = Tensor(_uniform(rng, (c_in, c_out, kernel, kernel), fan_in, dtype), requires_grad=True)
        self.bias = Tensor(_uniform(rng, (c_out,), fan_in, dtype), requires_grad=True)
        self.stride = stride

    def forward(self, x):
        return F.conv_transpose2d(x, self.weight, self.bias, stride=self.stride)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, dtype=np.float64, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return F.batch_norm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              training=self.training, momentum=self.momentum, eps=self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64, frozen: bool = False):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=not frozen)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=not frozen)

    def forward(self, x):
        return F.layer_norm(x, self.gamma, self.beta)


def multi_head_attention(q, k, v, heads: int):
    """Scaled dot-product attention on already-projected ``N x D`` inputs."""
    nq, dim = q.shape
    nk = k.shape[0]
    dh = dim // heads
    qh = transpose(q.reshape(nq, heads, dh), (1, 0, 2))
    kh = transpose(k.reshape(nk, heads, dh), (1, 2, 0))
    vh = transpose(v.reshape(nk, heads, dh), (1, 0, 2))
    attn = softmax(matmul(qh, kh) * (1.0 / math.sqrt(dh)), axis=-1)
    out = matmul(attn, vh)
    return transpose(out, (1, 0, 2)).reshape(nq, dim)


class Attention(Module):
    """Multi-head attention with separate q/k/v/out projections."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float64):
        assert dim % heads == 0, "dim must be divisible by heads"
        self.q = Linear(dim, dim, rng, dtype=dtype)
        self.k = Linear(dim, dim, rng, dtype=dtype)
        self.v = Linear(dim, dim, rng, dtype=dtype)
        self.out = Linear(dim, dim, rng, dtype=dtype)
        self.heads = heads

    def forward(self, q, k, v):
        return self.out(multi_head_attention(self.q(q), self.k(k), self.v(v), self.heads))


class MLP(Module):
    def __init__(self, dims: list[int], rng: np.random.Generator, dtype=np.float64,
                 activation=None, frozen: bool = False):
        from .tensor import relu

        self.layers = [Linear(a, b, rng, dtype=dtype, frozen=frozen) for a, b in zip(dims[:-1], dims[1:])]
        self._act = activation or relu

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self._act(x)
        return x
