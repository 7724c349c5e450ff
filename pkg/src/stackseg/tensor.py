"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable operation that touches a ``requires_grad`` input
records a :class:`Node` on its output.  Nodes carry a global sequence
number, so the execution order of a graph can be recovered exactly and
:func:`backward` walks it in strict reverse order.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_seq = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, memory updates)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@dataclass
class OpCounter:
    """Multiplication counts gathered by :func:`count_ops`."""

    mults: int = 0
    by_op: dict = field(default_factory=dict)

    def add(self, op: str, n: int) -> None:
        self.mults += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


@contextmanager
def count_ops():
    """Count scalar multiplications performed by ``mul`` and ``matmul``.

    Used to instrument the cost of attention variants.
    """
    counter = OpCounter()
    stack = getattr(_state, "counters", None)
    if stack is None:
        stack = _state.counters = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.pop()


def _count(op: str, n: int) -> None:
    stack = getattr(_state, "counters", None)
    if stack:
        for c in stack:
            c.add(op, n)


class Node:
    __slots__ = ("op", "inputs", "backward", "seq")

    def __init__(self, op: str, inputs: tuple, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.seq = next(_seq)


class Tensor:
    """An n-dimensional array that can participate in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self, grad=None) -> None:
        backward(self, grad)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _binary_dtype(a, b):
    if isinstance(a, Tensor):
        return a.dtype
    if isinstance(b, Tensor):
        return b.dtype
    return np.float64


def _make(data: np.ndarray, inputs: tuple, backward: Callable, op: str) -> Tensor:
    requires = _grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = requires
    out.grad = None
    out._node = Node(op, inputs, backward) if requires else None
    out.name = None
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Tape and backward
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class TapeEntry:
    op: str
    inputs: tuple
    output: Tensor
    seq: int


class Tape:
    """Ordered record of the operations that produced a tensor.

    Entries are sorted by execution order; an entry always appears after the
    entries that produced its inputs.
    """

    def __init__(self, entries: list[TapeEntry]):
        self.entries = entries

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        produced: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._node is not None:
                produced.append(t)
                stack.extend(t._node.inputs)
        produced.sort(key=lambda t: t._node.seq)
        return cls([TapeEntry(t._node.op, t._node.inputs, t, t._node.seq) for t in produced])

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def contains(self, t: Tensor) -> bool:
        if any(e.output is t for e in self.entries):
            return True
        return any(any(i is t for i in e.inputs) for e in self.entries)

    def ops(self) -> list[str]:
        return [e.op for e in self.entries]


def backward(loss: Tensor, grad=None) -> None:
    """Populate ``.grad`` on every ``requires_grad`` tensor reachable from ``loss``.

    Gradients accumulate across repeated calls; reset them with
    ``zero_grad`` on the leaves.
    """
    if grad is None:
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")

    tape = Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): grad}
    reached: dict[int, Tensor] = {id(loss): loss}
    for entry in reversed(tape.entries):
        out = entry.output
        g = grads.get(id(out))
        if g is None:
            continue
        in_grads = out._node.backward(g)
        for inp, gi in zip(entry.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                reached[key] = inp
    for key, t in reached.items():
        g = grads[key]
        if g.shape != t.shape:
            g = unbroadcast(g, t.shape)
        g = g.astype(t.dtype, copy=False)
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------
def _pair(a, b):
    dt = _binary_dtype(a, b)
    return as_tensor(a, dt), as_tensor(b, dt)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data
    _count("mul", out.size)
    ad, bd = a.data, b.data

    def bw(g):
        return (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,),
                 lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    from scipy.special import erf

    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    out = (x * cdf).astype(a.dtype)

    def bw(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + x * pdf),)

    return _make(out, (a,), bw, "gelu")


# ---------------------------------------------------------------------------
# Linear algebra and shape manipulation
# ---------------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch-broadcasting semantics (ndim >= 2)."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)
    batch = int(np.prod(out.shape[:-2])) if out.ndim > 2 else 1
    _count("matmul", batch * ad.shape[-2] * ad.shape[-1] * bd.shape[-1])

    def bw(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data
    src_shape, dt = a.shape, a.dtype

    def bw(g):
        full = np.zeros(src_shape, dtype=dt)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bw, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat of an empty sequence")
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(ts), bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(out, tuple(ts), bw, "stack")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------
def _expand(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return _make(out, (a,), lambda g: (_expand(g, shape, axis, keepdims),), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.size / max(out.size, 1)
    return _make(out, (a,), lambda g: (_expand(g, shape, axis, keepdims) / n,), "mean")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def bce_with_logits(logits, target) -> Tensor:
    """Mean binary cross-entropy computed from logits (log-sum-exp form)."""
    z = as_tensor(logits)
    t = as_tensor(target, z.dtype)
    if z.shape != t.shape:
        raise DimensionError(f"bce shapes differ: {z.shape} vs {t.shape}")
    x, y = z.data, t.data
    per = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    out = np.asarray(per.mean(), dtype=z.dtype)
    n = x.size

    def bw(g):
        e = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        gz = g * (sig - y) / n if z.requires_grad else None
        gt = g * (-x) / n if t.requires_grad else None
        return gz, gt

    return _make(out, (z, t), bw, "bce_with_logits")


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
