"""Differentiable neural-network primitives on single images.

Feature maps are ``C x H x W`` (no batch axis); token sequences are ``N x D``.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError
from .tensor import Tensor, _count, _make, as_tensor, matmul, transpose


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a ``C_in x H x W`` map with ``C_out x C_in x k x k`` kernels."""
    x, weight = as_tensor(x), as_tensor(weight, x.dtype)
    if x.ndim != 3 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects CxHxW input and 4-d kernel, got {x.shape} and {weight.shape}")
    c_out, c_in, kh, kw = weight.shape
    if x.shape[0] != c_in:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {weight.shape}")
    _, h, w = x.shape
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"kernel {weight.shape} larger than padded input {x.shape} (padding={padding})")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xd, wd = x.data, weight.data
    w2 = wd.reshape(c_out, -1)

    if kh == 1 and kw == 1 and padding == 0:
        xs = xd[:, ::stride, ::stride]
        cols = xs.reshape(c_in, -1)
    else:
        xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding))) if padding else xd
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        # (C, Ho, Wo, kh, kw) -> (C, kh, kw, Ho, Wo)
        cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c_in * kh * kw, ho * wo)
    out = w2 @ cols
    _count("conv2d", out.size * cols.shape[0])
    if bias is not None:
        bias = as_tensor(bias, x.dtype)
        out = out + bias.data[:, None]
    out = out.reshape(c_out, ho, wo)

    def bw(g):
        g2 = g.reshape(c_out, -1)
        gw = (g2 @ cols.T).reshape(wd.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = w2.T @ g2
            if kh == 1 and kw == 1 and padding == 0:
                gx = np.zeros_like(xd)
                gx[:, ::stride, ::stride] = dcols.reshape(c_in, ho, wo)
            else:
                dcols = dcols.reshape(c_in, kh, kw, ho, wo)
                dxp = np.zeros((c_in, h + 2 * padding, w + 2 * padding), dtype=xd.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
                gx = dxp[:, padding:padding + h, padding:padding + w] if padding else dxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, bw, "conv2d")


def conv_transpose2d(x, weight, bias=None, stride: int = 2) -> Tensor:
    """Transposed convolution without padding; ``weight`` is ``C_in x C_out x k x k``.

    Output size is ``(H - 1) * stride + k``.
    """
    x, weight = as_tensor(x), as_tensor(weight, x.dtype)
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[0] != x.shape[0]:
        raise DimensionError(f"conv_transpose2d shape mismatch: input {x.shape}, kernel {weight.shape}")
    c_in, h, w = x.shape
    _, c_out, kh, kw = weight.shape
    ho, wo = (h - 1) * stride + kh, (w - 1) * stride + kw
    xd, wd = x.data, weight.data
    w2 = wd.reshape(c_in, -1)
    x2 = xd.reshape(c_in, -1)
    cols = (w2.T @ x2).reshape(c_out, kh, kw, h, w)
    _count("conv_transpose2d", cols.size * c_in)
    out = np.zeros((c_out, ho, wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * h:stride, j:j + stride * w:stride] += cols[:, i, j]
    if bias is not None:
        bias = as_tensor(bias, x.dtype)
        out += bias.data[:, None, None]

    def bw(g):
        gcols = np.empty((c_out, kh, kw, h, w), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gcols[:, i, j] = g[:, i:i + stride * h:stride, j:j + stride * w:stride]
        gcols = gcols.reshape(c_out * kh * kw, h * w)
        gx = (w2 @ gcols).reshape(xd.shape) if x.requires_grad else None
        gw = (x2 @ gcols.T).reshape(wd.shape) if weight.requires_grad else None
        gb = g.sum(axis=(1, 2)) if bias is not None and bias.requires_grad else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, bw, "conv_transpose2d")


@lru_cache(maxsize=256)
def _interp_plan(n_in: int, n_out: int):
    """Half-pixel-center source indices and weights for one axis."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.arange(n_out), i0), 1.0 - frac)
    np.add.at(mat, (np.arange(n_out), i1), frac)
    return i0, i1, frac, mat


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense ``n_out x n_in`` matrix of the 1-D half-pixel bilinear map."""
    return _interp_plan(n_in, n_out)[3].copy()


def bilinear_resize(x, target_h: int, target_w: int) -> Tensor:
    """Resize a ``C x H x W`` map with half-pixel-center bilinear sampling."""
    x = as_tensor(x)
    if target_h < 1 or target_w < 1:
        raise DimensionError(f"resize target must be >= 1, got {(target_h, target_w)}")
    c, h, w = x.shape
    if (h, w) == (target_h, target_w):
        return _make(x.data.copy(), (x,), lambda g: (g,), "resize")
    y0, y1, fy, my = _interp_plan(h, target_h)
    x0, x1, fx, mx = _interp_plan(w, target_w)
    d = x.data
    fy_ = fy.astype(d.dtype)[None, :, None]
    fx_ = fx.astype(d.dtype)[None, None, :]
    # lerp form a + f*(b - a) keeps constant inputs exact
    a, b = d[:, y0, :], d[:, y1, :]
    rows = a + fy_ * (b - a)
    a, b = rows[:, :, x0], rows[:, :, x1]
    out = a + fx_ * (b - a)
    my_t, mx_ = my.T.astype(d.dtype), mx.astype(d.dtype)

    def bw(g):
        return (np.matmul(np.matmul(my_t, g), mx_),)

    return _make(out, (x,), bw, "resize")


def batch_norm2d(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
                 training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over the spatial axes.

    In training mode the batch statistics are used and the running
    estimates are updated in place (unbiased variance, like the common
    frameworks).
    """
    x = as_tensor(x)
    gamma, beta = as_tensor(gamma, x.dtype), as_tensor(beta, x.dtype)
    c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm affine params {gamma.shape}/{beta.shape} do not match {c} channels")
    n = h * w
    if n == 0:
        raise DimensionError(f"batchnorm over zero spatial extent: {x.shape}")
    xd = x.data
    if training:
        mu = xd.mean(axis=(1, 2))
        var = xd.var(axis=(1, 2))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * n / (n - 1) if n > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[:, None, None]) * inv[:, None, None]
    gd, bd = gamma.data, beta.data
    out = gd[:, None, None] * xhat + bd[:, None, None]

    def bw(g):
        gg = (g * xhat).sum(axis=(1, 2)) if gamma.requires_grad else None
        gb = g.sum(axis=(1, 2)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gd[:, None, None]
            if training:
                s1 = dxhat.sum(axis=(1, 2), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(1, 2), keepdims=True)
                gx = inv[:, None, None] * (dxhat - s1 / n - xhat * s2 / n)
            else:
                gx = dxhat * inv[:, None, None]
        return gx, gg, gb

    return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw, "batchnorm2d")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis."""
    x = as_tensor(x)
    gamma, beta = as_tensor(gamma, x.dtype), as_tensor(beta, x.dtype)
    xd = x.data
    d = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw, "layer_norm")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored ``d_out x d_in``."""
    out = matmul(x, transpose(weight))
    if bias is not None:
        out = out + bias
    return out


def pointwise(x, weight, bias=None) -> Tensor:
    """1x1 convolution expressed as a matrix product on a ``C x H x W`` map.

    ``weight`` is ``C_out x C_in``.
    """
    x = as_tensor(x)
    c, h, w = x.shape
    out = matmul(weight, x.reshape(c, h * w))
    if bias is not None:
        out = out + as_tensor(bias).reshape(-1, 1)
    return out.reshape(-1, h, w)
