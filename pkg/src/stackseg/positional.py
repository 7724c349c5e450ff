"""Fixed 2-D sinusoidal position encodings.

Coordinates are in feature-grid units (row, column).  The same encoding is
used for encoder tokens, decoder image positions and point prompts, so a
point prompt at grid cell (i, j) matches the image encoding of that cell.
"""
from __future__ import annotations

import numpy as np


def frequencies(dim: int, temperature: float = 10000.0) -> np.ndarray:
    if dim % 4:
        raise ValueError(f"encoding width must be divisible by 4, got {dim}")
    q = dim // 4
    return 1.0 / temperature ** (np.arange(q) / q)


def encode_point(y: float, x: float, dim: int) -> np.ndarray:
    """Encoding of one (row, column) position, shape ``(dim,)``."""
    w = frequencies(dim)
    return np.concatenate([np.sin(y * w), np.cos(y * w), np.sin(x * w), np.cos(x * w)])


def encode_grid(h: int, w: int, dim: int) -> np.ndarray:
    """Encodings of every cell of an ``h x w`` grid, row-major, shape ``(h*w, dim)``."""
    freq = frequencies(dim)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    ya = ys.reshape(-1, 1) * freq
    xa = xs.reshape(-1, 1) * freq
    return np.concatenate([np.sin(ya), np.cos(ya), np.sin(xa), np.cos(xa)], axis=1)


def pixel_to_grid(p: float, stride: float) -> float:
    """Map a pixel-centre coordinate to the coordinate of a ``stride``-downsampled grid."""
    return (p + 0.5) / stride - 0.5
