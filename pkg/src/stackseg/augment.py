"""Geometric and intensity augmentation for EM slices and their masks.

One geometric transform is sampled and applied identically to every image
and mask passed to :meth:`Transform.apply`; intensity changes touch images
only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass
class AugmentationConfig:
    rotation: float = 15.0                       # max degrees, symmetric
    scale: tuple[float, float] = (0.9, 1.1)
    elastic_spacing: int = 16                    # control-grid spacing in px
    elastic_sigma: float = 1.0                   # smoothing of the control grid, in grid cells
    elastic_magnitude: float = 2.0               # max displacement in px
    flip_h: float = 0.5
    flip_v: float = 0.5
    rot90: float = 0.0                           # probability of a random multiple-of-90 rotation
    gamma: tuple[float, float] = (0.8, 1.2)
    brightness: float = 0.1
    seed: int | None = None

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls(rotation=0.0, scale=(1.0, 1.0), elastic_magnitude=0.0, flip_h=0.0, flip_v=0.0,
                   rot90=0.0, gamma=(1.0, 1.0), brightness=0.0)

    def __post_init__(self):
        self.scale = tuple(self.scale)
        self.gamma = tuple(self.gamma)


@dataclass
class Transform:
    angle: float = 0.0
    zoom: float = 1.0
    displacement: np.ndarray | None = None       # 2 x H x W, or None
    flip_h: bool = False
    flip_v: bool = False
    quarter_turns: int = 0
    gamma: float = 1.0
    brightness: float = 0.0

    @property
    def has_warp(self) -> bool:
        return self.angle != 0.0 or self.zoom != 1.0 or self.displacement is not None

    def _coords(self, h: int, w: int) -> np.ndarray:
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
        th = np.deg2rad(self.angle)
        c, s = np.cos(th), np.sin(th)
        dy, dx = (yy - cy) / self.zoom, (xx - cx) / self.zoom
        sy = c * dy - s * dx + cy
        sx = s * dy + c * dx + cx
        if self.displacement is not None:
            sy = sy + self.displacement[0]
            sx = sx + self.displacement[1]
        return np.stack([sy, sx])

    def _geometric(self, arr: np.ndarray, is_mask: bool) -> np.ndarray:
        if self.has_warp:
            coords = self._coords(*arr.shape)
            if is_mask:
                arr = ndimage.map_coordinates(arr.astype(np.float64), coords, order=0, mode="constant", cval=0.0)
                arr = (arr > 0.5).astype(np.float64)
            else:
                arr = ndimage.map_coordinates(arr.astype(np.float64), coords, order=1, mode="reflect")
        if self.flip_h:
            arr = arr[:, ::-1]
        if self.flip_v:
            arr = arr[::-1, :]
        if self.quarter_turns:
            arr = np.rot90(arr, self.quarter_turns)
        return np.ascontiguousarray(arr)

    def apply_image(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image)
        if image.ndim == 3:
            return np.stack([self.apply_image(im) for im in image]).astype(image.dtype)
        out = self._geometric(image, is_mask=False)
        if self.gamma != 1.0:
            out = np.clip(out, 0.0, 1.0) ** self.gamma
        if self.brightness != 0.0:
            out = out + self.brightness
        if self.gamma != 1.0 or self.brightness != 0.0:
            out = np.clip(out, 0.0, 1.0)
        return out.astype(image.dtype, copy=False)

    def apply_mask(self, mask: np.ndarray) -> np.ndarray:
        mask = np.asarray(mask)
        if mask.ndim == 3:
            return np.stack([self.apply_mask(m) for m in mask]).astype(mask.dtype)
        return self._geometric(mask, is_mask=True).astype(mask.dtype, copy=False)

    def apply(self, image: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.apply_image(image), self.apply_mask(mask)


def elastic_field(h: int, w: int, spacing: int, sigma: float, magnitude: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Smooth random displacement field bounded by ``magnitude`` pixels."""
    gh, gw = max(h // spacing, 1) + 1, max(w // spacing, 1) + 1
    grid = rng.uniform(-1.0, 1.0, size=(2, gh, gw))
    if sigma > 0:
        grid = np.stack([ndimage.gaussian_filter(g, sigma, mode="nearest") for g in grid])
        peak = np.abs(grid).max()
        if peak > 0:
            grid = grid / peak
    yy = np.linspace(0, gh - 1, h)
    xx = np.linspace(0, gw - 1, w)
    coords = np.stack(np.meshgrid(yy, xx, indexing="ij"))
    field_ = np.stack([ndimage.map_coordinates(g, coords, order=1) for g in grid])
    return field_ * magnitude


def sample_transform(cfg: AugmentationConfig, rng: np.random.Generator, shape: tuple) -> Transform:
    h, w = shape[-2:]
    angle = float(rng.uniform(-cfg.rotation, cfg.rotation)) if cfg.rotation else 0.0
    lo, hi = cfg.scale
    zoom = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    disp = None
    if cfg.elastic_magnitude > 0:
        disp = elastic_field(h, w, cfg.elastic_spacing, cfg.elastic_sigma, cfg.elastic_magnitude, rng)
    flip_h = bool(rng.random() < cfg.flip_h) if cfg.flip_h else False
    flip_v = bool(rng.random() < cfg.flip_v) if cfg.flip_v else False
    turns = int(rng.integers(1, 4)) if cfg.rot90 and rng.random() < cfg.rot90 else 0
    glo, ghi = cfg.gamma
    gamma = float(rng.uniform(glo, ghi)) if ghi > glo else float(glo)
    bright = float(rng.uniform(-cfg.brightness, cfg.brightness)) if cfg.brightness else 0.0
    return Transform(angle, zoom, disp, flip_h, flip_v, turns, gamma, bright)


def augment(image: np.ndarray, mask: np.ndarray, cfg: AugmentationConfig,
            rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Sample one transform and apply it to an image/mask pair."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    return sample_transform(cfg, rng, np.shape(image)).apply(image, mask)
