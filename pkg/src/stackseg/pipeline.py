"""Slice-sequential volume inference with sliding-window tiling."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import DataError
from .metrics import dice_score, mean_iou, symmetric_difference
from .model import SegmentationModel, SliceContext, segment_slice
from .tensor import Tensor, no_grad, sigmoid
from .volume import VolumeStack, slice_name


@dataclass
class TileGrid:
    window: int
    overlap: int
    origins: list                    # (y, x) anchors, row-major
    tile_h: int
    tile_w: int

    def __len__(self) -> int:
        return len(self.origins)


def _axis_origins(n: int, window: int, stride: int) -> list[int]:
    if n <= window:
        return [0]
    out = list(range(0, n - window, stride))
    if not out or out[-1] != n - window:
        out.append(n - window)
    return out


def plan_tiles(h: int, w: int, window: int, overlap: int = 0) -> TileGrid:
    """Tile anchors covering an ``h x w`` slice.

    The last tile on each axis is clamped to end at the border; a window
    larger than the slice degenerates to one tile of the slice's size.
    """
    if window < 16 or window % 16:
        raise ValueError(f"window must be >= 16 and divisible by 16, got {window}")
    if not 0 <= overlap < window:
        raise ValueError(f"overlap must satisfy 0 <= overlap < window, got {overlap}")
    stride = window - overlap
    ys = _axis_origins(h, window, stride)
    xs = _axis_origins(w, window, stride)
    return TileGrid(window, overlap, [(y, x) for y in ys for x in xs], min(window, h), min(window, w))


def hann_weights(h: int, w: int) -> np.ndarray:
    """Strictly positive separable Hann taper used to blend tile logits."""
    wy = np.sin(np.pi * (np.arange(h) + 0.5) / h) ** 2
    wx = np.sin(np.pi * (np.arange(w) + 0.5) / w) ** 2
    return np.outer(wy, wx)


def _pad16(a: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = a.shape
    ph, pw = (-h) % 16, (-w) % 16
    if ph or pw:
        a = np.pad(a, ((0, ph), (0, pw)), mode="edge")
    return a, (h, w)


def segment_volume(stack: VolumeStack, model: SegmentationModel, window: int | None = None,
                   overlap: int = 0, tile_order: Sequence[int] | None = None,
                   return_logits: bool = False):
    """Probability masks for every slice, in ascending z.

    Each tile position keeps its own memory bank and prompt chain across
    slices.  Overlapping tile logits are blended with Hann weights before the
    sigmoid; blending always runs in row-major anchor order so the result
    does not depend on ``tile_order``.
    """
    depth, h, w = stack.shape
    grid = plan_tiles(h, w, window if window is not None else max(16, -(-max(h, w) // 16) * 16), overlap)
    order = list(range(len(grid))) if tile_order is None else list(tile_order)
    if sorted(order) != list(range(len(grid))):
        raise ValueError(f"tile_order must be a permutation of range({len(grid)})")
    dtype = model.dtype
    th, tw = grid.tile_h, grid.tile_w
    ph, pw = th + (-th) % 16, tw + (-tw) % 16
    contexts = [SliceContext.start((ph, pw), model.new_bank(), dtype) for _ in grid.origins]
    taper = hann_weights(th, tw)
    was_training = model.training
    model.eval()
    masks, all_logits = [], []
    try:
        with no_grad():
            for z in range(depth):
                image = stack.slices[z]
                tiles: dict[int, tuple[np.ndarray, np.ndarray]] = {}
                for i in order:
                    y, x = grid.origins[i]
                    crop, _ = _pad16(image[y:y + th, x:x + tw])
                    res, contexts[i] = segment_slice(crop[None].astype(dtype), contexts[i], model)
                    tiles[i] = (res.logits.data[0, :th, :tw], res.final_mask.data[0, :th, :tw])
                if len(grid) == 1:
                    logits, probs = tiles[0]
                else:
                    acc = np.zeros((h, w))
                    wsum = np.zeros((h, w))
                    for i, (y, x) in enumerate(grid.origins):
                        acc[y:y + th, x:x + tw] += taper * tiles[i][0]
                        wsum[y:y + th, x:x + tw] += taper
                    logits = (acc / wsum).astype(dtype)
                    probs = sigmoid(Tensor(logits)).data
                masks.append(probs)
                all_logits.append(logits)
    finally:
        model.train(was_training)
    return (masks, all_logits) if return_logits else masks


def evaluate_masks(masks, labels, threshold: float = 0.5) -> dict:
    """Volume-level Dice and mean IoU (pooled over all voxels)."""
    pred = np.stack([np.asarray(m) > threshold for m in masks])
    target = np.asarray(labels).astype(bool)
    if pred.shape != target.shape:
        raise DataError(f"prediction volume {pred.shape} does not match labels {target.shape}")
    return {"dice": float(dice_score(pred, target)), "miou": float(mean_iou(pred, target)),
            "symdiff": symmetric_difference(pred)}


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_masks(masks, stack: VolumeStack, out_dir, threshold: float = 0.5, config: dict | None = None,
               checkpoint=None) -> Path:
    """Write 0/255 PNG masks mirroring the input slice names, plus ``run_manifest.json``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    if len(masks) != stack.depth:
        raise DataError(f"{len(masks)} masks for a stack of {stack.depth} slices")
    names = []
    for z, m in zip(stack.indices, masks):
        name = slice_name(stack.name, z)
        path = out_dir / name
        try:
            Image.fromarray(((np.asarray(m) > threshold) * 255).astype(np.uint8)).save(path)
        except OSError as exc:
            raise OSError(f"failed to write mask {path}: {exc}") from exc
        names.append(name)
    manifest = {
        "stack": stack.name,
        "slices": names,
        "threshold": threshold,
        "checkpoint": str(checkpoint) if checkpoint else None,
        "checkpoint_sha256": file_sha256(checkpoint) if checkpoint else None,
        "config": config,
        "metrics": evaluate_masks(masks, stack.labels, threshold) if stack.labels is not None else None,
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out_dir
