"""Image stacks: in-memory type, PNG/raw I/O, and synthetic fixtures.

Two on-disk layouts are supported:

* **slice directory** - 8-bit grayscale PNGs named ``{stem}_{zzzz}.png``.
  A stack root may hold ``images/`` and an optional ``masks/`` directory
  with identical file names.
* **raw volume** - a headerless ``.raw`` file with a JSON sidecar of the
  same stem carrying ``dims`` (z, y, x), ``dtype`` (u8, u16, f32),
  ``endianness`` and ``spacing_nm``.  An optional ``labels`` key names a
  u8 raw file of the same dims.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError, FormatError, GapError

RAW_DTYPES = {"u8": np.uint8, "u16": np.uint16, "f32": np.float32}
_SLICE_RE = re.compile(r"^(?P<stem>.+)_(?P<z>\d+)\.png$")


@dataclass
class VolumeStack:
    slices: np.ndarray                       # Z x H x W, float in [0, 1]
    labels: np.ndarray | None = None         # Z x H x W, {0, 1}
    spacing: tuple = (1.0, 1.0, 1.0)         # z, y, x in nm
    name: str = "volume"
    raw: np.ndarray | None = None            # voxel data as stored on disk
    indices: list = field(default_factory=list)

    def __post_init__(self):
        self.slices = np.asarray(self.slices)
        if self.slices.ndim != 3:
            raise FormatError(f"stack must be Z x H x W, got shape {self.slices.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != self.slices.shape:
                raise FormatError(f"labels {self.labels.shape} do not align with slices {self.slices.shape}")
        if not self.indices:
            self.indices = list(range(len(self.slices)))
        if self.raw is None:
            self.raw = self.slices

    @property
    def depth(self) -> int:
        return self.slices.shape[0]

    @property
    def shape(self) -> tuple:
        return self.slices.shape

    def subset(self, start: int, stop: int) -> "VolumeStack":
        labels = None if self.labels is None else self.labels[start:stop]
        return VolumeStack(self.slices[start:stop], labels, self.spacing, self.name,
                           self.raw[start:stop], self.indices[start:stop])


def normalize(volume: np.ndarray) -> np.ndarray:
    """Per-volume min-max scaling to [0, 1]."""
    v = volume.astype(np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v, dtype=np.float32)
    return ((v - lo) / (hi - lo)).astype(np.float32)


# ---------------------------------------------------------------------------
# PNG slice directories
# ---------------------------------------------------------------------------
def _scan_slices(directory: Path) -> tuple[str, dict[int, Path]]:
    found: dict[int, Path] = {}
    stems = set()
    for p in sorted(directory.glob("*.png")):
        m = _SLICE_RE.match(p.name)
        if m is None:
            continue
        stems.add(m["stem"])
        found[int(m["z"])] = p
    if not found:
        raise DataError(f"no '{{stem}}_{{zzzz}}.png' slices in {directory}")
    if len(stems) > 1:
        raise FormatError(f"mixed slice stems in {directory}: {sorted(stems)}")
    zs = sorted(found)
    missing = set(range(zs[0], zs[-1] + 1)) - set(zs)
    if missing:
        raise GapError(missing)
    return stems.pop(), found


def _read_pngs(files: list[Path]) -> np.ndarray:
    arrays = []
    for p in files:
        with Image.open(p) as im:
            arrays.append(np.asarray(im.convert("L") if im.mode not in ("L", "I;16") else im))
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise FormatError(f"slices differ in resolution: {sorted(shapes)}")
    return np.stack(arrays)


def load_png_stack(directory, mask_dir=None, spacing=(1.0, 1.0, 1.0)) -> VolumeStack:
    directory = Path(directory)
    if (directory / "images").is_dir():
        if mask_dir is None and (directory / "masks").is_dir():
            mask_dir = directory / "masks"
        directory = directory / "images"
    stem, found = _scan_slices(directory)
    zs = sorted(found)
    raw = _read_pngs([found[z] for z in zs])
    labels = None
    if mask_dir is not None:
        mask_dir = Path(mask_dir)
        names = [found[z].name for z in zs]
        missing = [z for z, n in zip(zs, names) if not (mask_dir / n).exists()]
        if missing:
            raise GapError(missing)
        labels = (_read_pngs([mask_dir / n for n in names]) > 127).astype(np.uint8)
        if labels.shape != raw.shape:
            raise FormatError(f"mask stack {labels.shape} does not match image stack {raw.shape}")
    return VolumeStack(normalize(raw), labels, tuple(spacing), stem, raw, zs)


def slice_name(stem: str, z: int) -> str:
    return f"{stem}_{z:04d}.png"


def save_png_stack(stack: VolumeStack, root) -> Path:
    """Write ``root/images`` (and ``root/masks`` when labelled)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    raw = stack.raw if stack.raw is not None and stack.raw.dtype == np.uint8 else \
        np.round(np.clip(stack.slices, 0, 1) * 255).astype(np.uint8)
    for z, im in zip(stack.indices, raw):
        Image.fromarray(im).save(root / "images" / slice_name(stack.name, z))
    if stack.labels is not None:
        (root / "masks").mkdir(exist_ok=True)
        for z, m in zip(stack.indices, stack.labels):
            Image.fromarray((np.asarray(m) > 0).astype(np.uint8) * 255).save(root / "masks" / slice_name(stack.name, z))
    return root


# ---------------------------------------------------------------------------
# Raw volumes with a JSON sidecar
# ---------------------------------------------------------------------------
def _np_dtype(code: str, endianness: str):
    if code not in RAW_DTYPES:
        raise FormatError(f"unsupported raw dtype {code!r}; expected one of {sorted(RAW_DTYPES)}")
    if endianness not in ("little", "big"):
        raise FormatError(f"endianness must be 'little' or 'big', got {endianness!r}")
    return np.dtype(RAW_DTYPES[code]).newbyteorder("<" if endianness == "little" else ">")


def load_raw_stack(path) -> VolumeStack:
    path = Path(path)
    manifest_path = path if path.suffix == ".json" else path.with_suffix(".json")
    if not manifest_path.exists():
        raise DataError(f"raw volume manifest not found: {manifest_path}")
    meta = json.loads(manifest_path.read_text())
    for key in ("dims", "dtype", "endianness"):
        if key not in meta:
            raise FormatError(f"raw manifest {manifest_path} lacks key {key!r}")
    dims = tuple(int(d) for d in meta["dims"])
    if len(dims) != 3:
        raise FormatError(f"dims must be (z, y, x), got {dims}")
    dt = _np_dtype(meta["dtype"], meta["endianness"])
    data_path = manifest_path.with_name(meta.get("file", manifest_path.stem + ".raw"))
    buf = np.fromfile(data_path, dtype=dt)
    if buf.size != int(np.prod(dims)):
        raise FormatError(f"{data_path} holds {buf.size} voxels, manifest dims {dims} need {int(np.prod(dims))}")
    raw = buf.reshape(dims)
    labels = None
    if meta.get("labels"):
        lab = np.fromfile(manifest_path.with_name(meta["labels"]), dtype=np.uint8)
        if lab.size != raw.size:
            raise FormatError("label volume size does not match image volume")
        labels = (lab.reshape(dims) > 0).astype(np.uint8)
    spacing = tuple(float(s) for s in meta.get("spacing_nm", (1.0, 1.0, 1.0)))
    return VolumeStack(normalize(raw), labels, spacing, meta.get("name", manifest_path.stem), raw)


def save_raw_stack(stack: VolumeStack, path, dtype: str = "u8", endianness: str = "little") -> Path:
    path = Path(path).with_suffix(".raw")
    path.parent.mkdir(parents=True, exist_ok=True)
    dt = _np_dtype(dtype, endianness)
    data = stack.raw if stack.raw is not None and stack.raw.dtype.kind == np.dtype(dt).kind \
        and stack.raw.dtype.itemsize == dt.itemsize else _quantize(stack.slices, dtype)
    data.astype(dt).tofile(path)
    meta = {"dims": list(stack.shape), "dtype": dtype, "endianness": endianness,
            "spacing_nm": list(stack.spacing), "name": stack.name, "file": path.name}
    if stack.labels is not None:
        lab_path = path.with_name(path.stem + "_labels.raw")
        (np.asarray(stack.labels) > 0).astype(np.uint8).tofile(lab_path)
        meta["labels"] = lab_path.name
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return path.with_suffix(".json")


def _quantize(slices: np.ndarray, dtype: str) -> np.ndarray:
    if dtype == "f32":
        return slices.astype(np.float32)
    top = np.iinfo(RAW_DTYPES[dtype]).max
    return np.round(np.clip(slices, 0, 1) * top).astype(RAW_DTYPES[dtype])


def load_stack(path, format: str | None = None, **kwargs) -> VolumeStack:
    """Load a stack; ``format`` is ``"png"`` or ``"raw"`` (guessed when omitted)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"stack path does not exist: {path}")
    if format is None:
        format = "png" if path.is_dir() else "raw"
    if format == "png":
        return load_png_stack(path, **kwargs)
    if format == "raw":
        return load_raw_stack(path)
    raise FormatError(f"unknown stack format {format!r}")


def save_stack(stack: VolumeStack, path, format: str = "png", **kwargs) -> Path:
    if format == "png":
        return save_png_stack(stack, path)
    if format == "raw":
        return save_raw_stack(stack, path, **kwargs)
    raise FormatError(f"unknown stack format {format!r}")


# ---------------------------------------------------------------------------
# Synthetic fixtures
# ---------------------------------------------------------------------------
def _ellipse(h, w, cy, cx, ry, rx, angle):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = c * dy + s * dx
    v = -s * dy + c * dx
    return (u / ry) ** 2 + (v / rx) ** 2 <= 1.0


def _render(masks: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Textured EM-like intensities for a stack of binary masks."""
    depth, h, w = masks.shape
    base = ndimage.gaussian_filter(rng.normal(size=(depth, h, w)), sigma=(0.8, 3.0, 3.0))
    base = base / (np.abs(base).max() + 1e-12)
    images = np.empty((depth, h, w))
    for z in range(depth):
        m = masks[z].astype(bool)
        ring = m & ~ndimage.binary_erosion(m, iterations=1)
        img = 0.35 + 0.08 * base[z] + 0.025 * rng.normal(size=(h, w))
        img[m] = 0.72 + 0.05 * base[z][m] + 0.025 * rng.normal(size=m.sum())
        img[ring] = 0.2 + 0.025 * rng.normal(size=ring.sum())
        images[z] = img
    return np.clip(images, 0.0, 1.0)


def _drift(depth, h, w, rng, margin, max_step=3.0):
    cy, cx = rng.uniform(margin[0], h - margin[0]), rng.uniform(margin[1], w - margin[1])
    heading = rng.uniform(0, 2 * np.pi)
    path = []
    for _ in range(depth):
        path.append((cy, cx))
        heading += rng.normal(0, 0.4)
        speed = rng.uniform(0.5, 2.0)
        ny, nx = cy + speed * np.sin(heading), cx + speed * np.cos(heading)
        if not margin[0] <= ny <= h - margin[0]:
            heading = -heading
            ny = cy + speed * np.sin(heading)
        if not margin[1] <= nx <= w - margin[1]:
            heading = np.pi - heading
            nx = cx + speed * np.cos(heading)
        step = np.hypot(ny - cy, nx - cx)
        if step > max_step:
            ny, nx = cy + (ny - cy) * max_step / step, cx + (nx - cx) * max_step / step
        cy, cx = np.clip(ny, margin[0], h - margin[0]), np.clip(nx, margin[1], w - margin[1])
    return path


def make_synthetic_volume(kind: str = "drifting-blob", depth: int = 24, h: int = 64, w: int = 64,
                          seed: int = 0) -> VolumeStack:
    """Labelled toy stack standing in for an EM volume.

    ``drifting-blob``: one ellipse whose centre moves at most 3 px per slice.
    ``branching``: one body for ``z < depth/2`` that separates into two
    components from ``z >= depth/2`` on.
    """
    if depth < 2:
        raise ValueError("depth must be >= 2")
    rng = np.random.default_rng(seed)
    masks = np.zeros((depth, h, w), dtype=np.uint8)
    if kind == "drifting-blob":
        ry, rx = h * rng.uniform(0.15, 0.2), w * rng.uniform(0.1, 0.14)
        path = _drift(depth, h, w, rng, (ry + 3, ry + 3))
        angle = rng.uniform(0, np.pi)
        for z, (cy, cx) in enumerate(path):
            angle += rng.normal(0, 0.05)
            masks[z] = _ellipse(h, w, cy, cx, ry, rx, angle)
    elif kind == "branching":
        ry, rx = h * rng.uniform(0.13, 0.16), w * rng.uniform(0.08, 0.1)
        path = _drift(depth, h, w, rng, (ry + 4, 2.2 * rx + 8), max_step=1.5)
        half = depth / 2.0
        for z, (cy, cx) in enumerate(path):
            if z < half:
                sep = 1.2 * rx * z / half           # overlapping lobes: one body
            else:
                sep = 2 * rx + 3 + 4 * (z - half) / max(depth - half, 1)
            lobe_a = _ellipse(h, w, cy, cx - sep / 2, ry, rx, 0.0)
            lobe_b = _ellipse(h, w, cy, cx + sep / 2, ry, rx, 0.0)
            masks[z] = lobe_a | lobe_b
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    images = _render(masks, rng)
    raw = np.round(images * 255).astype(np.uint8)
    return VolumeStack(normalize(raw), masks, (5.0, 5.0, 5.0), f"synthetic-{kind}", raw)
