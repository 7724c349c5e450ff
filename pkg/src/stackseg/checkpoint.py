"""Portable single-file checkpoints.

Layout::

    b"STKSEGCK"  8-byte magic
    uint32 LE    format version
    uint64 LE    manifest length N
    N bytes      UTF-8 JSON manifest
    ...          raw little-endian arrays, concatenated in manifest order

The manifest holds ``{"meta": {...}, "arrays": [entry, ...]}`` where each
entry is ``{"name", "shape", "dtype", "frozen", "offset", "nbytes"}`` and
``offset`` counts from the start of the array section.  Names are flat keys:
``param/<module path>``, ``buffer/<module path>``, ``optim/m.<i>``,
``optim/v.<i>`` and ``bank/<key>``.  Writing is deterministic: same state,
same bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

MAGIC = b"STKSEGCK"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    frozen: dict[str, bool] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def write_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, arr in ckpt.arrays.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                        "frozen": bool(ckpt.frozen.get(name, False)), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": ckpt.meta, "arrays": entries}, sort_keys=True,
                          separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, n = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic {magic!r})")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    start = _HEADER.size + n
    manifest = json.loads(data[_HEADER.size:start].decode("utf-8"))
    ckpt = Checkpoint(meta=manifest["meta"])
    for e in manifest["arrays"]:
        lo = start + e["offset"]
        if lo + e["nbytes"] > len(data):
            raise FormatError(f"{path}: array {e['name']!r} runs past end of file")
        arr = np.frombuffer(data, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=lo).reshape(e["shape"])
        ckpt.arrays[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
        ckpt.frozen[e["name"]] = e["frozen"]
    return ckpt


def model_state(model) -> Checkpoint:
    ckpt = Checkpoint()
    for name, p in model.named_parameters():
        ckpt.arrays[f"param/{name}"] = p.data
        ckpt.frozen[f"param/{name}"] = not p.requires_grad
    for name, b in model.named_buffers():
        ckpt.arrays[f"buffer/{name}"] = b
        ckpt.frozen[f"buffer/{name}"] = True
    return ckpt


def load_model_state(model, ckpt: Checkpoint) -> None:
    """Copy parameters and buffers into ``model`` in place; names and shapes must match."""
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = {f"param/{k}" for k in params} | {f"buffer/{k}" for k in buffers}
    present = {k for k in ckpt.arrays if k.startswith(("param/", "buffer/"))}
    if expected != present:
        missing, extra = sorted(expected - present), sorted(present - expected)
        raise FormatError(f"checkpoint does not match model: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, p in params.items():
        src = ckpt.arrays[f"param/{name}"]
        if src.shape != p.data.shape:
            raise FormatError(f"{name}: checkpoint shape {src.shape} != model shape {p.data.shape}")
        p.data[...] = src
    for name, b in buffers.items():
        b[...] = ckpt.arrays[f"buffer/{name}"]


def save_training_state(path, model, optimizer=None, bank=None, meta: dict | None = None) -> Path:
    ckpt = model_state(model)
    ckpt.meta = dict(meta or {})
    if optimizer is not None:
        for k, v in optimizer.state_arrays().items():
            ckpt.arrays[f"optim/{k}"] = v
        ckpt.meta["step"] = optimizer.step_count
    if bank is not None:
        for k, v in bank.state_arrays().items():
            ckpt.arrays[f"bank/{k}"] = v
        ckpt.meta["bank"] = {"updates": bank.updates, "max_slots": bank.max_slots, "alpha": bank.alpha}
    return write_checkpoint(path, ckpt)


def load_training_state(path, model, optimizer=None, bank=None) -> dict:
    """Restore everything :func:`save_training_state` wrote; returns the meta dict."""
    ckpt = read_checkpoint(path)
    load_model_state(model, ckpt)
    if optimizer is not None:
        optim = {k[len("optim/"):]: v for k, v in ckpt.arrays.items() if k.startswith("optim/")}
        if optim:
            optimizer.load_state_arrays(optim, int(ckpt.meta.get("step", 0)))
    if bank is not None:
        bank.load_state_arrays({k[len("bank/"):]: v for k, v in ckpt.arrays.items() if k.startswith("bank/")})
        bank.updates = int(ckpt.meta.get("bank", {}).get("updates", 0))
    return ckpt.meta
