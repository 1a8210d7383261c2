"""On-disk containers for model checkpoints and synthetic datasets.

Checkpoint layout::

    b"ZSQCKPT\\0" | u32 version | u64 header length | JSON header | tensor payload

All integers and tensor payloads are little-endian; tensors are stored as
32-bit floats at the offsets and shapes declared in the header. Quantizer
parameters live in the header as ``{layer_id, kind, n, l, u}`` records.

A synthetic dataset is a directory holding ``manifest.json`` and one raw
little-endian float32 file per batch.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .quantizer import FakeQuantModel
from .refmodels import build_teacher
from .synthesis import SynthesisConfig, SynthesisHistory, SyntheticDataset

MAGIC = b"ZSQCKPT\0"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


def save_checkpoint(model: nn.Module, path: str | Path, meta: Optional[dict] = None) -> Path:
    path = Path(path)
    quantized = isinstance(model, FakeQuantModel)
    state = model.state_dict()
    entries, chunks, offset = [], [], 0
    for name, t in state.items():
        data = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", ""),
                        "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "format_version": FORMAT_VERSION,
        "arch": model.arch,
        "classes": model.num_classes,
        "width": model.width,
        "quantized": quantized,
        "weight_bits": model.weight_bits if quantized else None,
        "act_bits": model.act_bits if quantized else None,
        "tensors": entries,
        "quant_params": model.quant_records() if quantized else [],
        "payload_bytes": offset,
        "meta": meta or {},
    }
    raw = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(raw)))
        fh.write(raw)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)
    return path


def read_header(path: str | Path) -> tuple[dict, bytes]:
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise CorruptCheckpointError(f"{path}: file too short for a checkpoint header")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint file")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size + hlen
    if len(blob) < start:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[_PREFIX.size:start])
    except (json.JSONDecodeError, UnicodeDecodeError) as err:
        raise CorruptCheckpointError(f"{path}: unreadable header") from err
    payload = blob[start:]
    if len(payload) != header["payload_bytes"]:
        raise CorruptCheckpointError(f"{path}: payload is {len(payload)} bytes, header declares {header['payload_bytes']}")
    return header, payload


def load_checkpoint(path: str | Path) -> nn.Module:
    """Rebuild the saved model; raises before constructing anything on a bad file."""
    header, payload = read_header(path)
    tensors = {}
    for e in header["tensors"]:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        if len(buf) != 4 * count:
            raise CorruptCheckpointError(f"{path}: tensor {e['name']} has {len(buf)} bytes for shape {e['shape']}")
        arr = np.frombuffer(buf, dtype="<f4").reshape(e["shape"]).astype(np.float32)
        tensors[e["name"]] = torch.from_numpy(arr.copy()).to(getattr(torch, e["dtype"]))
    model = build_teacher(header["arch"], header["classes"], header["width"])
    if header["quantized"]:
        model = FakeQuantModel(model, header["weight_bits"], header["act_bits"])
    state = model.state_dict()
    if set(state) != set(tensors):
        raise ShapeMismatchError(f"{path}: tensor names do not match architecture {header['arch']}")
    for name, t in tensors.items():
        if tuple(state[name].shape) != tuple(t.shape):
            raise ShapeMismatchError(f"{path}: {name} has shape {tuple(t.shape)}, model expects {tuple(state[name].shape)}")
    model.load_state_dict(tensors)
    if header["quantized"]:
        model.load_quant_records(header["quant_params"])
        model.frozen_ranges = True
    model.eval()
    model.checkpoint_meta = header.get("meta", {})
    return model


def _sha256(images: torch.Tensor, labels: torch.Tensor) -> str:
    h = hashlib.sha256()
    h.update(images.to(torch.float32).numpy().astype("<f4").tobytes())
    h.update(labels.numpy().astype("<i8").tobytes())
    return h.hexdigest()


def save_synthetic(ds: SyntheticDataset, directory: str | Path, extra: Optional[dict] = None) -> Path:
    """Write a synthetic dataset directory; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    batch = ds.config.batch
    files = []
    for b, start in enumerate(range(0, len(ds), batch)):
        x = ds.images[start:start + batch]
        name = f"batch_{b:04d}.f32"
        (directory / name).write_bytes(x.to(torch.float32).numpy().astype("<f4").tobytes())
        files.append({"file": name, "shape": list(x.shape), "start": start})
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": asdict(ds.config),
        "batch_seeds": ds.batch_seeds,
        "count": len(ds),
        "batches": files,
        "samples": [{"label": int(y), "difficulty": float(d)} for y, d in zip(ds.labels, ds.d_teacher)],
        "sha256": _sha256(ds.images, ds.labels),
        "histories": [asdict(h) for h in ds.histories],
        **(extra or {}),
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_synthetic(directory: str | Path) -> SyntheticDataset:
    """Read a synthetic dataset directory back into a ``SyntheticDataset``."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(f"{directory}: unsupported dataset format {manifest.get('format_version')}")
    parts = []
    for entry in manifest["batches"]:
        raw = (directory / entry["file"]).read_bytes()
        count = int(np.prod(entry["shape"]))
        if len(raw) != 4 * count:
            raise CorruptCheckpointError(f"{directory / entry['file']}: {len(raw)} bytes for shape {entry['shape']}")
        parts.append(torch.from_numpy(np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()))
    images = torch.cat(parts) if parts else torch.empty(0, 3, 32, 32)
    labels = torch.tensor([s["label"] for s in manifest["samples"]], dtype=torch.long)
    d = torch.tensor([s["difficulty"] for s in manifest["samples"]])
    if len(images) != len(labels):
        raise CorruptCheckpointError(f"{directory}: {len(images)} images but {len(labels)} labels")
    histories = [SynthesisHistory(**h) for h in manifest.get("histories", [])]
    ds = SyntheticDataset(images, labels, d, SynthesisConfig(**manifest["config"]), manifest["batch_seeds"], histories)
    if ds.digest() != manifest["sha256"]:
        raise CorruptCheckpointError(f"{directory}: content hash mismatch")
    return ds
