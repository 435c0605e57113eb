"""Self-describing binary checkpoint files.

Layout::

    b"UPCK" | version u32 LE (=1) | header_len u64 LE | header (UTF-8 JSON) | data

The header is ``{"meta": {...}, "tensors": [{"name", "dtype": "f32", "shape",
"offset"}, ...]}`` with offsets relative to the start of the data section and
tensors stored back to back in header order as little-endian f32, row-major.
Headers are written canonically (sorted keys, no whitespace), so saving the
same tensors and metadata always produces the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import DenseModel, ModelConfig, MoEModel

MAGIC = b"UPCK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(Exception):
    code = "checkpoint_error"


class BadMagicError(CheckpointError):
    code = "bad_magic"


class VersionMismatchError(CheckpointError):
    code = "version_mismatch"


class TruncatedError(CheckpointError):
    code = "truncated"


class LayoutError(CheckpointError):
    """Header/tensor table is malformed or disagrees with the data section."""

    code = "layout"


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def encode(tensors: Mapping[str, np.ndarray], meta: Mapping) -> bytes:
    names = sorted(tensors)
    table, blobs, offset = [], [], 0
    for name in names:
        arr = np.asarray(tensors[name], dtype=np.float64)
        with np.errstate(over="ignore"):
            f32 = arr.astype("<f4")
        if not np.isfinite(f32).all():
            raise ValueError(f"{name}: value not representable as finite f32")
        blob = f32.tobytes(order="C")
        table.append({"name": name, "dtype": "f32", "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = canonical_json({"meta": dict(meta), "tensors": table})
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs)


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(buf) < 4:
        raise TruncatedError("file shorter than the magic bytes")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    if len(buf) < _PREFIX.size:
        raise TruncatedError("file shorter than the fixed prefix")
    _, version, header_len = _PREFIX.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatchError(f"version {version}, expected {VERSION}")
    start = _PREFIX.size
    if len(buf) < start + header_len:
        raise TruncatedError("header extends past end of file")
    try:
        header = json.loads(buf[start : start + header_len].decode("utf-8"))
        meta, table = header["meta"], header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise LayoutError(f"unreadable header: {exc}") from exc
    data = memoryview(buf)[start + header_len :]
    tensors: dict[str, np.ndarray] = {}
    expected = 0
    for entry in table:
        try:
            name, dtype, shape, offset = entry["name"], entry["dtype"], [int(s) for s in entry["shape"]], int(entry["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise LayoutError(f"bad tensor entry {entry!r}") from exc
        if dtype != "f32" or any(s < 0 for s in shape):
            raise LayoutError(f"{name}: unsupported dtype or shape")
        if offset != expected:
            raise LayoutError(f"{name}: offset {offset} but tensors must be contiguous (expected {expected})")
        if name in tensors:
            raise LayoutError(f"duplicate tensor {name}")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(data):
            raise TruncatedError(f"{name}: data ends before the tensor does")
        arr = np.frombuffer(data[offset : offset + nbytes], dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float64)
        expected = offset + nbytes
    if expected != len(data):
        raise LayoutError(f"{len(data) - expected} trailing bytes after the last tensor")
    return tensors, meta


# ---------------------------------------------------------------------------
# Model-level save/load
# ---------------------------------------------------------------------------


def model_meta(model) -> dict:
    if isinstance(model, MoEModel):
        return {
            "kind": "moe",
            "config": model.config.to_dict(),
            "n_experts": model.n_experts,
            "k": model.k,
            "gate_mode": model.gate_mode,
        }
    return {"kind": "dense", "config": model.config.to_dict()}


def save_checkpoint(model, meta: Mapping | None, path) -> str:
    """Write a dense or MoE model (or a DenseCheckpoint) and return the file's sha256."""
    if hasattr(model, "state") and hasattr(model, "config") and not hasattr(model, "params"):
        tensors, model_info = model.state, {"kind": "dense", "config": model.config.to_dict()}
        meta = {**getattr(model, "meta", {}), **(meta or {})}
    else:
        tensors, model_info = model.state_dict(), model_meta(model)
    buf = encode(tensors, {**(meta or {}), "model": model_info})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf)
    os.replace(tmp, path)
    return hashlib.sha256(buf).hexdigest()


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())


def load_checkpoint(path):
    """Return ``(model, meta)``; the model is rebuilt from the header's ``model`` entry."""
    tensors, meta = read_checkpoint(path)
    info = meta.get("model")
    if not isinstance(info, dict) or "kind" not in info:
        raise LayoutError("header lacks a model description")
    try:
        config = ModelConfig.from_dict(info["config"])
        if info["kind"] == "moe":
            model = MoEModel(config, int(info["n_experts"]), int(info["k"]), tensors, info.get("gate_mode", "topk_softmax"))
        else:
            model = DenseModel(config, tensors)
    except (KeyError, ValueError, TypeError) as exc:
        raise LayoutError(f"tensors do not match the described model: {exc}") from exc
    return model, meta


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
