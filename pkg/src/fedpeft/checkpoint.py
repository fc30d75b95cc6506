"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"FPFTCKPT"
    8       4     format version (uint32, currently 1)
    12      8     header length H in bytes (uint64)
    20      H     UTF-8 JSON header: spec, mode, dtype, entries, meta
    20+H    ...   raw parameter data, one block per header entry, in entry
                  order, each C-contiguous little-endian float32/float64

Each header entry is ``{"name", "shape", "role", "trainable", "transmitted"}``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .models import GlobalModel, ModelSpec, ParamEntry, ParameterRegistry
from .peft import TuningMode
from .tensor import Tensor

MAGIC = b"FPFTCKPT"
VERSION = 1


def _header(model: GlobalModel, meta: dict | None) -> dict:
    return {
        "spec": model.spec.to_dict(),
        "mode": None if model.mode is None else model.mode.to_dict(),
        "dtype": np.dtype(model.dtype).newbyteorder("<").str,
        "entries": [{"name": e.name, "shape": list(e.shape), "role": e.role,
                     "trainable": e.trainable, "transmitted": e.transmitted}
                    for e in model.registry],
        "meta": meta or {},
    }


def to_bytes(model: GlobalModel, meta: dict | None = None) -> bytes:
    header = json.dumps(_header(model, meta), sort_keys=True).encode()
    dtype = np.dtype(model.dtype).newbyteorder("<")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(header)), header]
    for e in model.registry:
        parts.append(np.ascontiguousarray(model.params[e.name].data, dtype=dtype).tobytes())
    return b"".join(parts)


def save_checkpoint(model: GlobalModel, path, meta: dict | None = None) -> str:
    """Write ``model`` to ``path``; returns the sha256 of the file contents."""
    blob = to_bytes(model, meta)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return hashlib.sha256(blob).hexdigest()


def from_bytes(blob: bytes) -> tuple[GlobalModel, dict]:
    if blob[:8] != MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    if len(blob) < 20:
        raise DataError("truncated checkpoint header")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[20:20 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint header: {exc}") from None
    dtype = np.dtype(header["dtype"])
    spec = ModelSpec(**header["spec"])
    registry = ParameterRegistry()
    params = {}
    offset = 20 + hlen
    for raw in header["entries"]:
        entry = ParamEntry(raw["name"], tuple(raw["shape"]), raw["role"],
                           raw["trainable"], raw["transmitted"])
        registry.add(entry)
        nbytes = entry.size * dtype.itemsize
        if offset + nbytes > len(blob):
            raise DataError(f"checkpoint truncated inside {entry.name!r}")
        arr = np.frombuffer(blob, dtype=dtype, count=entry.size, offset=offset)
        params[entry.name] = Tensor(arr.reshape(entry.shape).astype(dtype.newbyteorder("="),
                                                                     copy=True))
        offset += nbytes
    if offset != len(blob):
        raise DataError(f"{len(blob) - offset} trailing bytes in checkpoint")
    mode = TuningMode(**header["mode"]) if header["mode"] else None
    return GlobalModel(spec, registry, params, mode), header["meta"]


def load_checkpoint(path) -> tuple[GlobalModel, dict]:
    return from_bytes(Path(path).read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
