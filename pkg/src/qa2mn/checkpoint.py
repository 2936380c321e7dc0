"""Checkpoint serialization: UTF-8 manifest plus a little-endian float blob.

Layout: magic b"QA2MN", one version byte, a uint64-LE manifest length, the
JSON manifest (tensor name, shape, dtype, byte offset into the blob), then
the raw blob.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Tensor

MAGIC = b"QA2MN"
FORMAT_VERSION = 1

_DTYPES = {"f8": "<f8", "f4": "<f4"}


class CheckpointError(ValueError):
    """Malformed or mismatched checkpoint file."""


def save_checkpoint(path, tensors: Mapping[str, Tensor | np.ndarray],
                    dtype: str = "f8") -> None:
    """Write named tensors; dtype "f8" (default) or "f4" for compact storage."""
    if dtype not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {dtype!r}; expected one of {sorted(_DTYPES)}")
    np_dtype = np.dtype(_DTYPES[dtype])
    entries = []
    blobs = []
    offset = 0
    for name, t in tensors.items():
        # np.array (not ascontiguousarray) keeps 0-d shapes intact
        arr = np.array(t.data if isinstance(t, Tensor) else t,
                       dtype=np_dtype, order="C", copy=True)
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": dtype,
            "offset": offset,
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"tensors": entries}, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([FORMAT_VERSION]))
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back as float64 arrays keyed by tensor name."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 1 + 8 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = data[len(MAGIC)]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header_end = len(MAGIC) + 1 + 8
    (manifest_len,) = struct.unpack("<Q", data[len(MAGIC) + 1:header_end])
    manifest_end = header_end + manifest_len
    if manifest_end > len(data):
        raise CheckpointError(f"{path}: truncated manifest")
    manifest = json.loads(data[header_end:manifest_end].decode("utf-8"))
    blob = data[manifest_end:]
    out: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        dtype = entry["dtype"]
        if dtype not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype {dtype!r} for {entry['name']!r}")
        np_dtype = np.dtype(_DTYPES[dtype])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        stop = start + count * np_dtype.itemsize
        if stop > len(blob):
            raise CheckpointError(f"{path}: truncated blob for tensor {entry['name']!r}")
        arr = np.frombuffer(blob[start:stop], dtype=np_dtype).reshape(shape)
        out[entry["name"]] = arr.astype(np.float64)
    return out
