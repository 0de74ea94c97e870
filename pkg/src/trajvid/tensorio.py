"""Raw tensor files and weight checkpoints.

Tensor file layout: 8-byte magic ``MMTNTNSR``, little-endian u32 rank, rank
u32 dims, then row-major little-endian float32 payload.  A checkpoint is a
directory with one tensor file per named parameter and an ``index.json``
mapping name to shape.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MMTNTNSR"
INDEX_NAME = "index.json"
SUFFIX = ".mmt"


def write_tensor(path, array) -> None:
    arr = np.asarray(array, dtype="<f4", order="C")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))
    os.replace(tmp, path)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:8]!r}")
    (rank,) = struct.unpack_from("<I", blob, 8)
    dims = struct.unpack_from(f"<{rank}I", blob, 12)
    offset = 12 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    payload = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    if offset + 4 * count != len(blob):
        raise ValueError(f"{path}: payload size does not match header {dims}")
    return payload.reshape(dims).astype(np.float32)


def _param_file(name: str) -> str:
    return name + SUFFIX


def save_checkpoint(directory, tensors: Mapping[str, np.ndarray]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float32)
        write_tensor(directory / _param_file(name), arr)
        index[name] = list(arr.shape)
    tmp = directory / (INDEX_NAME + ".tmp")
    tmp.write_text(json.dumps(index, indent=1, sort_keys=True))
    os.replace(tmp, directory / INDEX_NAME)
    return directory


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    index_path = directory / INDEX_NAME
    if not index_path.exists():
        raise FileNotFoundError(f"no checkpoint index at {index_path}")
    index = json.loads(index_path.read_text())
    out = {}
    for name, shape in index.items():
        arr = read_tensor(directory / _param_file(name))
        if list(arr.shape) != list(shape):
            raise ValueError(f"{name}: index shape {shape} != file shape {list(arr.shape)}")
        out[name] = arr
    return out


def digest_tensors(tensors: Mapping[str, np.ndarray], exclude_prefixes=()) -> str:
    """sha256 over names, shapes and float32 bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        if any(name.startswith(p) for p in exclude_prefixes):
            continue
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f4"))
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
