"""Named-tensor container files.

Layout (little-endian)::

    magic  b"CLMRTNSR"   8 bytes
    version              uint32
    header_len           uint32
    header               UTF-8 JSON: {"meta": {...}, "tensors": [{name, shape, dtype, offset, nbytes}]}
    payload              raw tensor bytes, in header order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import CheckpointError

MAGIC = b"CLMRTNSR"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4"}


def save_tensors(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(header)) + header)
        for raw in chunks:
            fh.write(raw)
    return path


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a tensor container")
    version, header_len = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    start = 16 + header_len
    try:
        header = json.loads(data[16:start])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    tensors = {}
    for entry in header["tensors"]:
        lo = start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(data):
            raise CheckpointError(f"{path}: tensor {entry['name']!r} truncated")
        arr = np.frombuffer(data[lo:hi], dtype=_DTYPES[entry["dtype"]])
        tensors[entry["name"]] = arr.astype(entry["dtype"]).reshape(entry["shape"])
    return tensors, header["meta"]
