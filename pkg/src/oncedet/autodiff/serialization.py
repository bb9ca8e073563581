"""Weight container: an 8-byte header length, a JSON header, then raw f32 data.

Layout::

    [u64 little-endian: header byte length]
    [header: UTF-8 JSON]
        {"tensors": {name: {"shape": [...], "dtype": "<f4", "offset": int, "nbytes": int}},
         "meta": {...}}
    [data: concatenated little-endian float32 arrays, offsets relative to data start]
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

DTYPE = "<f4"


def save_tensors(path, tensors: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> None:
    entries = {}
    chunks = []
    offset = 0
    for name in tensors:
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype=DTYPE))
        raw = arr.tobytes()
        entries[name] = {"shape": list(arr.shape), "dtype": DTYPE, "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)
    os.replace(tmp, path)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise ValueError(f"{path}: truncated checkpoint")
    (hlen,) = struct.unpack("<Q", blob[:8])
    try:
        header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint header") from exc
    base = 8 + hlen
    out = {}
    for name, info in header["tensors"].items():
        if info["dtype"] != DTYPE:
            raise ValueError(f"{path}: tensor {name} has unsupported dtype {info['dtype']}")
        start = base + info["offset"]
        raw = blob[start : start + info["nbytes"]]
        if len(raw) != info["nbytes"]:
            raise ValueError(f"{path}: tensor {name} truncated")
        out[name] = np.frombuffer(raw, dtype=DTYPE).reshape(info["shape"]).astype(np.float32)
    return out, header.get("meta", {})


def checksum(tensors: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over names, shapes and raw bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(str(arr.dtype).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
