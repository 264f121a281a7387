"""Binary exchange container for feature maps and vectors.

Layout (little-endian): magic ``GVFM``, version u16, then h/w/k as u32,
followed by ``h*w*k`` float32 values in row-major order. Payload data is
32-bit on the wire; in-memory math is 64-bit, so a round trip quantizes to
f32 precision.

A JSON debug form is provided for eyeballing small maps.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import ShapeMismatchError

MAGIC = b"GVFM"
VERSION = 1
_HEADER = struct.Struct("<4sHIII")


def _to_hwk(arr: np.ndarray) -> np.ndarray:
    """Reshape a vector, scalar map, or feature map into (h, w, k)."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        return arr.reshape(1, 1, -1)
    if arr.ndim == 2:
        return arr.reshape(*arr.shape, 1)
    if arr.ndim == 3:
        return arr
    raise ShapeMismatchError(f"cannot serialize array of rank {arr.ndim}")


def dump_bytes(arr) -> bytes:
    hwk = _to_hwk(arr)
    h, w, k = hwk.shape
    header = _HEADER.pack(MAGIC, VERSION, h, w, k)
    return header + hwk.astype("<f4").tobytes(order="C")


def load_bytes(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise ValueError("container truncated: missing header")
    magic, version, h, w, k = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ValueError(f"unsupported container version {version}")
    expected = _HEADER.size + 4 * h * w * k
    if len(data) != expected:
        raise ValueError(f"container size {len(data)} != expected {expected}")
    flat = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    return flat.astype(np.float64).reshape(h, w, k)


def write_file(path, arr) -> None:
    Path(path).write_bytes(dump_bytes(arr))


def read_file(path) -> np.ndarray:
    return load_bytes(Path(path).read_bytes())


def read_vector(path) -> np.ndarray:
    """Read a container holding a single token and return it as a flat vector."""
    arr = read_file(path)
    h, w, k = arr.shape
    if h * w != 1:
        raise ShapeMismatchError(f"expected a 1x1 grid for a vector, got {h}x{w}")
    return arr.reshape(k)


def dump_json(arr) -> str:
    hwk = _to_hwk(arr)
    h, w, k = hwk.shape
    return json.dumps(
        {"version": VERSION, "h": h, "w": w, "k": k, "data": hwk.ravel().tolist()}
    )


def load_json(text: str) -> np.ndarray:
    obj = json.loads(text)
    if obj.get("version") != VERSION:
        raise ValueError(f"unsupported container version {obj.get('version')}")
    arr = np.asarray(obj["data"], dtype=np.float64)
    return arr.reshape(obj["h"], obj["w"], obj["k"])
