"""Bit-exact named-tensor container used for checkpoints and PCA artifacts.

Layout (all little-endian):
  magic "SJWT" | version u32 = 1 | count u32
  then per tensor: name_len u32 | name utf-8 | ndim u32 | dims u32 * ndim |
  payload float32 C-order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SJWT"
VERSION = 1

__all__ = ["save_tensors", "load_tensors", "TensorFormatError"]


class TensorFormatError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write a name -> array table; arrays are stored as float32."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int, section: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TensorFormatError(f"truncated {self.what}: missing {section}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, section: str) -> int:
        return struct.unpack("<I", self.take(4, section))[0]


def load_tensors(path) -> dict[str, np.ndarray]:
    r = _Reader(Path(path).read_bytes(), "tensor file")
    if r.take(4, "magic") != MAGIC:
        raise TensorFormatError(f"bad magic: {path} is not a tensor table")
    version = r.u32("version")
    if version != VERSION:
        raise TensorFormatError(f"unsupported tensor table version {version}")
    count = r.u32("tensor count")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.u32("name length")
        name = r.take(name_len, "name").decode("utf-8")
        ndim = r.u32("rank")
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim, "dims"))
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        payload = r.take(4 * size, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if r.pos != len(r.buf):
        raise TensorFormatError("trailing bytes after last tensor")
    return out
