"""Binary checkpoint container shared by both imputers.

Layout (little-endian)::

    magic (4 bytes)
    u32 len | config JSON (utf-8)
    u32 n_arrays
    n_arrays x { u32 name_len | name (utf-8) | u32 ndim | ndim x u32 dims | float32 values }
    u32 len | metadata JSON (utf-8)
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .chipstore import _atomic_write
from .errors import FormatError


def encode_checkpoint(magic: bytes, config: Mapping[str, Any], arrays: Mapping[str, np.ndarray],
                      metadata: Mapping[str, Any]) -> bytes:
    assert len(magic) == 4
    parts = [magic]

    def blob(obj: Mapping[str, Any]) -> None:
        raw = json.dumps(obj, sort_keys=True).encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)

    blob(config)
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw_name = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    blob(metadata)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", len(self.buf))
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def json(self, what: str) -> dict:
        start = self.pos
        raw = self.take(self.u32(what), what)
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"invalid {what} JSON: {exc}", start) from None


def decode_checkpoint(buf: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray], dict]:
    if buf[:4] != magic:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r}, expected {magic!r}", 0)
    r = _Reader(buf)
    r.pos = 4
    config = r.json("config")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(r.u32("array count")):
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        ndim = r.u32("ndim")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, "shape"))
        count = int(np.prod(shape, dtype=np.int64))
        raw = r.take(4 * count, f"array {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    metadata = r.json("metadata")
    if r.pos != len(buf):
        raise FormatError("trailing bytes after checkpoint", r.pos)
    return config, arrays, metadata


def write_checkpoint(path: str | os.PathLike, magic: bytes, config, arrays, metadata) -> None:
    _atomic_write(Path(path), encode_checkpoint(magic, config, arrays, metadata))


def read_checkpoint(path: str | os.PathLike, magic: bytes):
    return decode_checkpoint(Path(path).read_bytes(), magic)
