"""Flat binary parameter files.

Layout (all integers unsigned 64-bit little-endian, values float64 LE)::

    b"BAGNET01" | count | { name_len | name (utf-8) | rank | dims... | values... }*
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"BAGNET01"


class CheckpointError(ValueError):
    pass


def save_params(path, arrays: dict[str, np.ndarray]) -> None:
    out = bytearray(MAGIC)
    out += struct.pack("<Q", len(arrays))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8", order="C")
        out += struct.pack("<Q", len(raw)) + raw
        out += struct.pack("<Q", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_params(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    pos = 8

    def u64():
        nonlocal pos
        if pos + 8 > len(buf):
            raise CheckpointError(f"{path}: truncated file")
        (v,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        return v

    arrays: dict[str, np.ndarray] = {}
    for _ in range(u64()):
        n = u64()
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        rank = u64()
        shape = tuple(u64() for _ in range(rank))
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if pos + 8 * size > len(buf):
            raise CheckpointError(f"{path}: truncated values for {name!r}")
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes")
    return arrays
