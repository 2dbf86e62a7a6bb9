"""Binary parameter checkpoints.

Layout: magic ``PRN1`` followed by one record per array::

    u64 name_len | name (utf-8) | u64 rank | u64 extent * rank | u8 width | values

All integers are little-endian; ``width`` is 4 or 8 and selects
little-endian float32 or float64 values.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PRN1"
_WIDTHS = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def dumps(arrays: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        width = arr.dtype.itemsize
        if arr.dtype.kind != "f" or width not in _WIDTHS:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<Q", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(struct.pack("<B", width))
        chunks.append(np.ascontiguousarray(arr, dtype=_WIDTHS[width]).tobytes())
    return b"".join(chunks)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic bytes")
    out: dict[str, np.ndarray] = {}
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<Q", take(8))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        (width,) = struct.unpack("<B", take(1))
        if width not in _WIDTHS:
            raise CheckpointError(f"{name}: bad width flag {width}")
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(take(count * width), dtype=_WIDTHS[width])
        out[name] = values.reshape(shape).astype(_WIDTHS[width].newbyteorder("="))
    return out


def save(path, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
