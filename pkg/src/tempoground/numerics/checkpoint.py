"""Binary tensor container ("F2GD" format).

Layout: magic bytes ``F2GD``, one version byte, then repeated records of
(name length, UTF-8 name, rank, dims, values). Name length, rank, and each
dim are unsigned 64-bit little-endian integers; values are 64-bit
little-endian floats in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from tempoground.errors import CheckpointError

MAGIC = b"F2GD"
VERSION = 1


def write_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("B", VERSION))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            raw_name = name.encode("utf-8")
            f.write(struct.pack("<Q", len(raw_name)))
            f.write(raw_name)
            f.write(struct.pack("<Q", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<Q", dim))
            f.write(arr.astype("<f8").tobytes(order="C"))


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {data[:4]!r}")
    if len(data) < 5:
        raise CheckpointError(f"{path}: truncated header")
    version = data[4]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    tensors: dict[str, np.ndarray] = {}
    pos = 5
    total = len(data)
    while pos < total:
        (name_len,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        dims = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        count = 1
        for dim in dims:
            count *= dim
        end = pos + 8 * count
        if end > total:
            raise CheckpointError(f"{path}: truncated record for {name!r}")
        arr = np.frombuffer(data[pos:end], dtype="<f8").reshape(dims)
        tensors[name] = arr.copy()
        pos = end
    return tensors
