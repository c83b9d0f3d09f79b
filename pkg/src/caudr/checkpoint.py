"""Checkpoint file format.

Layout (all integers little-endian u32):

    magic  b"CAUDR1"
    version
    per entry, until EOF:
        name length, name bytes (utf-8)
        rank, dims...
        raw float32 data, little-endian, C order

Entries cover both learnable parameters and persistent buffers (running
normalization statistics), keyed by their model-unique names.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CAUDR1"
VERSION = 1


class CheckpointError(IOError):
    """Malformed, truncated or incompatible checkpoint file."""


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<I", data.ndim))
            for d in data.shape:
                fh.write(struct.pack("<I", d))
            fh.write(data.tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) + 4 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")

    arrays: dict[str, np.ndarray] = {}
    off = len(MAGIC) + 4
    total = len(blob)

    def need(n: int, what: str) -> None:
        if off + n > total:
            raise CheckpointError(f"{path}: truncated while reading {what}")

    while off < total:
        need(4, "name length")
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        need(nlen, "name")
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        need(4, "rank")
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        need(4 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        need(4 * count, f"data of {name!r}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(dims)
        off += 4 * count
        if name in arrays:
            raise CheckpointError(f"{path}: duplicate entry {name!r}")
        arrays[name] = arr.copy()
    return arrays
