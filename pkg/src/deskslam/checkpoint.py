"""Flat binary weight checkpoints.

Layout: magic "DLCN1", then for each named parameter in order:
name length (u32 LE), UTF-8 name, rank (u32 LE), dims (u32 LE each),
raw float32 little-endian data. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from typing import Dict

import numpy as np

MAGIC = b"DLCN1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: Dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name, arr in params.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", data.ndim))
            for d in data.shape:
                f.write(struct.pack("<I", d))
            f.write(data.tobytes())


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:5]!r}, expected {MAGIC!r}")
    params: Dict[str, np.ndarray] = {}
    off = len(MAGIC)
    total = len(blob)

    def need(n: int, what: str):
        if off + n > total:
            raise CheckpointError(f"{path}: truncated at byte {off} reading {what}")

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
        count = int(np.prod(dims)) if rank else 1
        need(4 * count, f"data of {name}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(dims)
        off += 4 * count
        params[name] = arr.copy()
    return params
