"""Flat binary checkpoints for named parameter sets.

Layout: the magic bytes "FBCS1", then one record per parameter in sorted
identifier order. Each record is

    u64 LE  identifier byte length
    bytes   identifier (utf-8)
    u64 LE  rank
    u64 LE  extent, repeated rank times
    f64 LE  values, C order

Values are always written as 64-bit floats regardless of the in-memory
dtype, so checkpoints are byte-comparable across dtype configurations.
"""
from __future__ import annotations

import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"FBCS1"


def state_bytes(state: dict) -> bytes:
    """Serialize {identifier: ndarray} deterministically."""
    chunks = [MAGIC]
    for name in sorted(state):
        arr = np.asarray(state[name], dtype=np.float64)
        ident = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(ident)))
        chunks.append(ident)
        chunks.append(struct.pack("<Q", arr.ndim))
        for extent in arr.shape:
            chunks.append(struct.pack("<Q", extent))
        chunks.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    return b"".join(chunks)


def bytes_to_state(blob: bytes) -> dict:
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic; not an FBCS1 checkpoint")
    pos = len(MAGIC)
    total = len(blob)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > total:
            raise CheckpointError("truncated checkpoint")
        piece = blob[pos:pos + n]
        pos += n
        return piece

    state = {}
    while pos < total:
        (name_len,) = struct.unpack("<Q", take(8))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        shape = tuple(struct.unpack("<Q", take(8))[0] for _ in range(rank))
        count = 1
        for extent in shape:
            count *= extent
        values = np.frombuffer(take(count * 8), dtype="<f8").reshape(shape)
        if name in state:
            raise CheckpointError(f"duplicate identifier {name!r}")
        state[name] = values.copy()
    return state


def save_checkpoint(path, state: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(state_bytes(state))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        return bytes_to_state(fh.read())
