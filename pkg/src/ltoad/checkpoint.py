"""Binary serialization of named parameter states.

Layout (little-endian): magic ``LTCK``, u8 version, u32 entry count,
then per entry a u16-length UTF-8 name, u8 rank, u32 extents and the
float32 payload in C order.  Entries are written in sorted name order so
equal states produce identical bytes.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "state_digest"]

MAGIC = b"LTCK"
VERSION = 1
MAX_RANK = 8


class CheckpointError(ValueError):
    """Raised for malformed or inconsistent checkpoint bytes."""


def save_checkpoint(path: str | Path, state: dict[str, np.ndarray]) -> int:
    """Write a name → array mapping; returns the byte count."""
    chunks = [MAGIC, struct.pack("<BI", VERSION, len(state))]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype=np.float32)
        if not np.isfinite(arr).all():
            raise CheckpointError(f"entry {name!r} contains non-finite values")
        if arr.ndim > MAX_RANK:
            raise CheckpointError(f"entry {name!r} has rank {arr.ndim} > {MAX_RANK}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"entry name too long ({len(raw)} bytes)")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    blob = b"".join(chunks)
    Path(path).write_bytes(blob)
    return len(blob)


def load_checkpoint(path: str | Path) -> "OrderedDict[str, np.ndarray]":
    blob = Path(path).read_bytes()
    off = 0

    def need(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"truncated at byte {off} reading {what}")
        piece = blob[off:off + n]
        off += n
        return piece

    if need(4, "magic") != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    version, count = struct.unpack("<BI", need(5, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    state: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", need(2, "name length"))
        name = need(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", need(1, "rank"))
        if rank > MAX_RANK:
            raise CheckpointError(f"entry {name!r} has rank {rank} > {MAX_RANK}")
        shape = struct.unpack(f"<{rank}I", need(4 * rank, "shape"))
        n_items = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = need(4 * n_items, f"payload of {name!r}")
        if name in state:
            raise CheckpointError(f"duplicate entry {name!r}")
        state[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes")
    return state


def state_digest(state: dict[str, np.ndarray]) -> str:
    """Order-independent content hash used to audit parameter freezes."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype=np.float32)
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()
