"""Checkpoint container: magic "MTMCKPT1", named float64 tensors.

Layout: magic, u32 tensor count, then per tensor (sorted by name):
u16 name length, UTF-8 name, u8 ndim, ndim x u64 dims, little-endian
float64 payload. Sorting makes save(load(p)) byte-identical to p.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"MTMCKPT1"


def save(params: dict[str, np.ndarray], path: str) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", len(params))
    for name in sorted(params):
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        blob += struct.pack("<H", len(raw))
        blob += raw
        blob += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            blob += struct.pack("<Q", d)
        blob += arr.tobytes()
    with open(path, "wb") as f:
        f.write(blob)


def load(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:8]!r}")
    pos = 8
    try:
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            size = 1
            for d in dims:
                size *= d
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos)
            pos += 8 * size
            out[name] = arr.reshape(dims).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt ({exc})") from exc
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return out


def split_prefix(params: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    """Entries under 'prefix.' with the prefix stripped."""
    plen = len(prefix) + 1
    out = {k[plen:]: v for k, v in params.items() if k.startswith(prefix + ".")}
    if not out:
        raise CheckpointError(f"no tensors under prefix {prefix!r}")
    return out


def join_prefix(params: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in params.items()}
