"""Binary tensor container shared by model checkpoints and patch files.

Layout (all integers unsigned 32-bit little-endian)::

    b"AMF1"
    u32 len, UTF-8 descriptor text
    u32 tensor count
    per tensor: u32 rank, rank x u32 dims, prod(dims) x float64 LE
    u32 len, UTF-8 metadata text
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"AMF1"


class ContainerError(ValueError):
    pass


def _text(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode(descriptor: dict, tensors: list[np.ndarray], metadata: dict) -> bytes:
    parts = [MAGIC, _text(json.dumps(descriptor, sort_keys=True)), struct.pack("<I", len(tensors))]
    for t in tensors:
        t = np.asarray(t, dtype="<f8")
        parts.append(struct.pack("<I", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t).tobytes())
    parts.append(_text(json.dumps(metadata, sort_keys=True)))
    return b"".join(parts)


def decode(buf: bytes) -> tuple[dict, list[np.ndarray], dict]:
    if buf[:4] != MAGIC:
        raise ContainerError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise ContainerError("truncated container")
        out = buf[pos : pos + n]
        pos += n
        return out

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    descriptor = json.loads(take(u32()).decode("utf-8"))
    tensors = []
    for _ in range(u32()):
        rank = u32()
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        count = int(np.prod(dims)) if dims else 1
        tensors.append(np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(dims))
    metadata = json.loads(take(u32()).decode("utf-8"))
    if pos != len(buf):
        raise ContainerError(f"{len(buf) - pos} trailing bytes after metadata")
    return descriptor, tensors, metadata


def write(path, descriptor: dict, tensors: list[np.ndarray], metadata: dict) -> str:
    """Write the container and return its SHA-256 hex digest."""
    data = encode(descriptor, tensors, metadata)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read(path) -> tuple[dict, list[np.ndarray], dict]:
    return decode(Path(path).read_bytes())


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
