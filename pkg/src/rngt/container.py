"""RNGT binary tensor container.

Layout (all integers little-endian):

    magic   4 bytes  b"RNGT"
    version u32
    count   u32                      number of tensors
    per tensor:
        name_len u16, name UTF-8
        dtype    u8                  0 = float32 (the only defined code)
        rank     u8
        dims     u32[rank]
        payload  little-endian float32, C order
    meta_len u32, metadata JSON (UTF-8)

Tensor names are unique; writing is deterministic (tensors sorted by name,
metadata serialized with sorted keys) so write -> read -> write round-trips
byte-identically.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .errors import ContainerFormatError

MAGIC = b"RNGT"
VERSION = 1
DTYPE_FLOAT32 = 0


def write_container(tensors: dict[str, np.ndarray], metadata: dict | None = None) -> bytes:
    """Serialize named float32 tensors plus a JSON metadata blob."""
    names = sorted(tensors)
    if len(set(names)) != len(names):
        raise ContainerFormatError("duplicate tensor names")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(names)))
    for name in names:
        arr = np.asarray(tensors[name], dtype="<f4", order="C")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ContainerFormatError(f"tensor name too long: {name!r}")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", DTYPE_FLOAT32, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    meta = json.dumps(metadata or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    return buf.getvalue()


def read_container(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    """Parse a container produced by :func:`write_container`."""
    buf = io.BytesIO(data)

    def take(n: int) -> bytes:
        chunk = buf.read(n)
        if len(chunk) != n:
            raise ContainerFormatError("truncated container")
        return chunk

    if take(4) != MAGIC:
        raise ContainerFormatError("bad magic, not an RNGT container")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ContainerFormatError(f"unsupported container version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        if name in tensors:
            raise ContainerFormatError(f"duplicate tensor name {name!r}")
        dtype, rank = struct.unpack("<BB", take(2))
        if dtype != DTYPE_FLOAT32:
            raise ContainerFormatError(f"unknown dtype code {dtype}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n_items = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(4 * n_items)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    (meta_len,) = struct.unpack("<I", take(4))
    metadata = json.loads(take(meta_len).decode("utf-8"))
    if buf.read(1):
        raise ContainerFormatError("trailing bytes after metadata")
    return tensors, metadata


def save_container(path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(write_container(tensors, metadata))


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return read_container(fh.read())
