"""Flat binary serialization of parameter stores.

Layout, all little-endian:
  magic   4 bytes  b"VXCK"
  version u32      currently 1
  count   u32      number of tensors
then for each tensor, in store order:
  name_len u32, name bytes (utf-8), rank u32, dims u32 * rank,
  payload float64 * prod(dims)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .optim import ParamStore

MAGIC = b"VXCK"
VERSION = 1


def save_params(store: ParamStore, path: str | Path) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(store.names()))]
    for name, value in store.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path: str | Path) -> ParamStore:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    store = ParamStore()
    off = 12
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        store.add(name, arr.astype(np.float64))
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes in {path}")
    return store
