"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic   4 bytes  b"PWCK"
    version u32      currently 1
    mlen    u64      manifest byte length
    manifest         UTF-8 JSON (creation step, RNG seed, counters, config, ...)
    count   u32      number of named entries
    entry*           u16 name length, name bytes, u8 dtype tag, u8 ndim,
                     ndim * i64 extents, raw little-endian payload

Round-trips are bit-exact: payloads are written as the array's raw scalars in
little-endian order and read back into identical dtypes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError"]

_MAGIC = b"PWCK"
_VERSION = 1

_DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_TAG_FOR_KIND = {("f", 4): 1, ("f", 8): 2, ("i", 8): 3}


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<I", _VERSION)
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    blob += struct.pack("<Q", len(mbytes))
    blob += mbytes
    blob += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        key = (arr.dtype.kind, arr.dtype.itemsize)
        if key not in _TAG_FOR_KIND:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for entry {name!r}")
        tag = _TAG_FOR_KIND[key]
        nb = name.encode("utf-8")
        blob += struct.pack("<H", len(nb))
        blob += nb
        blob += struct.pack("<BB", tag, arr.ndim)
        blob += struct.pack(f"<{arr.ndim}q", *arr.shape)
        blob += np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError("truncated checkpoint")
        piece = raw[off:off + n]
        off += n
        return piece

    if take(4) != _MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (mlen,) = struct.unpack("<Q", take(8))
    manifest = json.loads(take(mlen).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        tag, ndim = struct.unpack("<BB", take(2))
        if tag not in _DTYPE_TAGS:
            raise CheckpointError(f"unknown dtype tag {tag} for entry {name!r}")
        shape = struct.unpack(f"<{ndim}q", take(8 * ndim))
        dt = _DTYPE_TAGS[tag]
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shape)
        arrays[name] = np.array(data, copy=True)  # writable, native layout
    if off != len(raw):
        raise CheckpointError("trailing bytes after last entry")
    return manifest, arrays
