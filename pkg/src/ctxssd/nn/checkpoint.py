"""Flat binary parameter container.

Layout: the 7-byte magic ``SSDCTX1`` followed by one record per named array::

    u32 name_length | name (utf-8) | u8 dtype tag | u32 rank | u64 dims[rank] | raw little-endian values

Records run to end of file.
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SSDCTX1"

DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("<i4")}
_TAG_OF = {v: k for k, v in DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, value in state.items():
            arr = np.asarray(value)
            le = arr.dtype.newbyteorder("<")
            if le not in _TAG_OF:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BI", _TAG_OF[le], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=le).tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    pos, state = len(MAGIC), {}
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            tag, rank = struct.unpack_from("<BI", blob, pos)
            pos += 5
            if tag not in DTYPE_TAGS:
                raise CheckpointError(f"{name}: unknown dtype tag {tag}")
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            dt = DTYPE_TAGS[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(blob):
                raise CheckpointError(f"{name}: truncated record")
            state[name] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    return state
