"""Little-endian binary parameter checkpoints.

Layout::

    magic    8 bytes   b"RGBDCKPT"
    version  u32       1
    count    u32       number of entries
    entry*   name_len u32, name utf-8, dtype u8 (0=f32, 1=f64),
             4 x u32 extents, raw little-endian values (C order)

Arrays of rank < 4 are stored with leading extents of 1 and restored to
rank 4; every parameter and buffer in this package is already rank 4.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"RGBDCKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def encode(state: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name in sorted(state):
        arr = np.asarray(state[name])
        if arr.ndim > 4:
            raise CheckpointError(f"{name}: rank {arr.ndim} > 4")
        tag = _TAGS.get(arr.dtype)
        if tag is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        shape = (1,) * (4 - arr.ndim) + arr.shape
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B4I", tag, *shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 16
    state: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + n].decode("utf-8")
            off += n
            tag, *shape = struct.unpack_from("<B4I", blob, off)
            off += 17
            dtype = _DTYPES[tag]
            size = int(np.prod(shape)) * dtype.itemsize
            if off + size > len(blob):
                raise CheckpointError(f"{name}: truncated data")
            state[name] = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)),
                                        offset=off).reshape(shape).astype(dtype.newbyteorder("="))
            off += size
    except (struct.error, KeyError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if off != len(blob):
        raise CheckpointError("trailing bytes after last entry")
    return state


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, state: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(Path(path), encode(state))


def load(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
