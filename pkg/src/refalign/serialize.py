"""RBAT tensor dumps and named-tensor checkpoint files.

RBAT record layout (all integers little-endian):

    magic   4 bytes  b"RBAT"
    version u32      1
    dtype   u8       0 = float32
    ndim    u32
    extents ndim x u32
    payload little-endian float32, row-major

A checkpoint is a sequence of (u32 name length, UTF-8 name, RBAT record)
repeated until EOF.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"RBAT"
VERSION = 1
DTYPE_F32 = 0


def write_tensor(stream: io.BufferedIOBase, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float32)  # 0-d safe; tobytes handles layout
    stream.write(MAGIC)
    stream.write(struct.pack("<I", VERSION))
    stream.write(struct.pack("<B", DTYPE_F32))
    stream.write(struct.pack("<I", arr.ndim))
    for extent in arr.shape:
        stream.write(struct.pack("<I", extent))
    stream.write(arr.astype("<f4").tobytes())


def read_tensor(stream: io.BufferedIOBase) -> np.ndarray:
    magic = stream.read(4)
    if magic != MAGIC:
        raise DataError(f"bad RBAT magic: {magic!r}")
    (version,) = struct.unpack("<I", stream.read(4))
    if version != VERSION:
        raise DataError(f"unsupported RBAT version {version}")
    (dtype,) = struct.unpack("<B", stream.read(1))
    if dtype != DTYPE_F32:
        raise DataError(f"unsupported RBAT dtype {dtype}")
    (ndim,) = struct.unpack("<I", stream.read(4))
    shape = tuple(struct.unpack("<I", stream.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    payload = stream.read(4 * count)
    if len(payload) != 4 * count:
        raise DataError("truncated RBAT payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Atomic write (temp file + rename) of a named-tensor checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            for name, arr in tensors.items():
                encoded = name.encode("utf-8")
                f.write(struct.pack("<I", len(encoded)))
                f.write(encoded)
                write_tensor(f, arr)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        while True:
            header = f.read(4)
            if not header:
                break
            if len(header) != 4:
                raise DataError("truncated checkpoint record")
            (name_len,) = struct.unpack("<I", header)
            name = f.read(name_len).decode("utf-8")
            tensors[name] = read_tensor(f)
    return tensors
