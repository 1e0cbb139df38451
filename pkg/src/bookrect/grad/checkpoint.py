"""Binary parameter checkpoints.

Layout: magic ``BKPT``, version (u32 LE), entry count (u32 LE); then per
entry: name length (u32 LE), UTF-8 name, rank (u32 LE), extents (u64 LE
each), raw little-endian float32 values in row-major order. Files round-trip
bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from .tensor import Tensor

__all__ = ["save_checkpoint", "load_checkpoint", "CHECKPOINT_VERSION"]

_MAGIC = b"BKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: Union[str, Path], params: Mapping[str, Union[Tensor, np.ndarray]]) -> None:
    items = [(name, p.data if isinstance(p, Tensor) else np.asarray(p)) for name, p in params.items()]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(items)))
        for name, arr in items:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            for ext in arr.shape:
                fh.write(struct.pack("<Q", ext))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: Union[str, Path]) -> dict[str, np.ndarray]:
    """Read a checkpoint back as float32 arrays, in file order."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(4 * n)
            if len(buf) != 4 * n:
                raise ValueError(f"{path}: truncated entry {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
        return out
