"""Binary parameter checkpoints.

Layout (all integers little-endian):

    magic   4 bytes  b"SSMT"
    version u32      currently 1
    then per parameter, until end of file:
        name_len u32, name utf-8 bytes,
        rank u32, extents u32 * rank,
        values f64 * prod(extents), little-endian
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import FormatError
from .tensor import Tensor

MAGIC = b"SSMT"
VERSION = 1


def save_checkpoint(path, params: Mapping[str, "Tensor | np.ndarray"]) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, value in params.items():
            arr = np.asarray(value.data if isinstance(value, Tensor) else value,
                             dtype=np.float64)
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    offset = 8
    total = len(blob)
    while offset < total:
        try:
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
            offset += 4 * rank
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).copy()
            offset += 8 * count
        except (struct.error, ValueError) as exc:
            raise FormatError(f"{path}: truncated checkpoint ({exc})") from exc
        if offset > total:
            raise FormatError(f"{path}: truncated checkpoint payload")
        out[name] = arr.reshape(shape)
    return out
