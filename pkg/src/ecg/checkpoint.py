"""Binary parameter checkpoint format.

Layout (little-endian throughout):

    magic  4 bytes  "ECGP"
    u32    version  (1)
    then repeated records until EOF:
        u16    name length
        bytes  name (UTF-8)
        u8     rank
        u32    extent per rank
        f32    values, row-major

Records are written in sorted-name order so that a load/save cycle is
byte-identical. Values are stored as 32-bit floats regardless of the
in-memory precision.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import DEFAULT_DTYPE, Tensor

MAGIC = b"ECGP"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_params(params: Mapping[str, Tensor], path: str | Path) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name in sorted(params):
        tensor = params[name]
        raw = name.encode("utf-8")
        arr = np.asarray(tensor.data, dtype="<f4", order="C")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        for extent in arr.shape:
            chunks.append(struct.pack("<I", extent))
        chunks.append(arr.tobytes())
    path.write_bytes(b"".join(chunks))


def load_params(path: str | Path, dtype=None, requires_grad: bool = True) -> dict[str, Tensor]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    dtype = dtype or DEFAULT_DTYPE
    params: dict[str, Tensor] = {}
    off = 8
    total = len(blob)
    while off < total:
        if off + 2 > total:
            raise CheckpointError(f"{path}: truncated record header at byte {off}")
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        if off + 1 > total:
            raise CheckpointError(f"{path}: truncated rank for {name!r}")
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        if off + 4 * rank > total:
            raise CheckpointError(f"{path}: truncated extents for {name!r}")
        shape = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        nbytes = 4 * count
        if off + nbytes > total:
            raise CheckpointError(f"{path}: truncated values for {name!r}")
        values = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
        off += nbytes
        if name in params:
            raise CheckpointError(f"{path}: duplicate parameter {name!r}")
        params[name] = Tensor(values.astype(dtype), requires_grad=requires_grad, name=name)
    return params
