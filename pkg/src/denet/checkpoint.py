"""Binary checkpoint format.

Little-endian layout::

    b"DENT" | u32 version (=1) | u32 tensor count
    per tensor: u16 name length | name (utf-8) | u8 rank | u32 dims[rank] | f32 data
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from denet.nn import Module

MAGIC = b"DENT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if pos + 4 * size > len(buf):
                raise CheckpointError(f"{path}: truncated data for tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return out


def save_model(path, model: Module) -> None:
    write_checkpoint(path, {name: p.data for name, p in model.parameters().items()})


def load_model(path, model: Module) -> Module:
    """Copy checkpoint tensors into ``model``; the name sets and shapes must match."""
    stored = read_checkpoint(path)
    params = model.parameters()
    for name, p in params.items():
        if name not in stored:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        if stored[name].shape != p.shape:
            raise CheckpointError(f"tensor {name!r} has shape {stored[name].shape}, model expects {p.shape}")
        p.data = stored[name].astype(p.dtype)
    extra = set(stored) - set(params)
    if extra:
        raise CheckpointError(f"checkpoint has unexpected tensor {sorted(extra)[0]!r}")
    return model
