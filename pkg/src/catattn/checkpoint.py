"""Binary checkpoint files.

Layout, all integers little-endian u32::

    b"CATCKPT1" version count
    count x (name_len, utf-8 name, rank, extents..., float32 payload)
    crc32 of everything above
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .autograd import Variable

MAGIC = b"CATCKPT1"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


def encode(tensors: Mapping[str, np.ndarray | Variable]) -> bytes:
    """Serialise named tensors; values are stored as 32-bit floats."""
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(tensors))]
    for name, t in tensors.items():
        arr = np.asarray(t.value if isinstance(t, Variable) else t, dtype="<f4")
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body))


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < len(MAGIC) + 12 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, (crc,) = blob[:-4], _U32.unpack(blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"checkpoint CRC mismatch (stored {crc:08x}, computed {zlib.crc32(body):08x})")
    pos = len(MAGIC)

    def u32() -> int:
        nonlocal pos
        if pos + 4 > len(body):
            raise CheckpointError("checkpoint truncated")
        (v,) = _U32.unpack_from(body, pos)
        pos += 4
        return v

    version = u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(u32()):
        n = u32()
        name = body[pos : pos + n].decode("utf-8")
        pos += n
        shape = tuple(u32() for _ in range(u32()))
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(body):
            raise CheckpointError(f"checkpoint truncated inside {name!r}")
        out[name] = np.frombuffer(body, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after the last entry")
    return out


def save(path, tensors: Mapping[str, np.ndarray | Variable]) -> None:
    Path(path).write_bytes(encode(tensors))


def load(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def restore(store: Mapping[str, Variable], tensors: Mapping[str, np.ndarray]) -> None:
    """Copy checkpoint values into ``store`` after checking names and shapes."""
    missing = sorted(set(store) - set(tensors))
    extra = sorted(set(tensors) - set(store))
    if missing or extra:
        raise CheckpointError(
            f"checkpoint does not match the model: missing {missing or 'none'}; extra {extra or 'none'}"
        )
    for name, var in store.items():
        arr = tensors[name]
        if arr.shape != var.value.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != model shape {var.value.shape}")
        var.value = arr.astype(var.value.dtype)
