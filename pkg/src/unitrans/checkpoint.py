"""Binary container for named float32 tensors.

Layout (little-endian)::

    b"UTCK" | u32 version=1 | u32 count
    per tensor: u16 name_len | name (utf-8) | u8 dtype (0=f32) | u8 ndim
                | u32 dims[ndim] | f32 payload
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"UTCK"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        arr = np.asarray(arr, dtype="<f4", order="C")
        if arr.ndim > 255:
            raise CheckpointError("too many dimensions")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointError("bad magic: not a UTCK checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            dtype, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            if dtype != DTYPE_F32:
                raise CheckpointError(f"unknown dtype code {dtype} for {name!r}")
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            n = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * n > len(buf):
                raise CheckpointError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims).astype(
                np.float32
            )
            pos += 4 * n
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def save(path, tensors: Mapping[str, np.ndarray]):
    Path(path).write_bytes(dumps(tensors))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def with_prefix(tensors: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}{k}": v for k, v in tensors.items()}


def strip_prefix(tensors: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}
