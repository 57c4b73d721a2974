"""Binary container for named float32 tensors.

Layout (little-endian)::

    b"EFMC" | version u32 (=1) | count u32
    per tensor: name_len u32 | utf-8 name | ndim u32 | dims u32 * ndim | f32 payload
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from efm.errors import ContractError, FormatError
from efm.nn.tensor import Tensor

MAGIC = b"EFMC"
VERSION = 1
_U32 = struct.Struct("<I")


def encode_checkpoint(tensors: Mapping[str, "np.ndarray | Tensor"]) -> bytes:
    chunks = [MAGIC, _U32.pack(VERSION), _U32.pack(len(tensors))]
    for name, value in tensors.items():
        if not name:
            raise ContractError("tensor names must be non-empty")
        if isinstance(value, Tensor):
            value = value.data
        arr = np.ascontiguousarray(value, dtype="<f4")
        raw_name = name.encode("utf-8")
        chunks.append(_U32.pack(len(raw_name)))
        chunks.append(raw_name)
        chunks.append(_U32.pack(arr.ndim))
        chunks.extend(_U32.pack(d) for d in arr.shape)
        chunks.append(arr.tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def f32(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * count, what), dtype="<f4").astype(np.float32)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not an EFMC checkpoint", 0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    count = r.u32("tensor count")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = r.pos
        name_len = r.u32("name length")
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid utf-8", start + 4) from None
        if not name or name in out:
            raise FormatError(f"empty or duplicate tensor name {name!r}", start)
        ndim = r.u32("ndim")
        dims = tuple(r.u32("dims") for _ in range(ndim))
        size = int(np.prod(dims, dtype=np.int64)) if dims else 1
        out[name] = r.f32(size, f"payload of {name!r}").reshape(dims)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last tensor", r.pos)
    return out


def save_checkpoint(tensors: Mapping[str, "np.ndarray | Tensor"], path: str | os.PathLike) -> None:
    """Write atomically, so an interrupted save never leaves a torn file."""
    path = Path(path)
    data = encode_checkpoint(tensors)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


def encode_text(text: str) -> np.ndarray:
    """Pack a short utf-8 record into a float32 vector (one byte per element)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text(arr: np.ndarray) -> str:
    return np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8")
