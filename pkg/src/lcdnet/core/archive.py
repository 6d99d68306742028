"""Named-tensor archive: the on-disk format for weights and checkpoints.

Layout (all integers little-endian)::

    b"LCDN"  u32 version (=1)  u64 tensor count
    per tensor: u32 name length, UTF-8 name, u8 dtype (0=f32, 1=f64),
                u8 rank, u64 per dim, row-major payload
    u32 metadata pair count, then per string: u32 length, UTF-8 bytes
"""

from __future__ import annotations

import os
import struct
from typing import Dict, Mapping, Tuple

import numpy as np

MAGIC = b"LCDN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class ArchiveError(ValueError):
    """Corrupt or incompatible archive."""


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def dumps(tensors: Mapping[str, np.ndarray], metadata: Mapping[str, str] | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise ArchiveError(f"{name}: unsupported dtype {arr.dtype}")
        code = _CODES[arr.dtype]
        parts.append(_pack_str(name))
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    meta = dict(metadata or {})
    parts.append(struct.pack("<I", len(meta)))
    for k, v in meta.items():
        parts.append(_pack_str(str(k)))
        parts.append(_pack_str(str(v)))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ArchiveError("truncated archive")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ArchiveError("invalid UTF-8 string") from exc


def loads(buf: bytes) -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise ArchiveError("bad magic bytes")
    version, count = r.unpack("<IQ")
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.string()
        code, rank = r.unpack("<BB")
        if code not in _DTYPES:
            raise ArchiveError(f"{name}: unknown dtype code {code}")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=dt).reshape(dims)
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    (npairs,) = r.unpack("<I")
    meta = {}
    for _ in range(npairs):
        k = r.string()
        meta[k] = r.string()
    if r.pos != len(buf):
        raise ArchiveError("trailing bytes after metadata")
    return tensors, meta


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray],
         metadata: Mapping[str, str] | None = None) -> None:
    data = dumps(tensors, metadata)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
    with open(path, "rb") as fh:
        return loads(fh.read())
