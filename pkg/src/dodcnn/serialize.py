"""DTEN tensor files and DODC checkpoints.

DTEN layout (little-endian)::

    b"DTEN" | u8 version=1 | u8 dtype (0=f32, 1=f64) | u8 rank | u64 dims[rank] | values

DODC layout::

    b"DODC" | u8 version=1 | u64 config-hash | u64 count |
    count x (u32 name-length | name bytes (utf-8) | DTEN record)
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

DTEN_MAGIC = b"DTEN"
DODC_MAGIC = b"DODC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class FormatError(ValueError):
    """A DTEN or DODC stream is malformed, truncated, or incompatible."""

    def __init__(self, message: str, source: str | None = None, offset: int | None = None):
        self.source = source
        self.offset = offset
        where = []
        if source:
            where.append(source)
        if offset is not None:
            where.append(f"byte {offset}")
        super().__init__(f"{': '.join([', '.join(where), message]) if where else message}")


def _read_exact(f: BinaryIO, n: int, what: str, source: str | None) -> bytes:
    pos = f.tell() if f.seekable() else None
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated while reading {what} (wanted {n} bytes, got {len(buf)})", source, pos)
    return buf


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        raise TypeError(f"DTEN stores float32/float64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("DTEN rank must fit in one byte")
    code = _CODES[arr.dtype]
    f.write(DTEN_MAGIC)
    f.write(struct.pack("<BBB", VERSION, code, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def read_tensor(f: BinaryIO, source: str | None = None) -> np.ndarray:
    pos = f.tell() if f.seekable() else None
    magic = _read_exact(f, 4, "DTEN magic", source)
    if magic != DTEN_MAGIC:
        raise FormatError(f"bad DTEN magic {magic!r}", source, pos)
    version, code, rank = struct.unpack("<BBB", _read_exact(f, 3, "DTEN header", source))
    if version != VERSION:
        raise FormatError(f"unsupported DTEN version {version}", source, pos)
    if code not in _DTYPES:
        raise FormatError(f"unknown DTEN dtype code {code}", source, pos)
    dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, "DTEN dims", source))
    dtype = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.uint64)) if rank else 1
    if count > 1 << 34:
        raise FormatError(f"implausible DTEN size {dims}", source, pos)
    raw = _read_exact(f, count * dtype.itemsize, "DTEN values", source)
    return np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as f:
        arr = read_tensor(f, str(path))
        if f.read(1):
            raise FormatError("trailing bytes after DTEN record", str(path))
    return arr


def dumps_checkpoint(tensors: dict[str, np.ndarray], config_hash: int) -> bytes:
    f = io.BytesIO()
    f.write(DODC_MAGIC)
    f.write(struct.pack("<BQQ", VERSION, config_hash, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        write_tensor(f, arr)
    return f.getvalue()


def loads_checkpoint(blob: bytes, source: str | None = None) -> tuple[int, dict[str, np.ndarray]]:
    """Parse a DODC blob into ``(config_hash, {name: array})``."""
    f = io.BytesIO(blob)
    magic = _read_exact(f, 4, "DODC magic", source)
    if magic != DODC_MAGIC:
        raise FormatError(f"bad DODC magic {magic!r}", source, 0)
    version, config_hash, count = struct.unpack("<BQQ", _read_exact(f, 17, "DODC header", source))
    if version != VERSION:
        raise FormatError(f"unsupported DODC version {version}", source, 4)
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", _read_exact(f, 4, "record name length", source))
        try:
            name = _read_exact(f, n, "record name", source).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"record name is not utf-8: {exc}", source, f.tell()) from None
        if name in tensors:
            raise FormatError(f"duplicate record {name!r}", source, f.tell())
        tensors[name] = read_tensor(f, source)
    if f.read(1):
        raise FormatError("trailing bytes after last record", source, f.tell() - 1)
    return config_hash, tensors
