"""Flat parameter archive.

Layout (all integers little-endian)::

    b"TFNV1"
    u32 metadata length, metadata bytes (UTF-8 ``key=value`` lines)
    u32 entry count
    per entry: u32 name length, name bytes, u32 ndim, ndim x u64 extents,
               product(extents) x f64 values
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"TFNV1"


class ArchiveError(ValueError):
    pass


def dump_archive(arrays: dict[str, np.ndarray], meta: str = "") -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    meta_b = meta.encode("utf-8")
    buf.write(struct.pack("<I", len(meta_b)))
    buf.write(meta_b)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<I", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def _read(stream: BinaryIO, n: int) -> bytes:
    chunk = stream.read(n)
    if len(chunk) != n:
        raise ArchiveError(f"truncated archive: wanted {n} bytes, got {len(chunk)}")
    return chunk


def parse_archive(data: bytes) -> tuple[dict[str, np.ndarray], str]:
    stream = io.BytesIO(data)
    if _read(stream, len(MAGIC)) != MAGIC:
        raise ArchiveError("bad archive header (expected TFNV1)")
    (meta_len,) = struct.unpack("<I", _read(stream, 4))
    meta = _read(stream, meta_len).decode("utf-8")
    (count,) = struct.unpack("<I", _read(stream, 4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _read(stream, 4))
        name = _read(stream, name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", _read(stream, 4))
        shape = struct.unpack(f"<{ndim}Q", _read(stream, 8 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(_read(stream, 8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if stream.read(1):
        raise ArchiveError("trailing bytes after archive entries")
    return arrays, meta


def save_archive(path: str | Path, arrays: dict[str, np.ndarray], meta: str = "") -> None:
    Path(path).write_bytes(dump_archive(arrays, meta))


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], str]:
    return parse_archive(Path(path).read_bytes())
