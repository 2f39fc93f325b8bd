"""Little-endian binary array files.

Single tensor::

    b"VTMF1\\0" | u32 ndim | ndim x u32 dims | prod(dims) x f32

Sectioned file (checkpoints): the same magic followed by ``ndim = 0``, then
``u32 count`` and ``count`` records of ``u32 name_len | utf-8 name | u32 ndim |
dims | f32 data``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"VTMF1\x00"


class FormatError(ValueError):
    pass


def _array_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def _read_array(buf: memoryview, pos: int) -> tuple[np.ndarray, int]:
    if pos + 4 > len(buf):
        raise FormatError("truncated header")
    (ndim,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if pos + 4 * ndim > len(buf):
        raise FormatError("truncated dims")
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    count = int(np.prod(dims)) if ndim else 1
    end = pos + 4 * count
    if end > len(buf):
        raise FormatError(f"dim mismatch: header promises {count} floats, file is shorter")
    arr = np.frombuffer(buf[pos:end], dtype="<f4").astype(np.float32).reshape(dims)
    return arr, end


def write_tensor(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim == 0:
        raise FormatError("scalars are not representable; use shape (1,)")
    Path(path).write_bytes(MAGIC + _array_bytes(arr))


def read_tensor(path) -> np.ndarray:
    buf = memoryview(Path(path).read_bytes())
    if bytes(buf[: len(MAGIC)]) != MAGIC:
        raise FormatError(f"{path}: bad magic")
    (ndim,) = struct.unpack_from("<I", buf, len(MAGIC))
    if ndim == 0:
        raise FormatError(f"{path}: sectioned file, use read_sections")
    arr, end = _read_array(buf, len(MAGIC))
    if end != len(buf):
        raise FormatError(f"{path}: dim mismatch, {len(buf) - end} trailing bytes")
    return arr


def payload(path) -> bytes:
    """The raw float32 bytes of a single-tensor file."""
    buf = Path(path).read_bytes()
    (ndim,) = struct.unpack_from("<I", buf, len(MAGIC))
    return buf[len(MAGIC) + 4 + 4 * ndim:]


def write_sections(path, arrays: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", 0, len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + _array_bytes(np.asarray(arr)))
    Path(path).write_bytes(b"".join(parts))


def read_sections(path) -> dict[str, np.ndarray]:
    buf = memoryview(Path(path).read_bytes())
    if bytes(buf[: len(MAGIC)]) != MAGIC:
        raise FormatError(f"{path}: bad magic")
    pos = len(MAGIC)
    marker, count = struct.unpack_from("<II", buf, pos)
    if marker != 0:
        raise FormatError(f"{path}: not a sectioned file")
    pos += 8
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = bytes(buf[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        out[name], pos = _read_array(buf, pos)
    if pos != len(buf):
        raise FormatError(f"{path}: trailing bytes after {count} sections")
    return out
