"""On-disk formats: the TNSR binary tensor container and P5 PGM maps.

TNSR layout, all integers little-endian:

    bytes 0-3   magic b"TNSR"
    u32         version (1)
    u8          dtype: 0 = float64, 1 = float32, 2 = uint8
    u32         ndim
    ndim * u32  extents
    payload     row-major array data, little-endian
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

TNSR_MAGIC = b"TNSR"
TNSR_VERSION = 1

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("u1")}
_DTYPE_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1, np.dtype("uint8"): 2}


def tnsr_bytes(arr: np.ndarray) -> bytes:
    dtype = np.dtype(arr.dtype)
    if dtype not in _DTYPE_CODES:
        raise ValueError(f"unsupported dtype {dtype} (use float64, float32 or uint8)")
    code = _DTYPE_CODES[dtype]
    header = struct.pack("<4sIBI", TNSR_MAGIC, TNSR_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr).astype(_DTYPES[code], copy=False).tobytes()
    return header + payload


def write_tnsr(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tnsr_bytes(arr))


def tnsr_from_bytes(buf: bytes, name: str = "<bytes>") -> np.ndarray:
    arr, used = _parse_tnsr(buf, 0, name)
    if used != len(buf):
        raise ValueError(f"{name}: {len(buf) - used} trailing bytes after tensor")
    return arr


def read_tnsr(path) -> np.ndarray:
    return tnsr_from_bytes(Path(path).read_bytes(), str(path))


def _parse_tnsr(buf: bytes, offset: int, name: str):
    """Parse one TNSR record starting at `offset`; returns (array, end offset)."""
    head = struct.calcsize("<4sIBI")
    if len(buf) < offset + head:
        raise ValueError(f"{name}: truncated TNSR header")
    magic, version, code, ndim = struct.unpack_from("<4sIBI", buf, offset)
    if magic != TNSR_MAGIC:
        raise ValueError(f"{name}: bad magic {magic!r}")
    if version != TNSR_VERSION:
        raise ValueError(f"{name}: unsupported TNSR version {version}")
    if code not in _DTYPES:
        raise ValueError(f"{name}: unknown dtype code {code}")
    pos = offset + head
    if len(buf) < pos + 4 * ndim:
        raise ValueError(f"{name}: truncated TNSR extents")
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    dtype = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    nbytes = count * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise ValueError(f"{name}: truncated TNSR payload")
    arr = np.frombuffer(buf[pos : pos + nbytes], dtype=dtype).reshape(shape).copy()
    return arr, pos + nbytes


def read_tnsr_at(buf: bytes, offset: int, name: str = "<pack>") -> np.ndarray:
    arr, _ = _parse_tnsr(buf, offset, name)
    return arr


def write_pgm(path, values: np.ndarray) -> None:
    """8-bit binary (P5) PGM from a [h,w] uint8 array."""
    a = np.asarray(values)
    if a.ndim != 2:
        raise ValueError(f"PGM needs a 2-d array, got shape {a.shape}")
    if a.dtype != np.uint8:
        raise ValueError("PGM payload must be uint8")
    h, w = a.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(a.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if not buf.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(buf[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    data = buf[pos : pos + w * h]
    if len(data) != w * h:
        raise ValueError(f"{path}: truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def prob_map_to_pgm(values: np.ndarray) -> np.ndarray:
    """Map probabilities in [0,1] to uint8 grey levels."""
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(
        np.uint8
    )
