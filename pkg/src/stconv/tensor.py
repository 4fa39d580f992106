"""Dense float32 tensors, seeded generators and the STT1 file format.

Tensors are plain row-major ``numpy.ndarray`` values of dtype float32; the
canonical network layout is ``N x C x T x H x W``.  Random generators are
counter-based (Philox) and always passed explicitly.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, InvalidRangeError, InvalidShapeError, ShapeError

DTYPE = np.float32
Rng = np.random.Generator

STT_MAGIC = b"STT1"
STT_VERSION = 1

_ELEMENTWISE = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def new_rng(seed: int, *stream: int) -> Rng:
    """Philox generator for ``seed``; ``stream`` selects an independent substream."""
    seq = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(stream))
    return np.random.Generator(np.random.Philox(seq))


def check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise InvalidShapeError("shape must have rank >= 1")
    if any(s < 1 for s in shape):
        raise InvalidShapeError(f"all extents must be >= 1, got {shape}")
    return shape


def zeros(shape: Sequence[int]) -> np.ndarray:
    return np.zeros(check_shape(shape), dtype=DTYPE)


def ones(shape: Sequence[int]) -> np.ndarray:
    return np.ones(check_shape(shape), dtype=DTYPE)


def fill_uniform(shape: Sequence[int], lo: float, hi: float, rng: Rng) -> np.ndarray:
    """Uniform samples in ``[lo, hi)``; bit-identical for equal generator state."""
    shape = check_shape(shape)
    if not lo < hi:
        raise InvalidRangeError(f"need lo < hi, got lo={lo} hi={hi}")
    u = rng.random(shape, dtype=np.float64)
    out = (lo + (hi - lo) * u).astype(DTYPE)
    # float32 rounding can land exactly on hi
    top = np.nextafter(DTYPE(hi), DTYPE(lo))
    np.minimum(out, top, out=out)
    np.maximum(out, DTYPE(lo), out=out)
    return out


def elementwise(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"elementwise {op}: shapes {a.shape} and {b.shape} differ")
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a.astype(DTYPE, copy=False), b.astype(DTYPE, copy=False))


def as_tensor(values: Iterable | np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=DTYPE)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    check_shape(arr.shape)
    return arr


def encode_tensor(t: np.ndarray) -> bytes:
    t = np.ascontiguousarray(t, dtype="<f4")
    check_shape(t.shape)
    header = STT_MAGIC + struct.pack("<BB", STT_VERSION, t.ndim)
    header += struct.pack(f"<{t.ndim}Q", *t.shape)
    return header + t.tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != STT_MAGIC:
        raise FormatError("not an STT1 tensor file")
    version, rank = struct.unpack_from("<BB", buf, 4)
    if version != STT_VERSION:
        raise FormatError(f"unsupported STT version {version}")
    if rank < 1:
        raise FormatError("tensor rank must be >= 1")
    offset = 6
    shape = struct.unpack_from(f"<{rank}Q", buf, offset)
    offset += 8 * rank
    count = int(np.prod(shape))
    if len(buf) != offset + 4 * count:
        raise FormatError(f"payload size mismatch for shape {shape}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
    return data.astype(DTYPE).reshape(shape)


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see a partial file."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_tensor(path: str | os.PathLike, t: np.ndarray) -> None:
    atomic_write_bytes(path, encode_tensor(t))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
