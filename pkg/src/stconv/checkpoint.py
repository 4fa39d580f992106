"""STM1 model container: a flat list of named float32 tensors.

Layout: ``b"STM1"``, u32 entry count, then per entry a u16 name length,
the UTF-8 name, u8 rank, rank x u64 extents and the float32 payload, all
little-endian.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError
from .tensor import DTYPE, atomic_write_bytes, check_shape

STM_MAGIC = b"STM1"


def encode_checkpoint(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [STM_MAGIC, struct.pack("<I", len(entries))]
    for name, value in entries.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"entry name too long: {name[:40]}...")
        arr = np.ascontiguousarray(value, dtype="<f4")
        check_shape(arr.shape)
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != STM_MAGIC:
        raise FormatError("not an STM1 checkpoint")
    try:
        (count,) = struct.unpack_from("<I", buf, 4)
        offset = 8
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, offset)
            offset += 2
            name = buf[offset:offset + nlen].decode("utf-8")
            offset += nlen
            (rank,) = struct.unpack_from("<B", buf, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}Q", buf, offset)
            offset += 8 * rank
            n = int(np.prod(shape))
            data = np.frombuffer(buf, dtype="<f4", count=n, offset=offset)
            offset += 4 * n
            out[name] = data.astype(DTYPE).reshape(shape)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt STM1 checkpoint: {exc}") from exc
    if offset != len(buf):
        raise FormatError("trailing bytes after last STM1 entry")
    return out


def save_checkpoint(path: str | os.PathLike, entries: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_checkpoint(entries))


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())
