"""Binary weight registry file.

Layout (little-endian)::

    b"ESW1" | u32 tensor_count
    per tensor: u16 name_len | utf-8 name | u8 rank | rank x u32 dims | f32 payload
    u32 CRC-32 (IEEE) of every preceding byte
"""

from __future__ import annotations

import os
import struct
import zlib
from typing import Mapping

import numpy as np

MAGIC = b"ESW"
VERSION = b"1"


class WeightFileError(ValueError):
    pass


class BadMagicError(WeightFileError):
    pass


class UnsupportedVersionError(WeightFileError):
    pass


class TruncatedRecordError(WeightFileError):
    pass


class CRCMismatchError(WeightFileError):
    pass


class DuplicateNameError(WeightFileError):
    pass


def encode_weights(weights: Mapping[str, np.ndarray]) -> bytes:
    buf = bytearray(MAGIC + VERSION)
    buf += struct.pack("<I", len(weights))
    for name, arr in weights.items():
        arr = np.asarray(arr)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name}: refusing to save non-finite values")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"{name[:40]}...: name longer than 65535 bytes")
        if arr.ndim > 0xFF:
            raise ValueError(f"{name}: rank {arr.ndim} too large")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(buf) & 0xFFFFFFFF)
    return bytes(buf)


def decode_weights(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 4 or data[:3] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}; expected {MAGIC + VERSION!r}")
    if data[3:4] != VERSION:
        raise UnsupportedVersionError(f"unsupported weight file version {data[3:4]!r}")
    end = len(data) - 4
    pos = 4

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > end:
            raise TruncatedRecordError(f"truncated while reading {what} at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4, "tensor_count"))
    records: list[tuple[str, np.ndarray]] = []
    for i in range(count):
        (name_len,) = struct.unpack("<H", take(2, f"name length of tensor {i}"))
        try:
            name = take(name_len, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFileError(f"tensor {i}: name is not valid UTF-8") from exc
        (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        size = int(np.prod(dims, dtype=np.int64))
        payload = take(4 * size, f"payload of {name}")
        records.append((name, np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)))
    if pos != end:
        raise WeightFileError(f"{end - pos} unexpected bytes after the last record")
    (stored,) = struct.unpack("<I", data[end:])
    actual = zlib.crc32(data[:end]) & 0xFFFFFFFF
    if stored != actual:
        raise CRCMismatchError(f"CRC mismatch: file says {stored:08x}, contents hash to {actual:08x}")
    out: dict[str, np.ndarray] = {}
    for name, arr in records:
        if name in out:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        out[name] = arr
    return out


def save_weights(model_or_weights, path: str | os.PathLike) -> None:
    """Write a model's registry (or a plain name -> array mapping) to ``path``."""
    data = encode_weights(getattr(model_or_weights, "weights", model_or_weights))
    with open(path, "wb") as fh:
        fh.write(data)


def load_weights(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_weights(fh.read())
