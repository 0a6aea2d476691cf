"""Binary checkpoint format.

Layout (all little-endian):

    8 bytes   magic "MOONNET1"
    u32       tensor count
    per tensor:
        u16   name length, then name bytes (utf-8)
        u8    rank
        u32   each dimension
        f32   values, row-major
    u32       CRC32 of every preceding byte

Arbitrary metadata (config echo, RNG state) rides along as byte blobs
packed into float32 tensors with a length prefix, so round-trips are
byte-exact.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

__all__ = [
    "MAGIC",
    "CheckpointError",
    "BadMagicError",
    "CrcMismatchError",
    "TruncatedError",
    "save_checkpoint",
    "load_checkpoint",
    "bytes_to_tensor",
    "tensor_to_bytes",
    "META_PREFIX",
]

MAGIC = b"MOONNET1"
META_PREFIX = "__meta__/"


class CheckpointError(IOError):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    pass


class CrcMismatchError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


def bytes_to_tensor(data: bytes) -> np.ndarray:
    """Pack an arbitrary byte string into a rank-1 float32 array
    (length-prefixed, zero-padded to a multiple of 4)."""
    blob = struct.pack("<I", len(data)) + data
    blob += b"\0" * (-len(blob) % 4)
    return np.frombuffer(blob, dtype="<f4").copy()


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    (length,) = struct.unpack_from("<I", blob)
    return blob[4:4 + length]


def save_checkpoint(tensors: list[tuple[str, np.ndarray]], path):
    """Write named tensors; order is preserved so re-saving is byte-identical."""
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        # ascontiguousarray would promote rank-0 to rank-1; asarray keeps it
        arr = np.asarray(arr, dtype="<f4", order="C")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            parts.append(struct.pack("<I", d))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    Path(path).write_bytes(body + struct.pack("<I", crc))


def load_checkpoint(path) -> list[tuple[str, np.ndarray]]:
    """Read named tensors back; raises distinct errors for bad magic,
    CRC mismatch, and truncation."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8:
        raise TruncatedError(f"{path}: file too short ({len(data)} bytes)")
    if data[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:len(MAGIC)]!r}")
    body, crc_bytes = data[:-4], data[-4:]
    (crc_stored,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CrcMismatchError(f"{path}: CRC mismatch")

    off = len(MAGIC)

    def take(n):
        nonlocal off
        if off + n > len(body):
            raise TruncatedError(f"{path}: truncated at offset {off}")
        chunk = body[off:off + n]
        off += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = [struct.unpack("<I", take(4))[0] for _ in range(rank)]
        size = int(np.prod(dims)) if dims else 1
        raw = take(4 * size)
        tensors.append((name, np.frombuffer(raw, dtype="<f4").reshape(dims).copy()))
    if off != len(body):
        raise TruncatedError(f"{path}: {len(body) - off} trailing bytes")
    return tensors
