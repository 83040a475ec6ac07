"""Little-endian binary framing helpers used by every persisted format."""

from __future__ import annotations

import hashlib
import struct
from typing import BinaryIO

from .errors import FileFormatError


def read_exact(fh: BinaryIO, n: int, path) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FileFormatError(f"{path}: truncated file (wanted {n} bytes, got {len(data)})")
    return data


def expect_magic(fh: BinaryIO, magic: bytes, path) -> None:
    got = fh.read(len(magic))
    if got != magic:
        raise FileFormatError(f"{path}: bad magic {got!r} (expected {magic!r})")


def write_u8(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<B", value))


def read_u8(fh: BinaryIO, path) -> int:
    return struct.unpack("<B", read_exact(fh, 1, path))[0]


def write_u32(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<I", value))


def read_u32(fh: BinaryIO, path) -> int:
    return struct.unpack("<I", read_exact(fh, 4, path))[0]


def write_block_u32(fh: BinaryIO, data: bytes) -> None:
    """Length-prefixed byte block."""
    write_u32(fh, len(data))
    fh.write(data)


def read_block_u32(fh: BinaryIO, path) -> bytes:
    return read_exact(fh, read_u32(fh, path), path)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
