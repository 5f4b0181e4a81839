"""Little-endian record reading/writing with a trailing CRC32."""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ChecksumError, FormatError

F32_LE = np.dtype("<f4")


class Writer:
    """Accumulates a byte stream and appends the CRC32 trailer on ``finish``."""

    def __init__(self):
        self._chunks: list[bytes] = []

    def raw(self, b: bytes) -> None:
        self._chunks.append(bytes(b))

    def pack(self, fmt: str, *values) -> None:
        self._chunks.append(struct.pack("<" + fmt, *values))

    def string(self, s: str) -> None:
        data = s.encode("utf-8")
        if len(data) > 0xFFFF:
            raise ValueError(f"string too long to serialize ({len(data)} bytes)")
        self.pack("H", len(data))
        self.raw(data)

    def f32(self, arr: np.ndarray) -> None:
        self._chunks.append(np.ascontiguousarray(arr, dtype=F32_LE).tobytes())

    def finish(self) -> bytes:
        body = b"".join(self._chunks)
        return body + struct.pack("<I", zlib.crc32(body))


class Reader:
    """Cursor over a verified byte buffer."""

    def __init__(self, buf: bytes, offset: int = 0):
        self.buf = buf
        self.pos = offset

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise FormatError("unexpected end of data")
        values = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return values

    def string(self) -> str:
        (n,) = self.unpack("H")
        if self.pos + n > len(self.buf):
            raise FormatError("unexpected end of data in string")
        s = self.buf[self.pos : self.pos + n].decode("utf-8")
        self.pos += n
        return s

    def f32(self, shape) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = 4 * count
        if self.pos + nbytes > len(self.buf):
            raise FormatError("unexpected end of data in tensor payload")
        # read-only view over the immutable file buffer
        arr = np.frombuffer(self.buf, dtype=F32_LE, count=count, offset=self.pos)
        self.pos += nbytes
        return arr.astype(np.float32, copy=False).reshape(shape)


def check_magic(buf: bytes, magic: bytes, versions) -> int:
    """Validate magic and version; return the version."""
    if len(buf) < 8 or buf[:4] != magic:
        raise FormatError(f"bad magic: expected {magic!r}, got {bytes(buf[:4])!r}")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version not in versions:
        raise FormatError(f"unsupported version {version} (supported: {sorted(versions)})")
    return version


def verify_crc(buf: bytes) -> None:
    if len(buf) < 12:
        raise ChecksumError("file too short to carry a CRC32 trailer")
    (stored,) = struct.unpack_from("<I", buf, len(buf) - 4)
    actual = zlib.crc32(memoryview(buf)[:-4])
    if stored != actual:
        raise ChecksumError(f"CRC32 mismatch: stored {stored:#010x}, computed {actual:#010x}")


def write_atomic(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
