"""Image inputs for the CLI: raw f32 tensor files and binary/ASCII PGM/PPM.

Tensor file layout: ``b"MELT"``, u32 rank, u32 dims[rank], f32 little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError

TENSOR_MAGIC = b"MELT"


def write_tensor(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = TENSOR_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != TENSOR_MAGIC:
        raise FormatError(f"{path}: not a tensor file (bad magic {buf[:4]!r})")
    (rank,) = struct.unpack_from("<I", buf, 4)
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) != offset + 4 * count:
        raise FormatError(f"{path}: payload is {len(buf) - offset} bytes, dims {dims} need {4 * count}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=offset).astype(np.float32).reshape(dims)


def _pnm_tokens(buf: bytes):
    """Yield header tokens, skipping comments; returns the offset after the last one."""
    pos = 0
    while True:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header")
        yield buf[start:pos], pos


def read_pnm(path) -> np.ndarray:
    """Read P2/P5 (grey) or P3/P6 (RGB); returns (C, H, W) float32 scaled to [0, 1]."""
    buf = Path(path).read_bytes()
    tokens = _pnm_tokens(buf)
    magic, _ = next(tokens)
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported PNM type {magic!r}")
    width = int(next(tokens)[0])
    height = int(next(tokens)[0])
    maxval_tok, end = next(tokens)
    maxval = int(maxval_tok)
    channels = 3 if magic in (b"P3", b"P6") else 1
    count = width * height * channels
    if magic in (b"P5", b"P6"):
        dtype = ">u2" if maxval > 255 else "u1"
        data = np.frombuffer(buf, dtype=dtype, count=count, offset=end + 1)
    else:
        data = np.array(buf[end:].split()[:count], dtype=np.int64)
        if data.size != count:
            raise FormatError(f"{path}: expected {count} samples, found {data.size}")
    img = data.astype(np.float32).reshape(height, width, channels) / np.float32(maxval)
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def load_image(path, channels: int | None = None) -> np.ndarray:
    """Load a tensor file or PNM image as (C, H, W); grey images are repeated to ``channels``."""
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(4)
    img = read_tensor(path) if head == TENSOR_MAGIC else read_pnm(path)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3:
        raise ShapeError(f"{path}: expected a (C, H, W) image, got shape {img.shape}")
    if channels is not None and img.shape[0] != channels:
        if img.shape[0] == 1:
            img = np.repeat(img, channels, axis=0)
        else:
            raise ShapeError(f"{path}: image has {img.shape[0]} channels, model expects {channels}")
    return img
