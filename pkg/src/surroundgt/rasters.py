"""Raster file I/O: 8/16-bit PNG and the ``FRAS`` float container.

``FRAS`` layout (little-endian): 16-byte header ``b"FRAS"``, width u32,
height u32, channels u32; then ``height*width*channels`` float32 values in
row-major order with channels interleaved.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

FRAS_MAGIC = b"FRAS"
_FRAS_HEADER = struct.Struct("<4sIII")


class RasterFormatError(ValueError):
    pass


def encode_fras(data: np.ndarray) -> bytes:
    a = np.asarray(data, dtype="<f4")
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise RasterFormatError(f"FRAS holds 2D or 3D rasters, got shape {a.shape}")
    h, w, c = a.shape
    return _FRAS_HEADER.pack(FRAS_MAGIC, w, h, c) + np.ascontiguousarray(a).tobytes()


def decode_fras(buf: bytes) -> np.ndarray:
    if len(buf) < _FRAS_HEADER.size:
        raise RasterFormatError("truncated FRAS header")
    magic, w, h, c = _FRAS_HEADER.unpack_from(buf)
    if magic != FRAS_MAGIC:
        raise RasterFormatError(f"bad FRAS magic {magic!r}")
    n = w * h * c * 4
    body = buf[_FRAS_HEADER.size:]
    if len(body) != n:
        raise RasterFormatError(f"FRAS body has {len(body)} bytes, expected {n}")
    a = np.frombuffer(body, dtype="<f4").reshape(h, w, c).astype(np.float32)
    return a[..., 0] if c == 1 else a


def write_fras(path: str | Path, data: np.ndarray) -> None:
    Path(path).write_bytes(encode_fras(data))


def read_fras(path: str | Path) -> np.ndarray:
    return decode_fras(Path(path).read_bytes())


def write_png(path: str | Path, data: np.ndarray) -> None:
    """Write an 8-bit (gray/RGB) or 16-bit gray PNG."""
    a = np.asarray(data)
    if a.dtype == np.uint16:
        if a.ndim != 2:
            raise RasterFormatError("16-bit PNG output supports single-channel rasters only")
        img = Image.fromarray(a.astype("<u2"))  # maps to mode I;16
    elif a.dtype == np.uint8:
        if a.ndim == 3 and a.shape[2] == 1:
            a = a[..., 0]
        img = Image.fromarray(a)
    else:
        raise RasterFormatError(f"PNG output needs uint8 or uint16 data, got {a.dtype}")
    # fixed compression settings keep the bytes reproducible
    img.save(path, format="PNG", compress_level=6, optimize=False)


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode in ("I;16", "I;16B", "I;16L"):
            return np.array(img, dtype=np.uint16)
        if img.mode == "I":
            return np.array(img).astype(np.uint16)
        if img.mode == "P":
            img = img.convert("L")
        if img.mode == "RGBA":
            img = img.convert("RGB")
        return np.array(img)
