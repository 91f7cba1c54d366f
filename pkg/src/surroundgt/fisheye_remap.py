"""Cubemap -> fisheye lookup tables and raster remapping.

Every fisheye pixel is unprojected to a direction on the unit sphere; the
ray from the centre pierces the unit cube on the face whose axis carries
the largest direction component, and the face's 90° pinhole projection
gives the source coordinate. Five faces are used (no back face), which
covers any lens with a half-angle up to 135°.
"""

from __future__ import annotations

import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping

import numpy as np

from .calib_geometry import (
    CameraCalibration,
    DomainError,
    FisheyeIntrinsics,
    pixel_grid,
    unproject_fisheye_pixels,
)

FACE_NAMES = ("front", "left", "right", "up", "down")
FRONT, LEFT, RIGHT, UP, DOWN = range(5)
DEFAULT_FACE_SIZE = 1280

# Columns are the face camera's x, y, z axes expressed in the rig camera frame.
FACE_ROTATIONS = {
    "front": np.eye(3),
    "left": np.array([[0.0, 0.0, -1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]),
    "right": np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]]),
    "up": np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]]),
    "down": np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]]),
}
_ROT_STACK = np.stack([FACE_ROTATIONS[n] for n in FACE_NAMES])
# Signed axis per face (front +Z, left -X, right +X, up -Y, down +Y).
_FACE_AXES = _ROT_STACK[:, :, 2]

LUT_MAGIC = b"FLUT"
LUT_VERSION = 1
_LUT_HEADER = struct.Struct("<4sHIII32s")
_LUT_RECORD = np.dtype([("face", "u1"), ("u", "<f4"), ("v", "<f4"), ("valid", "u1")])

LABEL_FILL = {np.dtype(np.uint8): 255, np.dtype(np.uint16): 65535}


class LutFormatError(ValueError):
    pass


class FaceSizeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class CubemapFaceSet:
    """Five square face rasters keyed by face name.

    ``kind`` is ``"image"``, ``"label"`` or ``"depth"``; label rasters may
    only be remapped with nearest sampling.
    """

    faces: Mapping[str, np.ndarray]
    kind: str = "image"

    def __post_init__(self):
        missing = [n for n in FACE_NAMES if n not in self.faces]
        if missing:
            raise DomainError(f"cubemap is missing faces {missing}")
        extra = sorted(set(self.faces) - set(FACE_NAMES))
        if extra:
            raise DomainError(f"unexpected cubemap faces {extra}")
        shapes = {np.asarray(self.faces[n]).shape[:2] for n in FACE_NAMES}
        if len(shapes) != 1:
            raise DomainError(f"cubemap faces differ in size: {sorted(shapes)}")
        (h, w), = shapes
        if h != w:
            raise DomainError(f"cubemap faces must be square, got {w}x{h}")
        if self.kind not in ("image", "label", "depth"):
            raise DomainError(f"unknown raster kind {self.kind!r}")

    @property
    def face_size(self) -> int:
        return int(np.asarray(self.faces["front"]).shape[0])

    def stacked(self) -> np.ndarray:
        return np.stack([np.asarray(self.faces[n]) for n in FACE_NAMES])


def face_focal(face_size: int) -> float:
    # 90° field of view
    return face_size / 2.0


def face_ray_factor(face_size: int) -> np.ndarray:
    """Per face pixel, ratio of ray distance to plane depth (``1/cos``)."""
    f = face_focal(face_size)
    c = face_size / 2.0
    i = (np.arange(face_size, dtype=np.float64) - c) / f
    return np.sqrt(1.0 + i[None, :] ** 2 + i[:, None] ** 2)


def face_directions(face_size: int, face: str) -> np.ndarray:
    """Unit directions (rig camera frame) through every pixel of ``face``."""
    f = face_focal(face_size)
    c = face_size / 2.0
    ys, xs = np.mgrid[0:face_size, 0:face_size].astype(np.float64)
    d = np.stack([(xs - c) / f, (ys - c) / f, np.ones_like(xs)], axis=-1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return d @ FACE_ROTATIONS[face].T


def select_face(directions: np.ndarray) -> np.ndarray:
    """Index of the cube face pierced by each direction (ties: lower index)."""
    comps = np.asarray(directions, dtype=np.float64) @ _FACE_AXES.T
    return np.argmax(comps, axis=-1).astype(np.uint8)


def project_to_face(directions: np.ndarray, faces: np.ndarray, face_size: int):
    """Sub-pixel ``(u, v)`` of each direction on its face (unclamped)."""
    R = _ROT_STACK[faces.astype(np.intp)]
    local = np.einsum("...ji,...j->...i", R, directions)
    f = face_focal(face_size)
    c = face_size / 2.0
    return f * local[..., 0] / local[..., 2] + c, f * local[..., 1] / local[..., 2] + c


@dataclass(frozen=True, eq=False)
class LookupTable:
    width: int
    height: int
    face_size: int
    fingerprint: bytes
    face: np.ndarray
    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, LookupTable):
            return NotImplemented
        return (
            (self.width, self.height, self.face_size, self.fingerprint)
            == (other.width, other.height, other.face_size, other.fingerprint)
            and np.array_equal(self.face, other.face)
            and np.array_equal(self.u.view(np.uint32), other.u.view(np.uint32))
            and np.array_equal(self.v.view(np.uint32), other.v.view(np.uint32))
            and np.array_equal(self.valid, other.valid)
        )

    __hash__ = None

    @cached_property
    def _taps(self):
        n = self.face_size
        u = self.u.astype(np.float64)
        v = self.v.astype(np.float64)
        x0 = np.floor(u).astype(np.int64)
        y0 = np.floor(v).astype(np.int64)
        fx = u - x0
        fy = v - y0
        x1 = np.minimum(x0 + 1, n - 1)
        y1 = np.minimum(y0 + 1, n - 1)
        base = self.face.astype(np.int64) * n * n
        idx = np.stack([base + y0 * n + x0, base + y0 * n + x1, base + y1 * n + x0, base + y1 * n + x1], axis=-1)
        w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
        return idx, w

    @property
    def weights(self) -> np.ndarray:
        """Bilinear weights ``(h, w, 4)`` for taps (x0,y0), (x1,y0), (x0,y1), (x1,y1)."""
        return self._taps[1]

    @cached_property
    def nearest_index(self) -> np.ndarray:
        """Flat index into the stacked faces of the nearest source pixel."""
        n = self.face_size
        x = np.minimum(np.floor(self.u.astype(np.float64) + 0.5).astype(np.int64), n - 1)
        y = np.minimum(np.floor(self.v.astype(np.float64) + 0.5).astype(np.int64), n - 1)
        return self.face.astype(np.int64) * n * n + y * n + x


def build_lut(intr: FisheyeIntrinsics, face_size: int = DEFAULT_FACE_SIZE, fingerprint: bytes | None = None) -> LookupTable:
    """Map every fisheye pixel to a cubemap face coordinate."""
    if face_size <= 0:
        raise DomainError(f"face_size must be positive, got {face_size}")
    if fingerprint is None:
        fingerprint = bytes(32)
    if len(fingerprint) != 32:
        raise DomainError("calibration fingerprint must be 32 bytes")
    dirs, valid = unproject_fisheye_pixels(intr, pixel_grid(intr.width, intr.height))
    dirs = np.where(valid[..., None], dirs, np.array([0.0, 0.0, 1.0]))
    face = select_face(dirs)
    u, v = project_to_face(dirs, face, face_size)
    hi = np.float64(face_size - 1)
    u = np.clip(u, 0.0, hi).astype(np.float32)
    v = np.clip(v, 0.0, hi).astype(np.float32)
    face = np.where(valid, face, 0).astype(np.uint8)
    u[~valid] = 0
    v[~valid] = 0
    for a in (face, u, v, valid):
        a.setflags(write=False)
    return LookupTable(intr.width, intr.height, face_size, bytes(fingerprint), face, u, v, valid)


def build_lut_for(calib: CameraCalibration, face_size: int = DEFAULT_FACE_SIZE) -> LookupTable:
    return build_lut(calib.intrinsics, face_size, calib.fingerprint())


def check_fingerprint(lut: LookupTable, calib: CameraCalibration) -> bool:
    ok = lut.fingerprint == calib.fingerprint()
    if not ok:
        warnings.warn(
            f"LUT fingerprint does not match calibration {calib.name!r}; rebuild the LUT",
            stacklevel=2,
        )
    return ok


def _row_bands(height: int, workers: int) -> list[tuple[int, int]]:
    n = max(1, min(workers, height))
    edges = np.linspace(0, height, n + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _run_bands(fn, height: int, workers: int):
    bands = _row_bands(height, workers)
    if len(bands) == 1:
        fn(*bands[0])
        return
    with ThreadPoolExecutor(max_workers=len(bands)) as pool:
        list(pool.map(lambda b: fn(*b), bands))


def _default_fill(kind: str, dtype: np.dtype):
    if kind == "image":
        return 0
    if np.issubdtype(dtype, np.floating):
        return np.nan
    return LABEL_FILL.get(np.dtype(dtype), 0)


def remap(
    lut: LookupTable,
    faces: CubemapFaceSet,
    mode: str = "bilinear",
    fill=None,
    workers: int = 1,
    calibration: CameraCalibration | None = None,
) -> np.ndarray:
    """Resample a cubemap into the fisheye image described by ``lut``.

    Output has the input dtype and channel layout. Out-of-coverage pixels
    receive ``fill`` (default 0 for images, NaN for float ground truth and
    255/65535 for 8/16-bit labels).
    """
    if faces.face_size != lut.face_size:
        raise FaceSizeMismatch(f"faces are {faces.face_size}px but the LUT expects {lut.face_size}px")
    if mode not in ("bilinear", "nearest"):
        raise DomainError(f"unknown sampling mode {mode!r}")
    stack = faces.stacked()
    if mode == "bilinear" and faces.kind == "label":
        raise DomainError("label rasters must be remapped with nearest sampling")
    if mode == "bilinear" and np.issubdtype(stack.dtype, np.integer) and faces.kind != "image":
        raise DomainError("integer ground-truth rasters must be remapped with nearest sampling")
    if calibration is not None:
        check_fingerprint(lut, calibration)
    if fill is None:
        fill = _default_fill(faces.kind, stack.dtype)

    chan_shape = stack.shape[3:]
    flat = stack.reshape(-1, *chan_shape)
    out = np.empty((lut.height, lut.width, *chan_shape), dtype=stack.dtype)
    if mode == "nearest":
        index = lut.nearest_index
    else:
        index, weights = lut._taps
    valid = lut.valid
    is_int = np.issubdtype(stack.dtype, np.integer)

    def band(r0, r1):
        if mode == "nearest":
            vals = flat[index[r0:r1]]
        else:
            taps = flat[index[r0:r1]].astype(np.float64)
            w = weights[r0:r1]
            w = w.reshape(w.shape + (1,) * len(chan_shape))
            vals = np.sum(taps * w, axis=2)
            if is_int:
                info = np.iinfo(stack.dtype)
                vals = np.clip(np.floor(vals + 0.5), info.min, info.max)
        seg = vals.astype(stack.dtype, copy=False)
        m = valid[r0:r1]
        seg[~m] = fill
        out[r0:r1] = seg

    _run_bands(band, lut.height, workers)
    return out


def remap_depth(lut: LookupTable, depth_faces: CubemapFaceSet, workers: int = 1) -> np.ndarray:
    """Convert face plane depths to fisheye ray distances (metres, NaN outside coverage).

    Each face sample is converted with its own ray angle before bilinear
    interpolation, so the distance is continuous across face seams.
    """
    factor = face_ray_factor(depth_faces.face_size)
    ray = {n: np.asarray(depth_faces.faces[n], dtype=np.float64) * factor for n in FACE_NAMES}
    return remap(lut, CubemapFaceSet(ray, kind="depth"), mode="bilinear", fill=np.nan, workers=workers)


def serialize_lut(lut: LookupTable) -> bytes:
    header = _LUT_HEADER.pack(LUT_MAGIC, LUT_VERSION, lut.width, lut.height, lut.face_size, lut.fingerprint)
    rec = np.empty(lut.width * lut.height, dtype=_LUT_RECORD)
    rec["face"] = lut.face.ravel()
    rec["u"] = lut.u.ravel()
    rec["v"] = lut.v.ravel()
    rec["valid"] = lut.valid.ravel()
    return header + rec.tobytes()


def deserialize_lut(buf: bytes, calibration: CameraCalibration | None = None) -> LookupTable:
    if len(buf) < _LUT_HEADER.size:
        raise LutFormatError("truncated LUT header")
    magic, version, w, h, n, fp = _LUT_HEADER.unpack_from(buf)
    if magic != LUT_MAGIC:
        raise LutFormatError(f"bad LUT magic {magic!r}")
    if version != LUT_VERSION:
        raise LutFormatError(f"unsupported LUT version {version} (expected {LUT_VERSION})")
    body = buf[_LUT_HEADER.size:]
    expected = w * h * _LUT_RECORD.itemsize
    if len(body) != expected:
        raise LutFormatError(f"LUT body has {len(body)} bytes, expected {expected}")
    rec = np.frombuffer(body, dtype=_LUT_RECORD).reshape(h, w)
    face = rec["face"].copy()
    u = rec["u"].astype(np.float32)
    v = rec["v"].astype(np.float32)
    valid = rec["valid"].astype(bool)
    if face.max(initial=0) >= len(FACE_NAMES):
        raise LutFormatError("LUT references an unknown face id")
    for a in (face, u, v, valid):
        a.setflags(write=False)
    lut = LookupTable(w, h, n, fp, face, u, v, valid)
    if calibration is not None:
        check_fingerprint(lut, calibration)
    return lut


def save_lut(lut: LookupTable, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_lut(lut))


def load_lut(path, calibration: CameraCalibration | None = None) -> LookupTable:
    with open(path, "rb") as fh:
        return deserialize_lut(fh.read(), calibration)
