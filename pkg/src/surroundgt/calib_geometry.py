"""Camera models and 3D geometry primitives.

Camera frame convention used throughout the package: optical axis +Z,
+X right, +Y down. Raster pixel ``(row j, col i)`` sits at image
coordinate ``(x=i, y=j)``; the pinhole principal point is ``(w/2, h/2)``.

Fisheye model: the image radius in pixels is a fourth-order polynomial of
the incident angle with no constant term::

    r(theta) = a1*theta + a2*theta**2 + a3*theta**3 + a4*theta**4
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import tandg
from scipy.spatial.transform import Rotation

DEFAULT_THETA_MAX = math.radians(95.0)
BOX_EPSILON = 1e-6
_INVERSE_TABLE_SIZE = 4097

SENSOR_TO_WORLD = "sensor_to_world"
WORLD_TO_SENSOR = "world_to_sensor"
_CONVENTIONS = (SENSOR_TO_WORLD, WORLD_TO_SENSOR, "box_to_world", "object_to_world", "sensor_to_ego")


class DomainError(ValueError):
    """An argument lies outside the domain of an operation."""


class OutOfCoverageError(ValueError):
    """A ray or radius falls outside the fisheye field of view."""


# ---------------------------------------------------------------------------
# Fisheye polynomial model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FisheyeIntrinsics:
    a1: float
    a2: float
    a3: float
    a4: float
    cx: float
    cy: float
    width: int
    height: int
    theta_max: float = DEFAULT_THETA_MAX

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise DomainError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DomainError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}")
        if not (0 < self.theta_max < math.pi):
            raise DomainError(f"theta_max must be in (0, pi), got {self.theta_max}")
        theta = np.linspace(0.0, self.theta_max, 1000)
        r = self._poly(theta)
        slope = self._dpoly(theta)
        if np.any(np.diff(r) <= 0) or np.any(slope <= 0):
            raise DomainError(
                f"polynomial {self.coeffs} is not strictly increasing on [0, {self.theta_max:.6f}]"
            )

    @property
    def coeffs(self) -> tuple[float, float, float, float]:
        return (self.a1, self.a2, self.a3, self.a4)

    @property
    def r_max(self) -> float:
        """Image radius of the coverage boundary, in pixels."""
        return float(self._poly(self.theta_max))

    def _poly(self, theta):
        return theta * (self.a1 + theta * (self.a2 + theta * (self.a3 + theta * self.a4)))

    def _dpoly(self, theta):
        return self.a1 + theta * (2.0 * self.a2 + theta * (3.0 * self.a3 + theta * 4.0 * self.a4))

    def to_dict(self) -> dict:
        return {
            "model": "polynomial4",
            "coeffs": list(self.coeffs),
            "principal": [self.cx, self.cy],
            "size": [self.width, self.height],
            "theta_max_deg": math.degrees(self.theta_max),
        }


def radius_from_theta(intr: FisheyeIntrinsics, theta):
    """Image radius (pixels) for incident angle ``theta`` (radians).

    Accepts scalars or arrays; raises :class:`DomainError` for any angle
    outside ``[0, theta_max]``.
    """
    t = np.asarray(theta, dtype=np.float64)
    bad = (t < 0) | (t > intr.theta_max) | ~np.isfinite(t)
    if np.any(bad):
        offender = float(t[bad].flat[0]) if t.ndim else float(t)
        raise DomainError(f"theta={offender!r} outside [0, {intr.theta_max!r}]")
    r = intr._poly(t)
    return float(r) if np.ndim(theta) == 0 else r


@lru_cache(maxsize=32)
def _inverse_table(intr: FisheyeIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    theta = np.linspace(0.0, intr.theta_max, _INVERSE_TABLE_SIZE)
    return theta, intr._poly(theta)


def _theta_from_radius(intr: FisheyeIntrinsics, r: np.ndarray, newton_steps: int = 4) -> np.ndarray:
    # The table gives each radius a bracketing interval of the monotone
    # polynomial and a linear first guess; Newton steps clamped to that
    # bracket then converge to machine precision.
    r = np.asarray(r, dtype=np.float64)
    t_tab, r_tab = _inverse_table(intr)
    k = np.clip(np.searchsorted(r_tab, r, side="right") - 1, 0, len(t_tab) - 2)
    lo, hi = t_tab[k], t_tab[k + 1]
    r0, r1 = r_tab[k], r_tab[k + 1]
    theta = lo + (r - r0) * ((hi - lo) / (r1 - r0))
    for _ in range(newton_steps):
        theta = np.clip(theta - (intr._poly(theta) - r) / intr._dpoly(theta), lo, hi)
    return np.where(r == 0, 0.0, theta)


def theta_from_radius(intr: FisheyeIntrinsics, r):
    """Incident angle (radians) whose image radius is ``r`` pixels."""
    rr = np.asarray(r, dtype=np.float64)
    r_max = intr.r_max
    bad = (rr < 0) | (rr > r_max) | ~np.isfinite(rr)
    if np.any(bad):
        offender = float(rr[bad].flat[0]) if rr.ndim else float(rr)
        raise OutOfCoverageError(f"radius {offender!r} px beyond coverage [0, {r_max!r}]")
    theta = _theta_from_radius(intr, rr)
    return float(theta) if np.ndim(r) == 0 else theta


def project_fisheye_points(intr: FisheyeIntrinsics, points: np.ndarray):
    """Vectorised projection of camera-frame points (any norm) to pixels.

    Returns ``(pixels[..., 2], valid[...])``. Rays with incident angle above
    ``theta_max`` are invalid; their pixel coordinates are NaN. The image
    bounds are not checked here.
    """
    p = np.asarray(points, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    rho = np.hypot(x, y)
    theta = np.arctan2(rho, z)
    norm = np.sqrt(rho * rho + z * z)
    valid = (theta <= intr.theta_max) & (norm > 0) & np.isfinite(theta)
    r = intr._poly(np.where(valid, theta, 0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        cos_phi = np.where(rho > 0, x / rho, 1.0)
        sin_phi = np.where(rho > 0, y / rho, 0.0)
    px = np.where(valid, intr.cx + r * cos_phi, np.nan)
    py = np.where(valid, intr.cy + r * sin_phi, np.nan)
    return np.stack([px, py], axis=-1), valid


def unproject_fisheye_pixels(intr: FisheyeIntrinsics, pixels: np.ndarray):
    """Vectorised inverse of :func:`project_fisheye_points`.

    Returns ``(unit_dirs[..., 3], valid[...])``; directions of pixels beyond
    the coverage radius are NaN.
    """
    p = np.asarray(pixels, dtype=np.float64)
    dx = p[..., 0] - intr.cx
    dy = p[..., 1] - intr.cy
    r = np.hypot(dx, dy)
    valid = r <= intr.r_max
    theta = _theta_from_radius(intr, np.where(valid, r, 0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        cos_phi = np.where(r > 0, dx / r, 1.0)
        sin_phi = np.where(r > 0, dy / r, 0.0)
    s = np.sin(theta)
    d = np.stack([s * cos_phi, s * sin_phi, np.cos(theta)], axis=-1)
    d[~valid] = np.nan
    return d, valid


def fisheye_project(intr: FisheyeIntrinsics, direction: Sequence[float]) -> tuple[float, float] | None:
    """Project a unit direction; ``None`` means out of coverage."""
    d = np.asarray(direction, dtype=np.float64)
    if d.shape != (3,) or abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise DomainError(f"direction must be a unit 3-vector, got {direction!r}")
    pix, valid = project_fisheye_points(intr, d)
    if not valid:
        return None
    return float(pix[0]), float(pix[1])


def fisheye_unproject(intr: FisheyeIntrinsics, pixel: Sequence[float]) -> np.ndarray:
    dx = pixel[0] - intr.cx
    dy = pixel[1] - intr.cy
    if math.hypot(dx, dy) > intr.r_max:
        raise OutOfCoverageError(f"pixel {tuple(pixel)!r} lies outside the coverage radius {intr.r_max:.3f}")
    d, _ = unproject_fisheye_pixels(intr, np.asarray(pixel, dtype=np.float64))
    return d


# ---------------------------------------------------------------------------
# Pinhole model
# ---------------------------------------------------------------------------


def pinhole_focal(fov_deg: float, width: float) -> float:
    """Focal length in pixels of a pinhole camera with horizontal FoV ``fov_deg``."""
    if not (0.0 < fov_deg < 180.0):
        raise DomainError(f"fov_deg must be in (0, 180), got {fov_deg}")
    # tangent in degrees is exact at 45°, so a 90° camera gets f = width / 2 exactly
    return width / (2.0 * float(tandg(fov_deg / 2.0)))


@dataclass(frozen=True)
class PinholeIntrinsics:
    fov_deg: float
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise DomainError(f"image size must be positive, got {self.width}x{self.height}")
        pinhole_focal(self.fov_deg, self.width)

    @property
    def f(self) -> float:
        return pinhole_focal(self.fov_deg, self.width)

    @property
    def K(self) -> np.ndarray:
        f = self.f
        return np.array(
            [[f, 0.0, self.width / 2.0], [0.0, f, self.height / 2.0], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )

    @property
    def K_inv(self) -> np.ndarray:
        f = self.f
        cx, cy = self.width / 2.0, self.height / 2.0
        return np.array(
            [[1.0 / f, 0.0, -cx / f], [0.0, 1.0 / f, -cy / f], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )


def project_pinhole_points(intr: PinholeIntrinsics, points: np.ndarray):
    """Project camera-frame points; ``valid`` requires positive depth only."""
    p = np.asarray(points, dtype=np.float64)
    z = p[..., 2]
    valid = z > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        zz = np.where(valid, z, np.nan)
        f = intr.f
        px = f * p[..., 0] / zz + intr.width / 2.0
        py = f * p[..., 1] / zz + intr.height / 2.0
    return np.stack([px, py], axis=-1), valid


def pixel_grid(width: int, height: int) -> np.ndarray:
    """``(height, width, 2)`` array of ``(x, y)`` pixel coordinates."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([xs, ys], axis=-1)


# ---------------------------------------------------------------------------
# Rigid transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation + translation mapping points from a source to a target frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    convention: str = SENSOR_TO_WORLD

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise DomainError("rotation must be orthonormal with determinant +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, convention: str = SENSOR_TO_WORLD) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3), convention)

    @classmethod
    def from_matrix(cls, matrix, convention: str = SENSOR_TO_WORLD) -> "RigidTransform":
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape == (16,):
            m = m.reshape(4, 4)
        if m.shape != (4, 4):
            raise DomainError(f"expected a 4x4 matrix, got shape {m.shape}")
        return cls(m[:3, :3], m[:3, 3], convention)

    @classmethod
    def from_quaternion(cls, quat_wxyz, translation, convention: str = SENSOR_TO_WORLD) -> "RigidTransform":
        w, x, y, z = (float(q) for q in quat_wxyz)
        R = Rotation.from_quat([x, y, z, w]).as_matrix()
        return cls(R, translation, convention)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
            self.convention,
        )

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        conv = {SENSOR_TO_WORLD: WORLD_TO_SENSOR, WORLD_TO_SENSOR: SENSOR_TO_WORLD}.get(
            self.convention, self.convention
        )
        return RigidTransform(Rt, -Rt @ self.translation, conv)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return np.allclose(self.rotation, other.rotation, atol=atol) and np.allclose(
            self.translation, other.translation, atol=atol
        )

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "convention": self.convention,
        }


def backproject(intr: PinholeIntrinsics, cam_to_world: RigidTransform, pixel, depth: float) -> np.ndarray:
    """World point seen at ``pixel`` with plane depth ``depth`` (along +Z)."""
    if not depth > 0:
        raise DomainError(f"depth must be positive, got {depth!r}")
    x, y = pixel
    p_cam = intr.K_inv @ np.array([x, y, 1.0]) * depth
    return cam_to_world.apply(p_cam)


def backproject_raster(intr: PinholeIntrinsics, cam_to_world: RigidTransform, depth: np.ndarray) -> np.ndarray:
    """Back-project a full plane-depth raster to world points ``(h, w, 3)``."""
    h, w = depth.shape
    if (w, h) != (intr.width, intr.height):
        raise DomainError(f"depth raster {w}x{h} does not match intrinsics {intr.width}x{intr.height}")
    f = intr.f
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    d = depth.astype(np.float64)
    p_cam = np.stack([(xs - w / 2.0) / f * d, (ys - h / 2.0) / f * d, d], axis=-1)
    return cam_to_world.apply(p_cam)


# ---------------------------------------------------------------------------
# Oriented boxes
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OrientedBox3D:
    object_id: int
    class_id: int
    center: np.ndarray
    half_extents: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        c = np.array(self.center, dtype=np.float64).reshape(3)
        h = np.array(self.half_extents, dtype=np.float64).reshape(3)
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        if np.any(h <= 0):
            raise DomainError(f"box {self.object_id}: half extents must be positive, got {h.tolist()}")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise DomainError(f"box {self.object_id}: rotation must be orthonormal")
        for a in (c, h, R):
            a.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_extents", h)
        object.__setattr__(self, "rotation", R)

    @property
    def volume(self) -> float:
        return float(8.0 * np.prod(self.half_extents))

    def planes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Unit normals (rows) and the lower/upper offsets of the three slabs."""
        normals = self.rotation.T
        mid = normals @ self.center
        return normals, mid - self.half_extents, mid + self.half_extents

    def transformed(self, transform: RigidTransform) -> "OrientedBox3D":
        return OrientedBox3D(
            self.object_id,
            self.class_id,
            transform.apply(self.center),
            self.half_extents,
            transform.rotation @ self.rotation,
        )

    def to_dict(self) -> dict:
        return {
            "object_id": int(self.object_id),
            "class_id": int(self.class_id),
            "center": self.center.tolist(),
            "extents": (2.0 * self.half_extents).tolist(),
            "rotation": self.rotation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OrientedBox3D":
        if "half_extents" in d:
            half = np.asarray(d["half_extents"], dtype=np.float64)
        else:
            half = np.asarray(d["extents"], dtype=np.float64) / 2.0
        rot = d.get("rotation", np.eye(3))
        rot = np.asarray(rot, dtype=np.float64)
        if rot.shape == (4,):
            w, x, y, z = rot
            rot = Rotation.from_quat([x, y, z, w]).as_matrix()
        return cls(int(d["object_id"]), int(d["class_id"]), d["center"], half, rot.reshape(3, 3))


def points_in_box(points: np.ndarray, box: OrientedBox3D, eps: float = BOX_EPSILON) -> np.ndarray:
    """Six-plane containment test for an array of world points ``(..., 3)``.

    A point is inside when it lies between each of the three pairs of
    parallel face planes, widened by ``eps`` metres.
    """
    p = np.asarray(points, dtype=np.float64)
    normals, lower, upper = box.planes()
    s = p @ normals.T
    return np.all((s >= lower - eps) & (s <= upper + eps), axis=-1)


def point_in_box(point, box: OrientedBox3D, eps: float = BOX_EPSILON) -> bool:
    return bool(points_in_box(np.asarray(point, dtype=np.float64)[None], box, eps)[0])


# ---------------------------------------------------------------------------
# Calibration files
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CameraCalibration:
    name: str
    intrinsics: FisheyeIntrinsics
    extrinsic: RigidTransform

    def fingerprint(self) -> bytes:
        """SHA-256 over a canonical encoding of intrinsics and extrinsics."""
        payload = json.dumps(
            {"intrinsics": self.intrinsics.to_dict(), "extrinsic": self.extrinsic.to_dict()},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).digest()

    def to_dict(self) -> dict:
        d = {"name": self.name, **self.intrinsics.to_dict()}
        d["extrinsic"] = self.extrinsic.to_dict()
        return d


def _parse_rotation(rot) -> np.ndarray:
    if isinstance(rot, dict):
        if "quaternion" in rot:
            w, x, y, z = rot["quaternion"]
            return Rotation.from_quat([x, y, z, w]).as_matrix()
        rot = rot["matrix"]
    arr = np.asarray(rot, dtype=np.float64)
    if arr.shape == (4,):
        w, x, y, z = arr
        return Rotation.from_quat([x, y, z, w]).as_matrix()
    if arr.size == 9:
        return arr.reshape(3, 3)
    raise DomainError(f"rotation must be a 3x3 matrix (row-major) or a wxyz quaternion, got {rot!r}")


def calibration_from_dict(d: dict) -> CameraCalibration:
    model = d.get("model", "polynomial4")
    if model != "polynomial4":
        raise DomainError(f"unsupported lens model {model!r}")
    coeffs = [float(c) for c in d["coeffs"]]
    if len(coeffs) != 4:
        raise DomainError(f"expected 4 polynomial coefficients, got {len(coeffs)}")
    w, h = (int(v) for v in d["size"])
    cx, cy = (float(v) for v in d["principal"])
    theta_max = math.radians(float(d.get("theta_max_deg", 95.0)))
    intr = FisheyeIntrinsics(*coeffs, cx=cx, cy=cy, width=w, height=h, theta_max=theta_max)
    ext = d.get("extrinsic", {})
    convention = ext.get("convention", "sensor_to_ego")
    if convention not in _CONVENTIONS:
        raise DomainError(f"unknown extrinsic convention {convention!r}")
    R = _parse_rotation(ext.get("rotation", np.eye(3)))
    t = ext.get("translation", [0.0, 0.0, 0.0])
    transform = RigidTransform(R, t, convention)
    return CameraCalibration(str(d.get("name", "camera")), intr, transform)


def load_calibration(path: str | Path) -> CameraCalibration:
    with open(path) as fh:
        return calibration_from_dict(json.load(fh))


def save_calibration(calib: CameraCalibration, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(calib.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_calibrations(paths: Iterable[str | Path]) -> dict[str, CameraCalibration]:
    out = {}
    for p in paths:
        c = load_calibration(p)
        out[c.name] = c
    return out
