"""Dense ground truth from simulator exports.

* instance segmentation: back-project every instance-class pixel and test
  it against the oriented 3D boxes of the frame;
* motion segmentation: threshold each object's world displacement between
  the previous and the current frame;
* optical flow: move the previous frame's point cloud with the per-object
  rigid motions and reproject it with the camera pose of both frames.

All functions accept either a :class:`PinholeIntrinsics` (plane depth) or a
:class:`FisheyeIntrinsics` (ray distance) camera model.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np

from .calib_geometry import (
    BOX_EPSILON,
    DomainError,
    FisheyeIntrinsics,
    OrientedBox3D,
    PinholeIntrinsics,
    RigidTransform,
    pixel_grid,
    points_in_box,
    project_fisheye_points,
    project_pinhole_points,
    unproject_fisheye_pixels,
)
from .classes import INSTANCE_CLASSES

DEFAULT_MOTION_THRESHOLD = 0.5
OCCLUSION_TOLERANCE = 0.05
FLOW_SELF_CHECK_TOL = 1e-3
MAX_INSTANCE_ID = 65534

CameraModel = PinholeIntrinsics | FisheyeIntrinsics


class PoseInconsistencyError(RuntimeError):
    """Reprojection of the previous frame does not land on its own pixels."""


class MissingTransformError(KeyError):
    def __init__(self, ids):
        self.ids = sorted(int(i) for i in ids)
        super().__init__(f"no transform at both t-1 and t for dynamic objects {self.ids}")


# ---------------------------------------------------------------------------
# Camera model helpers
# ---------------------------------------------------------------------------


def camera_points(model: CameraModel, depth: np.ndarray) -> np.ndarray:
    """Camera-frame points for every pixel of a depth raster (NaN where undefined).

    Pinhole depth is plane depth; fisheye depth is Euclidean ray distance.
    """
    h, w = depth.shape
    if (w, h) != (model.width, model.height):
        raise DomainError(f"raster {w}x{h} does not match camera {model.width}x{model.height}")
    d = np.asarray(depth, dtype=np.float64)
    d = np.where(np.isfinite(d) & (d > 0), d, np.nan)
    if isinstance(model, PinholeIntrinsics):
        ones = np.ones((h, w, 1))
        rays = np.concatenate([pixel_grid(w, h), ones], axis=-1) @ model.K_inv.T
        return rays * d[..., None]
    return _fisheye_rays(model) * d[..., None]


@lru_cache(maxsize=8)
def _fisheye_rays(model: FisheyeIntrinsics) -> np.ndarray:
    # full-raster unit rays; every frame of a camera reuses them
    dirs, _ = unproject_fisheye_pixels(model, pixel_grid(model.width, model.height))
    dirs.flags.writeable = False
    return dirs


def project_points(model: CameraModel, points: np.ndarray):
    """Project camera-frame points.

    Returns ``(pixels, valid, range)`` where ``range`` is plane depth for a
    pinhole model and ray distance for a fisheye model. ``valid`` requires
    the rounded pixel to fall inside the raster.
    """
    p = np.asarray(points, dtype=np.float64)
    if isinstance(model, PinholeIntrinsics):
        pix, valid = project_pinhole_points(model, p)
        rng = p[..., 2]
    else:
        pix, valid = project_fisheye_points(model, p)
        rng = np.linalg.norm(p, axis=-1)
    with np.errstate(invalid="ignore"):
        xi = np.floor(pix[..., 0] + 0.5)
        yi = np.floor(pix[..., 1] + 0.5)
        inside = (xi >= 0) & (xi < model.width) & (yi >= 0) & (yi < model.height)
    valid = valid & inside & np.all(np.isfinite(p), axis=-1)
    return pix, valid, rng


# ---------------------------------------------------------------------------
# Instance segmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class InstanceRaster:
    id_map: np.ndarray
    color_map: np.ndarray


def _box_order(boxes: Sequence[OrientedBox3D]) -> list[OrientedBox3D]:
    ids = [b.object_id for b in boxes]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise DomainError(f"duplicate object ids in frame: {dupes}")
    for b in boxes:
        if not 0 < b.object_id <= MAX_INSTANCE_ID:
            raise DomainError(f"object id {b.object_id} outside 1..{MAX_INSTANCE_ID}")
    # smallest volume first, lowest id on ties
    return sorted(boxes, key=lambda b: (b.volume, b.object_id))


def _box_aabb(box: OrientedBox3D, pad: float) -> tuple[np.ndarray, np.ndarray]:
    reach = np.abs(box.rotation) @ box.half_extents + pad
    return box.center - reach, box.center + reach


def assign_instances(points: np.ndarray, boxes: Sequence[OrientedBox3D], eps: float = BOX_EPSILON) -> np.ndarray:
    """Object id of the smallest box containing each point (0 when none)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    ids = np.zeros(len(pts), dtype=np.uint16)
    free = np.all(np.isfinite(pts), axis=1)
    for box in _box_order(boxes):
        lo, hi = _box_aabb(box, eps + 1e-9)
        near = free & np.all((pts >= lo) & (pts <= hi), axis=1)
        if not near.any():
            continue
        cand = np.flatnonzero(near)
        hit = cand[points_in_box(pts[cand], box, eps)]
        ids[hit] = box.object_id
        free[hit] = False
    return ids.reshape(np.shape(points)[:-1])


def instance_ids(
    depth: np.ndarray,
    semantic: np.ndarray,
    boxes: Sequence[OrientedBox3D],
    model: CameraModel,
    cam_to_world: RigidTransform,
    instance_classes: Iterable[int] = INSTANCE_CLASSES,
    eps: float = BOX_EPSILON,
) -> np.ndarray:
    if depth.shape != semantic.shape:
        raise DomainError(f"depth {depth.shape} and semantic {semantic.shape} differ in shape")
    out = np.zeros(depth.shape, dtype=np.uint16)
    if not boxes:
        _box_order(boxes)
        return out
    cand = np.isin(semantic, np.fromiter(instance_classes, dtype=np.int64)) & np.isfinite(depth) & (depth > 0)
    if not cand.any():
        _box_order(boxes)
        return out
    pts_cam = camera_points(model, depth)[cand]
    pts = cam_to_world.apply(pts_cam)
    out[cand] = assign_instances(pts, boxes, eps)
    return out


def instance_segmentation(
    depth: np.ndarray,
    semantic: np.ndarray,
    boxes: Sequence[OrientedBox3D],
    intr: CameraModel,
    cam_to_world: RigidTransform,
    session_seed: int = 0,
    instance_classes: Iterable[int] = INSTANCE_CLASSES,
    eps: float = BOX_EPSILON,
) -> InstanceRaster:
    """Per-pixel object ids from depth, semantics and 3D boxes.

    Only pixels of an instance-bearing class are candidates; overlapping
    boxes resolve to the smallest volume, then the lowest id.
    """
    ids = instance_ids(depth, semantic, boxes, intr, cam_to_world, instance_classes, eps)
    return InstanceRaster(ids, colorize_instances(ids, session_seed))


def assign_instance_color(object_id: int, session_seed: int, salt: int = 0) -> tuple[int, int, int]:
    """Deterministic colour for an object; never black (reserved for background)."""
    while True:
        digest = hashlib.sha256(f"{int(session_seed)}:{int(object_id)}:{salt}".encode()).digest()
        rgb = (digest[0], digest[1], digest[2])
        if rgb != (0, 0, 0):
            return rgb
        salt += 1


def instance_colors(object_ids: Iterable[int], session_seed: int) -> dict[int, tuple[int, int, int]]:
    """Colours for a set of ids, distinct within the set.

    Ids are processed in ascending order; an id whose colour collides with
    an earlier one is re-hashed with an increasing salt.
    """
    out: dict[int, tuple[int, int, int]] = {}
    used: set[tuple[int, int, int]] = set()
    for oid in sorted({int(i) for i in object_ids if int(i) != 0}):
        salt = 0
        rgb = assign_instance_color(oid, session_seed, salt)
        while rgb in used:
            salt += 1
            rgb = assign_instance_color(oid, session_seed, salt)
        out[oid] = rgb
        used.add(rgb)
    return out


def colorize_instances(id_map: np.ndarray, session_seed: int) -> np.ndarray:
    ids = np.asarray(id_map)
    out = np.zeros(ids.shape + (3,), dtype=np.uint8)
    uniq, inv = np.unique(ids, return_inverse=True)
    colors = instance_colors(uniq.tolist(), session_seed)
    lut = np.array([colors.get(int(u), (0, 0, 0)) for u in uniq], dtype=np.uint8)
    out[...] = lut[inv.reshape(ids.shape)]
    return out


# ---------------------------------------------------------------------------
# Motion segmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MotionRecord:
    object_id: int
    displacement: float

    def __post_init__(self):
        if not self.displacement >= 0:
            raise DomainError(f"displacement must be non-negative, got {self.displacement}")


def _as_transform(t) -> RigidTransform:
    return t if isinstance(t, RigidTransform) else RigidTransform.from_matrix(t, "object_to_world")


def motion_distances(transforms_prev: Mapping[int, object], transforms_curr: Mapping[int, object]) -> list[MotionRecord]:
    """World-frame distance travelled by each object present at both times.

    Only the position counts: an object spinning in place has displacement 0.
    """
    out = []
    for oid in sorted(set(transforms_prev) & set(transforms_curr)):
        p0 = _as_transform(transforms_prev[oid]).translation
        p1 = _as_transform(transforms_curr[oid]).translation
        out.append(MotionRecord(int(oid), float(np.linalg.norm(p1 - p0))))
    return out


def motion_mask(instances, records: Iterable[MotionRecord], threshold: float = DEFAULT_MOTION_THRESHOLD) -> np.ndarray:
    """1 where the pixel's object moved strictly more than ``threshold`` metres."""
    if threshold < 0:
        raise DomainError(f"threshold must be non-negative, got {threshold}")
    ids = instances.id_map if isinstance(instances, InstanceRaster) else np.asarray(instances)
    moving = [r.object_id for r in records if r.displacement > threshold]
    return np.isin(ids, np.asarray(moving, dtype=np.int64)).astype(np.uint8) if moving else np.zeros(ids.shape, np.uint8)


def format_motions(records: Iterable[MotionRecord]) -> str:
    # repr() gives the shortest string that round-trips the double exactly
    return "".join(f"{r.object_id} {r.displacement!r}\n" for r in records)


def parse_motions(text: str) -> list[MotionRecord]:
    out = []
    for line in text.splitlines():
        line = line.strip()
        if line:
            oid, disp = line.split()
            out.append(MotionRecord(int(oid), float(disp)))
    return out


# ---------------------------------------------------------------------------
# Scene flow and optical flow
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SceneFlow:
    """World points seen in the previous frame and where they are at time t."""

    points_prev: np.ndarray
    points_curr: np.ndarray
    valid: np.ndarray


@dataclass(frozen=True, eq=False)
class FlowField:
    flow: np.ndarray  # (h, w, 2) float32, NaN where invalid
    valid: np.ndarray
    occluded: np.ndarray

    @property
    def dx(self) -> np.ndarray:
        return self.flow[..., 0]

    @property
    def dy(self) -> np.ndarray:
        return self.flow[..., 1]


def scene_flow(
    depth: np.ndarray,
    id_map: np.ndarray,
    model: CameraModel,
    cam_prev: RigidTransform,
    object_transforms_prev: Mapping[int, object],
    object_transforms_curr: Mapping[int, object],
    spawned: Iterable[int] = (),
) -> SceneFlow:
    """3D correspondences for every pixel of the previous frame.

    ``depth`` and ``id_map`` are the previous frame's rasters. Pixels of an
    object with a transform at both times move by ``T(t) T(t-1)^-1``; other
    pixels keep their world position. Objects in ``spawned`` (new or gone)
    are invalid; any other object with a transform at only one time raises
    :class:`MissingTransformError`.
    """
    ids = np.asarray(id_map)
    if ids.shape != depth.shape:
        raise DomainError(f"id map {ids.shape} and depth {depth.shape} differ in shape")
    pts_prev = cam_prev.apply(camera_points(model, depth))
    valid = np.all(np.isfinite(pts_prev), axis=-1)
    pts_curr = pts_prev.copy()

    present = set(np.unique(ids[valid]).tolist()) - {0}
    prev_keys = {int(k) for k in object_transforms_prev}
    curr_keys = {int(k) for k in object_transforms_curr}
    spawned = {int(s) for s in spawned}
    half = present & (prev_keys ^ curr_keys)
    missing = half - spawned
    if missing:
        raise MissingTransformError(missing)
    for oid in sorted(present & spawned):
        valid &= ids != oid
    prev_map = {int(k): v for k, v in object_transforms_prev.items()}
    curr_map = {int(k): v for k, v in object_transforms_curr.items()}
    for oid in sorted((present & prev_keys & curr_keys) - spawned):
        t_prev, t_curr = _as_transform(prev_map[oid]), _as_transform(curr_map[oid])
        if np.array_equal(t_prev.as_matrix(), t_curr.as_matrix()):
            continue  # unmoved: skip the round trip through T T^-1 and its rounding
        motion = t_curr @ t_prev.inverse()
        sel = (ids == oid) & valid
        pts_curr[sel] = motion.apply(pts_prev[sel])
    pts_prev[~valid] = np.nan
    pts_curr[~valid] = np.nan
    return SceneFlow(pts_prev, pts_curr, valid)


def optical_flow(
    scene: SceneFlow,
    model: CameraModel,
    pose_prev: RigidTransform,
    pose_curr: RigidTransform,
    depth_curr: np.ndarray | None = None,
    occlusion_tol: float = OCCLUSION_TOLERANCE,
    self_check_tol: float = FLOW_SELF_CHECK_TOL,
    max_mismatch_fraction: float = 0.01,
) -> FlowField:
    """Project scene flow into the image: flow = p(t) - p(t-1).

    Poses are sensor-to-world. A pixel is invalid when either endpoint is
    out of coverage. With ``depth_curr`` (same depth convention as the
    model) endpoints hidden behind the rendered surface at t by more than
    ``occlusion_tol`` metres are flagged in ``occluded``; their flow stays.
    """
    h, w = scene.valid.shape
    p0, v0, _ = project_points(model, pose_prev.inverse().apply(scene.points_prev))
    p1, v1, rng1 = project_points(model, pose_curr.inverse().apply(scene.points_curr))
    valid = scene.valid & v0 & v1

    grid = pixel_grid(w, h)
    err = np.max(np.abs(p0 - grid), axis=-1)
    checked = scene.valid & v0
    mismatch = checked & ~(err <= self_check_tol)
    n_checked = int(checked.sum())
    if n_checked and mismatch.sum() > max_mismatch_fraction * n_checked:
        worst = float(np.nanmax(err[checked]))
        raise PoseInconsistencyError(
            f"{int(mismatch.sum())}/{n_checked} pixels reproject more than {self_check_tol} px "
            f"from their source (worst {worst:.4g} px); calibration or pose is inconsistent"
        )
    valid &= ~mismatch

    flow = np.full((h, w, 2), np.nan, dtype=np.float32)
    flow[valid] = (p1 - p0)[valid]

    occluded = np.zeros((h, w), dtype=bool)
    if depth_curr is not None:
        if depth_curr.shape != (h, w):
            raise DomainError(f"depth at t {depth_curr.shape} does not match {(h, w)}")
        xi = np.floor(np.nan_to_num(p1[..., 0]) + 0.5).astype(np.int64).clip(0, w - 1)
        yi = np.floor(np.nan_to_num(p1[..., 1]) + 0.5).astype(np.int64).clip(0, h - 1)
        rendered = np.asarray(depth_curr, dtype=np.float64)[yi, xi]
        with np.errstate(invalid="ignore"):
            occluded = valid & (rng1 > rendered + occlusion_tol)
    return FlowField(flow, valid, occluded)


# ---------------------------------------------------------------------------
# Flow colour coding
# ---------------------------------------------------------------------------

FLOW_WHEEL = {
    "scheme": "hsv",
    "hue": "atan2(dy, dx) mapped to [0, 1), 0 = +x (right), increasing towards +y (down)",
    "saturation": "min(|flow| / max_magnitude, 1)",
    "value": 1.0,
    "invalid": [0, 0, 0],
}


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    i = np.floor(h * 6.0).astype(np.int64) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def flow_colorize(flow, max_magnitude: float | None = None) -> np.ndarray:
    """8-bit RGB colour coding: hue is direction, saturation is magnitude.

    ``max_magnitude=None`` normalises by the largest valid magnitude. Zero
    flow is white; invalid pixels are black.
    """
    f = flow.flow if isinstance(flow, FlowField) else np.asarray(flow, dtype=np.float64)
    dx = f[..., 0].astype(np.float64)
    dy = f[..., 1].astype(np.float64)
    ok = np.isfinite(dx) & np.isfinite(dy)
    if isinstance(flow, FlowField):
        ok &= flow.valid
    mag = np.where(ok, np.hypot(dx, dy), 0.0)
    if max_magnitude is None:
        max_magnitude = float(mag.max(initial=0.0))
    scale = max_magnitude if max_magnitude > 0 else 1.0
    hue = np.mod(np.arctan2(np.where(ok, dy, 0), np.where(ok, dx, 0)) / (2 * math.pi), 1.0)
    sat = np.clip(mag / scale, 0.0, 1.0)
    rgb = _hsv_to_rgb(hue, sat, np.ones_like(hue))
    out = np.floor(rgb * 255.0 + 0.5).astype(np.uint8)
    out[~ok] = 0
    return out
