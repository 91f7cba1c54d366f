"""Analytic scenes rendered by ray casting, plus an on-disk fixture dataset.

Scenes are a ground plane ``z = 0`` (world frame, +Z up) carrying oriented
boxes. They are used as independent oracles for the remapping and ground
truth paths and to produce small simulator-style export directories.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .calib_geometry import (
    CameraCalibration,
    FisheyeIntrinsics,
    OrientedBox3D,
    PinholeIntrinsics,
    RigidTransform,
    pixel_grid,
    save_calibration,
    unproject_fisheye_pixels,
)
from .classes import (
    EGO_VEHICLE,
    FOUR_WHEELER,
    PALETTE,
    PEDESTRIAN,
    ROAD,
    ROAD_LINE,
    SIDEWALK,
    SKY,
    TWO_WHEELER,
    WEATHER_PRESETS,
)
from .events import EventStream, save_events
from .fisheye_remap import FACE_NAMES, FACE_ROTATIONS, face_directions, face_ray_factor
from .rasters import write_png

FAR_PLANE = 1000.0


@dataclass(frozen=True, eq=False)
class SceneObject:
    box: OrientedBox3D
    label: int


@dataclass(eq=False)
class Scene:
    objects: list[SceneObject] = field(default_factory=list)
    ground: bool = True
    ground_label: int = ROAD
    paint: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    far: float = FAR_PLANE

    @property
    def boxes(self) -> list[OrientedBox3D]:
        return [o.box for o in self.objects]


@dataclass(frozen=True, eq=False)
class RayHits:
    distance: np.ndarray  # Euclidean, FAR for sky
    label: np.ndarray
    object_id: np.ndarray
    points: np.ndarray


def look_rotation(forward, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world rotation for a camera looking along ``forward``."""
    z = np.asarray(forward, dtype=np.float64)
    z = z / np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    n = np.linalg.norm(x)
    if n < 1e-12:
        raise ValueError("forward and up are parallel")
    x /= n
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def yaw_pitch_rotation(yaw: float, pitch: float) -> np.ndarray:
    """Camera looking at heading ``yaw`` (rad, CCW from +X), tilted down by ``pitch``."""
    fwd = np.array([math.cos(yaw) * math.cos(pitch), math.sin(yaw) * math.cos(pitch), -math.sin(pitch)])
    return look_rotation(fwd)


def z_rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def cast_rays(scene: Scene, origin, dirs: np.ndarray) -> RayHits:
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    shape = d.shape[:-1]
    d = d.reshape(-1, 3)
    best = np.full(len(d), np.inf)
    label = np.full(len(d), SKY, dtype=np.uint8)
    oid = np.zeros(len(d), dtype=np.uint16)
    with np.errstate(divide="ignore", invalid="ignore"):
        if scene.ground and o[2] > 0:
            t = -o[2] / d[:, 2]
            hit = (d[:, 2] < 0) & (t > 0)
            best[hit] = t[hit]
            label[hit] = scene.ground_label
        for obj in scene.objects:
            b = obj.box
            ol = b.rotation.T @ (o - b.center)
            dl = d @ b.rotation
            t1 = (-b.half_extents - ol) / dl
            t2 = (b.half_extents - ol) / dl
            tmin = np.nanmax(np.minimum(t1, t2), axis=1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=1)
            hit = (tmax >= tmin) & (tmin > 0) & (tmin < best)
            best[hit] = tmin[hit]
            label[hit] = obj.label
            oid[hit] = b.object_id
        pts = o + d * best[:, None]
    if scene.paint is not None:
        ground = (label == scene.ground_label) & (oid == 0) & np.isfinite(best)
        if ground.any():
            label[ground] = scene.paint(pts[ground, 0], pts[ground, 1])
    sky = ~np.isfinite(best)
    best[sky] = scene.far
    pts[sky] = np.nan
    return RayHits(best.reshape(shape), label.reshape(shape), oid.reshape(shape), pts.reshape(shape + (3,)))


def shade(hits: RayHits) -> np.ndarray:
    """Simple RGB appearance: class colour modulated by a world-space texture."""
    base = PALETTE[np.minimum(hits.label, len(PALETTE) - 1)].astype(np.float64)
    p = np.nan_to_num(hits.points)
    tex = 0.8 + 0.2 * np.sin(2.0 * p[..., 0]) * np.cos(2.0 * p[..., 1] + p[..., 2])
    return np.clip(base * tex[..., None], 0, 255).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class Render:
    depth: np.ndarray  # plane depth for pinhole/faces, ray distance for fisheye
    semantic: np.ndarray
    object_id: np.ndarray
    rgb: np.ndarray


def render_pinhole(scene: Scene, intr: PinholeIntrinsics, cam_to_world: RigidTransform) -> Render:
    grid = pixel_grid(intr.width, intr.height)
    rays = np.concatenate([grid, np.ones(grid.shape[:2] + (1,))], axis=-1) @ intr.K_inv.T
    norm = np.linalg.norm(rays, axis=-1)
    dirs = rays / norm[..., None]
    hits = cast_rays(scene, cam_to_world.translation, dirs @ cam_to_world.rotation.T)
    plane = np.where(hits.label == SKY, scene.far, hits.distance / norm)
    return Render(plane, hits.label, hits.object_id, shade(hits))


def render_cubemap(scene: Scene, cam_to_world: RigidTransform, face_size: int) -> dict[str, Render]:
    out = {}
    factor = face_ray_factor(face_size)
    for name in FACE_NAMES:
        dirs = face_directions(face_size, name)
        hits = cast_rays(scene, cam_to_world.translation, dirs @ cam_to_world.rotation.T)
        plane = np.where(hits.label == SKY, scene.far, hits.distance / factor)
        out[name] = Render(plane, hits.label, hits.object_id, shade(hits))
    return out


def render_fisheye(scene: Scene, intr: FisheyeIntrinsics, cam_to_world: RigidTransform) -> Render:
    dirs, valid = unproject_fisheye_pixels(intr, pixel_grid(intr.width, intr.height))
    dirs = np.where(valid[..., None], dirs, np.array([0.0, 0.0, 1.0]))
    hits = cast_rays(scene, cam_to_world.translation, dirs @ cam_to_world.rotation.T)
    depth = np.where(valid, hits.distance, np.nan)
    sem = np.where(valid, hits.label, 255).astype(np.uint8)
    ids = np.where(valid, hits.object_id, 0).astype(np.uint16)
    rgb = shade(hits)
    rgb[~valid] = 0
    return Render(depth, sem, ids, rgb)


def face_pose(cam_to_world: RigidTransform, face: str) -> RigidTransform:
    """Pose of a 90° cubemap face camera sharing the rig camera's centre."""
    return RigidTransform(cam_to_world.rotation @ FACE_ROTATIONS[face], cam_to_world.translation, cam_to_world.convention)


# ---------------------------------------------------------------------------
# Depth encoding used by the exports
# ---------------------------------------------------------------------------


def encode_depth_raster(depth: np.ndarray, far_plane: float = FAR_PLANE) -> np.ndarray:
    """Inverse of :func:`surroundgt.dataset_io.decode_depth_raster` (rounded to the 24-bit code)."""
    code = np.clip(np.floor(np.asarray(depth, dtype=np.float64) / far_plane * (256**3 - 1) + 0.5), 0, 256**3 - 1)
    code = code.astype(np.int64)
    return np.stack([code % 256, (code // 256) % 256, code // 65536], axis=-1).astype(np.uint8)


# ---------------------------------------------------------------------------
# Fixture rig and dataset
# ---------------------------------------------------------------------------

DEMO_COEFFS = (340.0, -32.0, 48.0, -7.2)  # r(95°) ≈ 640 px on a 1280x966 sensor


def demo_intrinsics(width: int = 1280, height: int = 966) -> FisheyeIntrinsics:
    s = width / 1280.0
    a = tuple(c * s for c in DEMO_COEFFS)
    return FisheyeIntrinsics(*a, cx=width / 2.0, cy=height / 2.0, width=width, height=height)


# name -> (position in ego frame, yaw, downward pitch)
RIG_LAYOUT = {
    "front": ((3.75, 0.0, 0.65), 0.0, math.radians(15)),
    "rear": ((-1.0, 0.0, 0.95), math.pi, math.radians(25)),
    "left": ((2.0, 1.0, 1.0), math.pi / 2, math.radians(40)),
    "right": ((2.0, -1.0, 1.0), -math.pi / 2, math.radians(40)),
}


def demo_rig(width: int = 1280, height: int = 966) -> dict[str, CameraCalibration]:
    intr = demo_intrinsics(width, height)
    rig = {}
    for name, (pos, yaw, pitch) in RIG_LAYOUT.items():
        ext = RigidTransform(yaw_pitch_rotation(yaw, pitch), pos, "sensor_to_ego")
        rig[name] = CameraCalibration(name, intr, ext)
    return rig


def lane_paint(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Road with dashed centre lines and sidewalks beyond |y| > 6 m."""
    lab = np.full(np.shape(x), ROAD, dtype=np.uint8)
    dashed = (np.abs(np.mod(y + 1.75, 3.5) - 1.75) < 0.08) & (np.mod(x, 6.0) < 3.0)
    lab[dashed] = ROAD_LINE
    lab[np.abs(y) > 6.0] = SIDEWALK
    return lab


_OBJECT_KINDS = (
    (FOUR_WHEELER, (2.2, 0.95, 0.75)),
    (PEDESTRIAN, (0.3, 0.3, 0.9)),
    (TWO_WHEELER, (1.0, 0.35, 0.7)),
)
# metres travelled between consecutive frames; includes the 0.5 m boundary
_DISPLACEMENTS = (0.0, 0.0, 0.2, 0.5, 0.6, 0.8, 1.3)


@dataclass(frozen=True, eq=False)
class FixtureFrame:
    frame_id: str
    ego_prev: RigidTransform
    ego_curr: RigidTransform
    scene_prev: Scene
    scene_curr: Scene
    transforms_prev: dict[int, RigidTransform]
    transforms_curr: dict[int, RigidTransform]
    weather: str
    timestamp: float


def make_fixture_frames(n_frames: int = 10, n_objects: int = 6, seed: int = 0, fps: float = 10.0) -> list[FixtureFrame]:
    rng = np.random.default_rng(seed)
    frames = []
    for k in range(n_frames):
        heading = float(rng.uniform(-math.pi, math.pi))
        ego_pos = np.array([rng.uniform(-50, 50), rng.uniform(-50, 50), 0.0])
        ego_step = float(rng.choice([0.0, 0.8]))
        R_ego = z_rotation(heading)
        ego_curr = RigidTransform(R_ego, ego_pos, "ego_to_world")
        ego_prev = RigidTransform(R_ego, ego_pos - R_ego @ np.array([ego_step, 0.0, 0.0]), "ego_to_world")
        # ego body so the rig sees itself, as in real exports
        ego_box = lambda pose: SceneObject(  # noqa: E731
            OrientedBox3D(60000, EGO_VEHICLE, pose.apply([1.4, 0.0, 0.7]), (2.3, 0.95, 0.7), pose.rotation), EGO_VEHICLE
        )
        objs_prev, objs_curr = [ego_box(ego_prev)], [ego_box(ego_curr)]
        tp, tc = {}, {}
        for j in range(n_objects):
            cls, half = _OBJECT_KINDS[j % len(_OBJECT_KINDS)]
            oid = 100 * (k + 1) + j + 1
            ang = float(rng.uniform(-math.pi, math.pi))
            dist = float(rng.uniform(5.5, 10.0))
            local = np.array([1.4 + dist * math.cos(ang), dist * math.sin(ang), half[2]])
            yaw = float(rng.uniform(-math.pi, math.pi))
            R = z_rotation(heading + yaw)
            c_curr = ego_curr.apply(local)
            step = _DISPLACEMENTS[(j + k) % len(_DISPLACEMENTS)]
            c_prev = c_curr - R @ np.array([step, 0.0, 0.0])
            for store, objs, c in ((tp, objs_prev, c_prev), (tc, objs_curr, c_curr)):
                store[oid] = RigidTransform(R, c, "object_to_world")
                objs.append(SceneObject(OrientedBox3D(oid, cls, c, half, R), cls))
        curb_c = ego_curr.apply([1.0, -7.0, 0.06])
        curb = SceneObject(OrientedBox3D(59000, SIDEWALK, curb_c, (10.0, 0.5, 0.06), R_ego), SIDEWALK)
        frames.append(
            FixtureFrame(
                frame_id=f"{k:05d}",
                ego_prev=ego_prev,
                ego_curr=ego_curr,
                scene_prev=Scene(objs_prev + [curb], paint=_paint_in_frame(ego_curr)),
                scene_curr=Scene(objs_curr + [curb], paint=_paint_in_frame(ego_curr)),
                transforms_prev=tp,
                transforms_curr=tc,
                weather=WEATHER_PRESETS[k % len(WEATHER_PRESETS)],
                timestamp=round(k * 3.0 + 1.0 / fps, 6),
            )
        )
    return frames


def _paint_in_frame(ego: RigidTransform):
    inv = ego.inverse()

    def paint(x, y):
        local = inv.apply(np.stack([x, y, np.zeros_like(x)], axis=-1))
        return lane_paint(local[..., 0], local[..., 1])

    return paint


def _events_between(prev_rgb: np.ndarray, curr_rgb: np.ndarray, t_prev_us: int, t_curr_us: int, threshold: float = 12.0):
    g0 = prev_rgb.astype(np.float64).mean(axis=-1)
    g1 = curr_rgb.astype(np.float64).mean(axis=-1)
    diff = g1 - g0
    ys, xs = np.nonzero(np.abs(diff) > threshold)
    # bigger changes fire earlier
    frac = 1.0 - np.clip(np.abs(diff[ys, xs]) / 255.0, 0, 1)
    t = (t_prev_us + frac * (t_curr_us - t_prev_us)).astype(np.int64)
    order = np.lexsort((xs, ys, t))
    pol = np.where(diff[ys, xs] > 0, 1, -1)
    n = prev_rgb.shape[1]
    return EventStream.from_arrays(xs[order], ys[order], t[order], pol[order], n, prev_rgb.shape[0])


def write_fixture_dataset(
    root: str | Path,
    n_frames: int = 10,
    face_size: int = 48,
    fisheye_size: tuple[int, int] = (128, 96),
    n_objects: int = 6,
    seed: int = 0,
    with_events: bool = True,
    with_poses: bool = True,
) -> list[FixtureFrame]:
    """Write a small simulator-style export under ``root`` (default layout)."""
    root = Path(root)
    rig = demo_rig(*fisheye_size)
    (root / "calibration").mkdir(parents=True, exist_ok=True)
    for name, calib in rig.items():
        save_calibration(calib, root / "calibration" / f"{name}.json")
    frames = make_fixture_frames(n_frames, n_objects, seed)
    fps = 10.0
    for fr in frames:
        t_curr_us = int(round(fr.timestamp * 1e6))
        t_prev_us = t_curr_us - int(round(1e6 / fps))
        cam_poses = {}
        for cam, calib in rig.items():
            pose_prev = fr.ego_prev @ calib.extrinsic
            pose_curr = fr.ego_curr @ calib.extrinsic
            cam_poses[cam] = {"prev": pose_prev.as_matrix().tolist(), "curr": pose_curr.as_matrix().tolist()}
            renders = {
                "": render_cubemap(fr.scene_curr, pose_curr, face_size),
                "_prev": render_cubemap(fr.scene_prev, pose_prev, face_size),
            }
            for suffix, faces in renders.items():
                for face, r in faces.items():
                    for modality, data in (
                        ("rgb", r.rgb),
                        ("depth", encode_depth_raster(r.depth)),
                        ("semantic", r.semantic),
                    ):
                        d = root / cam / f"{modality}{suffix}" / face
                        d.mkdir(parents=True, exist_ok=True)
                        write_png(d / f"{fr.frame_id}.png", data)
            if with_events:
                for face in FACE_NAMES:
                    ev = _events_between(renders["_prev"][face].rgb, renders[""][face].rgb, t_prev_us, t_curr_us)
                    d = root / cam / "events" / face
                    d.mkdir(parents=True, exist_ok=True)
                    save_events(d / f"{fr.frame_id}.npy", ev)
        boxes = {
            "boxes": [o.box.to_dict() for o in fr.scene_curr.objects if o.box.class_id != SIDEWALK],
            "boxes_prev": [o.box.to_dict() for o in fr.scene_prev.objects if o.box.class_id != SIDEWALK],
        }
        (root / "boxes").mkdir(exist_ok=True)
        (root / "boxes" / f"{fr.frame_id}.json").write_text(json.dumps(boxes, indent=1) + "\n")
        if with_poses:
            poses = {
                "timestamp": fr.timestamp,
                "fps": fps,
                "weather": fr.weather,
                "ego_pose": {"prev": fr.ego_prev.as_matrix().tolist(), "curr": fr.ego_curr.as_matrix().tolist()},
                "camera_poses": cam_poses,
                "object_transforms": {
                    str(oid): {"prev": fr.transforms_prev[oid].as_matrix().tolist(), "curr": fr.transforms_curr[oid].as_matrix().tolist()}
                    for oid in sorted(fr.transforms_curr)
                },
                "spawned": [],
            }
            (root / "poses").mkdir(exist_ok=True)
            (root / "poses" / f"{fr.frame_id}.json").write_text(json.dumps(poses, indent=1) + "\n")
    return frames


def sphere_color(dirs: np.ndarray) -> np.ndarray:
    """Smooth colour of a direction on the unit sphere, as float 0..255."""
    d = np.asarray(dirs, dtype=np.float64)
    return 127.5 * (1.0 + d)


def constant_radius_depth_faces(radius: float, face_size: int) -> dict[str, np.ndarray]:
    """Plane depths of a sphere of ``radius`` centred on the camera."""
    return {n: radius / face_ray_factor(face_size) for n in FACE_NAMES}


def face_value_faces(face_size: int, fn: Callable[[np.ndarray], np.ndarray]) -> dict[str, np.ndarray]:
    return {n: fn(face_directions(face_size, n)) for n in FACE_NAMES}


def scene_boxes(scene: Scene) -> Sequence[OrientedBox3D]:
    return [o.box for o in scene.objects]
