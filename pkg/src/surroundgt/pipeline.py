"""Batch orchestration: LUTs first, then per-frame jobs over a process pool, then statistics.

Output tree (flat, one directory)::

    luts/{camera}.flut
    {frame}_{camera}_{modality}.{ext}     rgb, semantic, depth, instance, motion, flow, events
    {frame}_motions.txt
    {frame}_bev_semantic.png, {frame}_bev_hit.png, {frame}_bev_height.fras
    {frame}_meta.json                     written last; marks a finished frame
    stats/class_histogram.{json,csv}, stats/object_stats.{json,txt}
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image

from . import __version__
from .bev_ipm import BevGrid, bev_height, fuse_bev, ipm_project
from .calib_geometry import CameraCalibration, load_calibration, load_calibrations
from .classes import EGO_VEHICLE
from .dataset_io import (
    DEFAULT_FAR_PLANE,
    DEFAULT_THRESHOLDS,
    DatasetManifest,
    FrameEntry,
    Product,
    class_pixel_histogram,
    decode_depth_raster,
    frame_metadata,
    load_layout,
    object_statistics,
    read_boxes,
    read_metadata,
    read_poses,
    scan_dataset,
    write_outputs,
)
from .events import invert_lut, load_events, remap_events, render_events
from .fisheye_remap import (
    _LUT_HEADER,
    DEFAULT_FACE_SIZE,
    FACE_NAMES,
    CubemapFaceSet,
    LookupTable,
    build_lut_for,
    load_lut,
    remap,
    remap_depth,
    save_lut,
)
from .groundtruth import (
    DEFAULT_MOTION_THRESHOLD,
    FLOW_WHEEL,
    MAX_INSTANCE_ID,
    OCCLUSION_TOLERANCE,
    colorize_instances,
    flow_colorize,
    format_motions,
    instance_ids,
    motion_distances,
    motion_mask,
    optical_flow,
    scene_flow,
)
from .rasters import read_png

log = logging.getLogger(__name__)

STAGES = ("lut", "rgb", "depth", "instance", "motion", "flow", "events", "bev", "stats")
FRAME_STAGES = ("rgb", "depth", "instance", "motion", "flow", "events", "bev")
# input modalities each stage needs for every camera/face, or once per frame
STAGE_INPUTS = {
    "rgb": ("rgb", "semantic"),
    "depth": ("depth",),
    "instance": ("depth", "semantic", "boxes"),
    "motion": ("depth", "semantic", "boxes", "poses"),
    "flow": ("depth", "semantic", "depth_prev", "semantic_prev", "boxes", "poses"),
    "events": ("events",),
    "bev": ("depth", "semantic"),
    "stats": ("boxes", "poses"),
}
# pseudo object id carrying the ego motion for ego-vehicle pixels in flow
EGO_FLOW_ID = MAX_INSTANCE_ID + 1


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending setting."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass(frozen=True)
class PipelineConfig:
    input: Path | None = None
    output: Path | None = None
    calibration: Path | None = None  # file or directory; default <input>/calibration
    stages: tuple[str, ...] = STAGES
    threshold: float = DEFAULT_MOTION_THRESHOLD
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    bev_extent: float = 40.0
    bev_cells: int = 1024
    face_size: int | None = None
    seed: int = 0
    far_plane: float = DEFAULT_FAR_PLANE
    layout: Path | None = None
    summary: Path | None = None
    dry_run: bool = False
    resume: bool = False

    def validate(self) -> None:
        if self.input is None:
            raise ConfigError("input", "an input root is required")
        if not Path(self.input).is_dir():
            raise ConfigError("input", f"{self.input} is not a directory")
        if self.output is None:
            raise ConfigError("output", "an output root is required")
        unknown = [s for s in self.stages if s not in STAGES]
        if unknown:
            raise ConfigError("stages", f"unknown stages {unknown}; choose from {list(STAGES)}")
        if not self.stages:
            raise ConfigError("stages", "no stages selected")
        if not (self.threshold >= 0 and np.isfinite(self.threshold)):
            raise ConfigError("threshold", f"must be a non-negative number of metres, got {self.threshold}")
        if self.workers < 1:
            raise ConfigError("workers", f"must be at least 1, got {self.workers}")
        if not self.bev_extent > 0:
            raise ConfigError("bev_extent", f"must be positive, got {self.bev_extent}")
        if self.bev_cells < 1:
            raise ConfigError("bev_cells", f"must be positive, got {self.bev_cells}")
        if self.face_size is not None and self.face_size < 1:
            raise ConfigError("face_size", f"must be positive, got {self.face_size}")
        if not self.far_plane > 0:
            raise ConfigError("far_plane", f"must be positive, got {self.far_plane}")
        if self.layout is not None and not Path(self.layout).is_file():
            raise ConfigError("layout", f"{self.layout} does not exist")
        if self.calibration is not None and not Path(self.calibration).exists():
            raise ConfigError("calibration", f"{self.calibration} does not exist")

    def ordered_stages(self) -> tuple[str, ...]:
        return tuple(s for s in STAGES if s in self.stages)

    def output_settings(self) -> dict:
        """Settings that influence output bytes (worker count and paths excluded)."""
        return {
            "stages": list(self.ordered_stages()),
            "threshold": self.threshold,
            "bev_extent": self.bev_extent,
            "bev_cells": self.bev_cells,
            "seed": self.seed,
            "far_plane": self.far_plane,
        }


@dataclass
class RunSummary:
    stages: list[str]
    frames_total: int = 0
    processed: list[str] = field(default_factory=list)
    resumed: list[str] = field(default_factory=list)
    skipped: dict[str, list[str]] = field(default_factory=dict)
    failed: dict[str, str] = field(default_factory=dict)
    stage_seconds: dict[str, float] = field(default_factory=dict)
    wall_seconds: float = 0.0
    exit_code: int = 0
    dry_run: bool = False

    def add_time(self, stage: str, seconds: float) -> None:
        self.stage_seconds[stage] = self.stage_seconds.get(stage, 0.0) + seconds

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_seconds"] = {k: round(v, 6) for k, v in sorted(self.stage_seconds.items())}
        d["toolkit_version"] = __version__
        return d


# ---------------------------------------------------------------------------
# Setup
# ---------------------------------------------------------------------------


def _required_inputs(stages) -> tuple[str, ...]:
    req: list[str] = []
    for s in stages:
        for m in STAGE_INPUTS.get(s, ()):
            if m not in req:
                req.append(m)
    return tuple(req)


def _load_calibrations(config: PipelineConfig, manifest: DatasetManifest) -> dict[str, CameraCalibration]:
    if config.calibration is None:
        return dict(manifest.calibrations)
    p = Path(config.calibration)
    if p.is_dir():
        return load_calibrations(sorted(p.glob("*.json")))
    c = load_calibration(p)
    return {c.name: c}


def _detect_face_size(manifest: DatasetManifest) -> int | None:
    for frame in manifest.frames:
        for key in sorted(frame.files):
            parts = key.split("/")
            if len(parts) == 3 and parts[1] in ("rgb", "semantic", "depth"):
                with Image.open(frame.files[key]) as img:
                    return img.size[0]
    return None


def _check_poses(manifest: DatasetManifest, stages) -> None:
    need = [s for s in ("motion", "flow") if s in stages]
    if not need:
        return
    poses = [f.files.get("poses") for f in manifest.frames]
    if not manifest.frames or any(p is None for p in poses):
        raise ConfigError(
            "object_transforms",
            f"stage {need[0]!r} needs per-frame pose files with object_transforms; none found "
            f"under {manifest.root / manifest.layout.poses.format(frame='*')}",
        )
    for frame, p in zip(manifest.frames, poses):
        if "object_transforms" not in json.loads(Path(p).read_text()):
            raise ConfigError("object_transforms", f"pose file {p} has no object_transforms (needed by {need[0]!r})")


def _file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _frame_fingerprint(frame: FrameEntry, settings: dict, lut_prints: Mapping[str, str]) -> str:
    h = hashlib.sha256()
    h.update(json.dumps({"settings": settings, "luts": dict(sorted(lut_prints.items())), "version": __version__},
                        sort_keys=True).encode())
    for key in sorted(frame.files):
        h.update(f"{key}={_file_digest(frame.files[key])}\n".encode())
    return h.hexdigest()


def _lut_is_current(path: Path, calib: CameraCalibration, face_size: int) -> bool:
    if not path.exists():
        return False
    with open(path, "rb") as fh:
        head = fh.read(_LUT_HEADER.size)
    if len(head) != _LUT_HEADER.size:
        return False
    magic, version, w, h, n, fp = _LUT_HEADER.unpack(head)
    intr = calib.intrinsics
    return (magic, w, h, n, fp) == (b"FLUT", intr.width, intr.height, face_size, calib.fingerprint())


# ---------------------------------------------------------------------------
# Per-frame work (runs in worker processes)
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FrameContext:
    stages: tuple[str, ...]
    output: Path
    calibrations: Mapping[str, CameraCalibration]
    lut_paths: Mapping[str, Path]
    settings: dict
    grid: BevGrid
    threshold: float
    seed: int
    far_plane: float


@dataclass
class FrameResult:
    frame_id: str
    error: str | None
    seconds: dict[str, float]


_LUT_CACHE: dict[Path, LookupTable] = {}
_REVERSE_CACHE: dict[Path, object] = {}


def _lut(path: Path) -> LookupTable:
    if path not in _LUT_CACHE:
        _LUT_CACHE[path] = load_lut(path)
    return _LUT_CACHE[path]


def _reverse(path: Path):
    if path not in _REVERSE_CACHE:
        _REVERSE_CACHE[path] = invert_lut(_lut(path))
    return _REVERSE_CACHE[path]


class _Timer:
    def __init__(self, sink: dict, key: str):
        self.sink, self.key = sink, key

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.sink[self.key] = self.sink.get(self.key, 0.0) + time.perf_counter() - self.t0


def _faces(frame: FrameEntry, camera: str, modality: str) -> dict[str, np.ndarray]:
    return {f: read_png(frame.raster(camera, modality, f)) for f in FACE_NAMES}


def _fisheye_inputs(frame: FrameEntry, cam: str, lut: LookupTable, suffix: str, far: float):
    sem = remap(lut, CubemapFaceSet(_faces(frame, cam, "semantic" + suffix), "label"), mode="nearest")
    enc = _faces(frame, cam, "depth" + suffix)
    depth = remap_depth(lut, CubemapFaceSet({f: decode_depth_raster(a, far) for f, a in enc.items()}, "depth"))
    return sem, depth


def process_frame(ctx: FrameContext, frame: FrameEntry, fingerprint: str) -> FrameResult:
    seconds: dict[str, float] = {}
    try:
        products, extra = _frame_products(ctx, frame, seconds)
        meta = frame_metadata(
            frame.frame_id,
            weather=frame.weather,
            input_fingerprint=fingerprint,
            lut_fingerprints={c: ctx.calibrations[c].fingerprint().hex() for c in sorted(ctx.lut_paths)},
            motion_thresholds_m={"mask": ctx.threshold, "statistics": list(DEFAULT_THRESHOLDS)},
            occlusion_tolerance_m=OCCLUSION_TOLERANCE,
            flow_color_wheel=FLOW_WHEEL,
            bev_grid=ctx.grid.to_dict(),
            session_seed=ctx.seed,
            far_plane_m=ctx.far_plane,
            stages=list(ctx.stages),
            **extra,
        )
        with _Timer(seconds, "write"):
            write_outputs(frame.frame_id, products, ctx.output, meta)
        return FrameResult(frame.frame_id, None, seconds)
    except Exception as exc:  # one bad frame must not stop the batch
        log.error("frame %s failed: %s: %s", frame.frame_id, type(exc).__name__, exc)
        return FrameResult(frame.frame_id, f"{type(exc).__name__}: {exc}", seconds)


def _frame_products(ctx: FrameContext, frame: FrameEntry, seconds: dict) -> tuple[list[Product], dict]:
    st = set(ctx.stages)
    products: list[Product] = []
    extra: dict = {}
    poses = read_poses(frame.files["poses"], ctx.calibrations) if "poses" in frame.files else None
    boxes, boxes_prev = read_boxes(frame.files["boxes"]) if "boxes" in frame.files else ([], [])
    if poses is not None:
        extra["timestamp"] = poses.timestamp
    records = []
    if poses is not None and poses.object_transforms is not None:
        prev_t, curr_t = poses.object_transforms
        records = [r for r in motion_distances(prev_t, curr_t) if r.object_id not in poses.spawned]
    if "motion" in st:
        products.append(Product(None, "motions", "txt", format_motions(records)))

    projections, bev_depths, bev_cams = {}, {}, {}
    rejected = {}
    for cam in sorted(ctx.lut_paths):
        calib = ctx.calibrations[cam]
        intr = calib.intrinsics
        lut = _lut(ctx.lut_paths[cam])
        extra["cubemap_face_size"] = lut.face_size
        if poses is not None and cam in poses.camera_poses:
            pose_prev, pose_curr = poses.camera_poses[cam]
        else:
            # no poses: boxes are taken to be in the ego frame
            pose_prev = pose_curr = calib.extrinsic
        sem = depth = None
        if st & {"rgb", "depth", "instance", "motion", "flow", "bev"}:
            with _Timer(seconds, "remap"):
                sem, depth = _fisheye_inputs(frame, cam, lut, "", ctx.far_plane)
        if "rgb" in st:
            with _Timer(seconds, "rgb"):
                rgb = remap(lut, CubemapFaceSet(_faces(frame, cam, "rgb"), "image"), mode="bilinear")
            products += [Product(cam, "rgb", "png", rgb), Product(cam, "semantic", "png", sem)]
        if "depth" in st:
            products.append(Product(cam, "depth", "fras", depth.astype(np.float32)))
        if st & {"instance", "motion"}:
            with _Timer(seconds, "instance"):
                ids = instance_ids(depth, sem, boxes, intr, pose_curr)
            if "instance" in st:
                products += [
                    Product(cam, "instance", "png", ids),
                    Product(cam, "instance_color", "png", colorize_instances(ids, ctx.seed)),
                ]
            if "motion" in st:
                with _Timer(seconds, "motion"):
                    mask = motion_mask(ids, records, ctx.threshold) * np.uint8(255)
                products.append(Product(cam, "motion", "png", mask))
        if "flow" in st:
            with _Timer(seconds, "flow"):
                products += _flow_products(frame, cam, lut, intr, poses, boxes_prev, pose_prev, pose_curr, depth, ctx)
        if "events" in st:
            with _Timer(seconds, "events"):
                streams = {f: load_events(frame.files[f"{cam}/events/{f}"], lut.face_size, lut.face_size)
                           for f in FACE_NAMES}
                out, n_rej = remap_events(streams, _reverse(ctx.lut_paths[cam]))
                span = out.time_span or (0, 0)
                products += [Product(cam, "events", "npy", out), Product(cam, "events", "png", render_events(out, span))]
                rejected[cam] = n_rej
        if "bev" in st:
            with _Timer(seconds, "bev"):
                projections[cam] = ipm_project(sem, intr, calib.extrinsic, ctx.grid)
            bev_depths[cam] = depth
            bev_cams[cam] = (intr, calib.extrinsic)
    if rejected:
        extra["events_rejected"] = rejected
    if "bev" in st and projections:
        with _Timer(seconds, "bev"):
            labels, hit = fuse_bev(projections)
            height = bev_height(bev_depths, bev_cams, ctx.grid, depth_kind="ray")
        products += [
            Product(None, "bev_semantic", "png", labels),
            Product(None, "bev_hit", "png", hit.astype(np.uint8) * np.uint8(255)),
            Product(None, "bev_height", "fras", height),
        ]
    return products, extra


def _flow_products(frame, cam, lut, intr, poses, boxes_prev, pose_prev, pose_curr, depth_curr, ctx) -> list[Product]:
    sem_prev, depth_prev = _fisheye_inputs(frame, cam, lut, "_prev", ctx.far_plane)
    ids_prev = instance_ids(depth_prev, sem_prev, boxes_prev, intr, pose_prev).astype(np.int64)
    prev_t, curr_t = (dict(d) for d in poses.object_transforms)
    if poses.ego_pose is not None:
        ids_prev[(ids_prev == 0) & (sem_prev == EGO_VEHICLE)] = EGO_FLOW_ID
        prev_t[EGO_FLOW_ID], curr_t[EGO_FLOW_ID] = poses.ego_pose
    sf = scene_flow(depth_prev, ids_prev, intr, pose_prev, prev_t, curr_t, poses.spawned)
    field_ = optical_flow(sf, intr, pose_prev, pose_curr, depth_curr=depth_curr)
    return [
        Product(cam, "flow", "fras", field_.flow),
        Product(cam, "flow_color", "png", flow_colorize(field_.flow)),
        Product(cam, "flow_occlusion", "png", field_.occluded.astype(np.uint8) * np.uint8(255)),
    ]


def _run_frame_job(args):
    ctx, frame, fingerprint = args
    return process_frame(ctx, frame, fingerprint)


# ---------------------------------------------------------------------------
# Coordinator
# ---------------------------------------------------------------------------


def summary_path(config: PipelineConfig) -> Path:
    if config.summary is not None:
        return Path(config.summary)
    out = Path(config.output)
    # beside, not inside, the output tree: wall times would break byte-identical reruns
    return out.parent / f"{out.name}.summary.json"


def prepare(config: PipelineConfig) -> tuple[DatasetManifest, dict[str, CameraCalibration], int]:
    """Validate ``config`` against the input tree; raises :class:`ConfigError`."""
    config.validate()
    try:
        layout = load_layout(config.layout)
    except (TypeError, ValueError, OSError) as exc:
        raise ConfigError("layout", str(exc)) from exc
    stages = config.ordered_stages()
    manifest = scan_dataset(config.input, layout, _required_inputs(stages), config.seed)
    calibs = _load_calibrations(config, manifest)
    needs_calib = [s for s in stages if s in ("lut",) + FRAME_STAGES]
    if needs_calib and not calibs:
        raise ConfigError("calibration", f"stage {needs_calib[0]!r} needs camera calibrations; none found")
    if "bev" in stages:
        bad = [c.name for c in calibs.values() if c.extrinsic.convention != "sensor_to_ego"]
        if bad:
            raise ConfigError("calibration", f"bev needs sensor_to_ego extrinsics; cameras {bad} differ")
    _check_poses(manifest, stages)
    face_size = config.face_size or _detect_face_size(manifest) or DEFAULT_FACE_SIZE
    if "lut" not in stages and any(s in FRAME_STAGES for s in stages):
        out = Path(config.output)
        stale = [c for c, cal in calibs.items() if not _lut_is_current(out / "luts" / f"{c}.flut", cal, face_size)]
        if stale:
            raise ConfigError("stages", f"no current LUT for cameras {stale}; add the 'lut' stage")
    return manifest, calibs, face_size


def run(config: PipelineConfig) -> tuple[int, RunSummary]:
    """Execute the selected stages; returns the exit status and a summary.

    Exit status: 0 when no frame failed, 1 on partial failure, 2 when the
    configuration does not validate (nothing is written in that case).
    """
    t_start = time.perf_counter()
    summary = RunSummary(stages=list(config.ordered_stages()), dry_run=config.dry_run)
    try:
        manifest, calibs, face_size = prepare(config)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        summary.exit_code = 2
        summary.failed["config"] = str(exc)
        return 2, summary
    stages = config.ordered_stages()
    summary.frames_total = len(manifest.frames)
    summary.skipped = {k: list(v) for k, v in manifest.skipped.items()}
    if manifest.skipped:
        log.warning("skipping %d incomplete frames: %s", len(manifest.skipped), sorted(manifest.skipped))
    if config.dry_run:
        log.info("dry run: %d frames, cameras %s, stages %s", len(manifest.frames), sorted(calibs), list(stages))
        summary.wall_seconds = time.perf_counter() - t_start
        return 0, summary

    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    lut_paths = {c: out / "luts" / f"{c}.flut" for c in sorted(calibs)}
    if "lut" in stages:
        t0 = time.perf_counter()
        (out / "luts").mkdir(exist_ok=True)
        for cam, path in lut_paths.items():
            if _lut_is_current(path, calibs[cam], face_size):
                log.info("LUT %s is current", cam)
                continue
            log.info("building LUT %s (%dx%d, faces %d px)", cam, calibs[cam].intrinsics.width,
                     calibs[cam].intrinsics.height, face_size)
            save_lut(build_lut_for(calibs[cam], face_size), path)
        summary.add_time("lut", time.perf_counter() - t0)

    frame_stages = tuple(s for s in stages if s in FRAME_STAGES)
    if frame_stages:
        settings = config.output_settings()
        lut_prints = {c: calibs[c].fingerprint().hex() for c in lut_paths}
        ctx = FrameContext(
            frame_stages, out, calibs, lut_paths, settings,
            BevGrid(config.bev_extent, config.bev_cells), config.threshold, config.seed, config.far_plane,
        )
        jobs = []
        for frame in manifest.frames:
            fp = _frame_fingerprint(frame, settings, lut_prints)
            if config.resume and _frame_done(out, frame.frame_id, fp):
                summary.resumed.append(frame.frame_id)
                continue
            jobs.append((ctx, frame, fp))
        if summary.resumed:
            log.info("resume: %d frames already complete", len(summary.resumed))
        n_workers = min(config.workers, len(jobs))
        if n_workers > 1:
            with ProcessPoolExecutor(max_workers=n_workers) as pool:
                results = list(pool.map(_run_frame_job, jobs))
        else:
            results = [_run_frame_job(j) for j in jobs]
        for res in results:
            for k, v in res.seconds.items():
                summary.add_time(k, v)
            if res.error is None:
                summary.processed.append(res.frame_id)
                log.info("frame %s done", res.frame_id)
            else:
                summary.failed[res.frame_id] = res.error

    if "stats" in stages:
        t0 = time.perf_counter()
        try:
            _run_stats(manifest, out, config.resume)
        except Exception as exc:
            log.error("statistics failed: %s", exc)
            summary.failed["stats"] = f"{type(exc).__name__}: {exc}"
        summary.add_time("stats", time.perf_counter() - t0)

    summary.exit_code = 1 if summary.failed else 0
    summary.wall_seconds = time.perf_counter() - t_start
    return summary.exit_code, summary


def _frame_done(out: Path, frame_id: str, fingerprint: str) -> bool:
    meta_path = out / f"{frame_id}_meta.json"
    if not meta_path.exists():
        return False
    try:
        meta = read_metadata(meta_path)
    except ValueError:
        return False
    return meta.get("input_fingerprint") == fingerprint and all((out / f).exists() for f in meta.get("files", []))


def _run_stats(manifest: DatasetManifest, out: Path, resume: bool) -> None:
    stats_dir = out / "stats"
    # fisheye and BEV semantic outputs when present, otherwise the input cubemap faces
    rasters = sorted(out.glob("*_semantic.png"))
    h = hashlib.sha256()
    for f in manifest.frames:
        h.update(f.frame_id.encode())
        for key in ("boxes", "poses"):
            if key in f.files:
                h.update(_file_digest(f.files[key]).encode())
    for p in rasters:
        h.update(p.name.encode() + _file_digest(p).encode())
    fingerprint = h.hexdigest()
    hist_json = stats_dir / "class_histogram.json"
    if resume and hist_json.exists() and (stats_dir / "object_stats.txt").exists():
        if json.loads(hist_json.read_text()).get("input_fingerprint") == fingerprint:
            log.info("statistics are current")
            return
    stats_dir.mkdir(parents=True, exist_ok=True)
    hist = class_pixel_histogram(rasters if rasters else manifest)
    doc = hist.to_dict()
    doc["sources"] = [p.name for p in rasters] if rasters else "input cubemap faces"
    doc["input_fingerprint"] = fingerprint
    (stats_dir / "class_histogram.csv").write_text(hist.to_csv())
    stats = object_statistics(manifest)
    (stats_dir / "object_stats.json").write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n")
    (stats_dir / "object_stats.txt").write_text(stats.table())
    # written last, so an interrupted run is never mistaken for a complete one
    hist_json.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

