"""Export-directory ingestion, depth decoding, output writing and dataset statistics.

Default input layout (every path template is configurable)::

    calibration/{camera}.json
    {camera}/{modality}/{face}/{frame}.png     rgb, depth, semantic and their *_prev twins
    {camera}/events/{face}/{frame}.npy
    boxes/{frame}.json                         {"boxes": [...], "boxes_prev": [...]}
    poses/{frame}.json                         camera/ego/object poses, weather, timestamp
"""

from __future__ import annotations

import csv
import io
import json
import logging
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from .calib_geometry import CameraCalibration, OrientedBox3D, RigidTransform, load_calibration
from .classes import (
    CLASS_NAMES,
    FOUR_WHEELER,
    INVALID_LABEL,
    NUM_CLASSES,
    PEDESTRIAN,
    TWO_WHEELER,
    UNLABELED,
    WEATHER_PRESETS,
)
from .events import save_events
from .fisheye_remap import FACE_NAMES
from .groundtruth import MotionRecord, motion_distances
from .rasters import read_png, write_fras, write_png

log = logging.getLogger(__name__)

DEFAULT_FAR_PLANE = 1000.0
DEFAULT_THRESHOLDS = (0.0, 0.25, 0.5, 0.75, 1.0)
STAT_CLASSES = {"Pedestrian": PEDESTRIAN, "Four-wheeler": FOUR_WHEELER, "Two-wheeler": TWO_WHEELER}

RASTER_MODALITIES = ("rgb", "depth", "semantic", "rgb_prev", "depth_prev", "semantic_prev")
FRAME_MODALITIES = ("boxes", "poses")


class ManifestError(ValueError):
    pass


class DepthFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Layout and manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Layout:
    cameras: tuple[str, ...] = ("front", "rear", "left", "right")
    faces: tuple[str, ...] = FACE_NAMES
    calibration: str = "calibration/{camera}.json"
    raster: str = "{camera}/{modality}/{face}/{frame}.png"
    events: str = "{camera}/events/{face}/{frame}.npy"
    boxes: str = "boxes/{frame}.json"
    poses: str = "poses/{frame}.json"
    modality_names: Mapping[str, str] = field(default_factory=dict)

    def dir_name(self, modality: str) -> str:
        return self.modality_names.get(modality, modality)

    def path(self, kind: str, frame: str = "*", camera: str = "*", face: str = "*", modality: str = "") -> str:
        template = {"raster": self.raster, "events": self.events, "boxes": self.boxes, "poses": self.poses}[kind]
        return template.format(frame=frame, camera=camera, face=face, modality=self.dir_name(modality))


def load_layout(path: str | Path | None) -> Layout:
    if path is None:
        return Layout()
    import yaml

    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    kw = dict(doc)
    for key in ("cameras", "faces"):
        if key in kw:
            kw[key] = tuple(kw[key])
    return Layout(**kw)


def normalize_weather(tag: str) -> str:
    key = re.sub(r"[\s_-]", "", str(tag)).lower()
    for preset in WEATHER_PRESETS:
        if preset.lower() == key:
            return preset
    raise ManifestError(f"unknown weather tag {tag!r}; expected one of {WEATHER_PRESETS}")


@dataclass(frozen=True, eq=False)
class FrameEntry:
    frame_id: str
    weather: str | None
    files: Mapping[str, Path]

    def raster(self, camera: str, modality: str, face: str) -> Path:
        return self.files[f"{camera}/{modality}/{face}"]

    def has(self, key: str) -> bool:
        return key in self.files


@dataclass(frozen=True, eq=False)
class DatasetManifest:
    root: Path
    frames: tuple[FrameEntry, ...]
    calibrations: Mapping[str, CameraCalibration]
    layout: Layout = field(default_factory=Layout)
    skipped: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    session_seed: int = 0

    @property
    def frame_ids(self) -> list[str]:
        return [f.frame_id for f in self.frames]

    def describe(self) -> dict:
        """Plain-data view, used for idempotence checks and dry-run reports."""
        return {
            "root": str(self.root),
            "frames": [
                {"id": f.frame_id, "weather": f.weather, "files": {k: str(v) for k, v in sorted(f.files.items())}}
                for f in self.frames
            ],
            "cameras": sorted(self.calibrations),
            "skipped": {k: list(v) for k, v in sorted(self.skipped.items())},
            "session_seed": self.session_seed,
        }


def _frame_ids_for(root: Path, pattern: str) -> dict[str, list[str]]:
    """Frame ids found for one glob pattern, keyed by normalised id."""
    regex = re.compile(
        "^" + re.escape(pattern).replace(re.escape("{frame}"), r"(?P<frame>\d+)").replace(r"\*", "[^/]*") + "$"
    )
    found: dict[str, list[str]] = {}
    for p in root.glob(pattern.replace("{frame}", "*")):
        m = regex.match(p.relative_to(root).as_posix())
        if m:
            raw = m.group("frame")
            found.setdefault(str(int(raw)), []).append(raw)
    return found


def scan_dataset(
    root: str | Path,
    layout: Layout | None = None,
    required: Sequence[str] = ("rgb", "depth", "semantic", "boxes", "poses"),
    session_seed: int = 0,
) -> DatasetManifest:
    """Enumerate complete frames under ``root``.

    ``required`` names the modalities a frame must have for every camera and
    face (raster modalities, ``events``) or once (``boxes``, ``poses``).
    Incomplete frames land in ``manifest.skipped`` with the missing keys.
    """
    root = Path(root)
    layout = layout or Layout()
    if not root.is_dir():
        raise OSError(f"dataset root {root} is not a readable directory")

    calibrations = {}
    for cam in layout.cameras:
        p = root / layout.calibration.format(camera=cam)
        if p.exists():
            calibrations[cam] = load_calibration(p)

    # candidate ids from every file template, checking zero-padding clashes
    raw_ids: dict[str, str] = {}
    patterns = [layout.boxes.replace("{frame}", "{frame}"), layout.poses]
    for cam in layout.cameras:
        for face in layout.faces:
            for mod in RASTER_MODALITIES:
                patterns.append(layout.path("raster", "{frame}", cam, face, mod))
            patterns.append(layout.path("events", "{frame}", cam, face))
    for pat in patterns:
        for norm, raws in _frame_ids_for(root, pat).items():
            spellings = set(raws) | ({raw_ids[norm]} if norm in raw_ids else set())
            if len(spellings) > 1:
                raise ManifestError(f"duplicate frame id {norm}: spelled {sorted(spellings)}")
            raw_ids[norm] = raws[0]

    frames = []
    skipped: dict[str, tuple[str, ...]] = {}
    for norm in sorted(raw_ids, key=int):
        fid = raw_ids[norm]
        files: dict[str, Path] = {}
        for cam in layout.cameras:
            for face in layout.faces:
                for mod in RASTER_MODALITIES:
                    p = root / layout.path("raster", fid, cam, face, mod)
                    if p.exists():
                        files[f"{cam}/{mod}/{face}"] = p
                p = root / layout.path("events", fid, cam, face)
                if p.exists():
                    files[f"{cam}/events/{face}"] = p
        for kind in FRAME_MODALITIES:
            p = root / layout.path(kind, fid)
            if p.exists():
                files[kind] = p
        missing = []
        for mod in required:
            if mod in FRAME_MODALITIES:
                if mod not in files:
                    missing.append(mod)
            else:
                missing += [
                    f"{cam}/{mod}/{face}"
                    for cam in layout.cameras
                    for face in layout.faces
                    if f"{cam}/{mod}/{face}" not in files
                ]
        weather = None
        if "poses" in files:
            try:
                tag = json.loads(files["poses"].read_text()).get("weather")
                weather = normalize_weather(tag) if tag is not None else None
            except ManifestError:
                missing.append("weather")
        if missing:
            skipped[fid] = tuple(missing)
            continue
        frames.append(FrameEntry(fid, weather, files))
    if not frames:
        warnings.warn(f"no complete frames under {root}", stacklevel=2)
    return DatasetManifest(root, tuple(frames), calibrations, layout, skipped, session_seed)


# ---------------------------------------------------------------------------
# Frame file readers
# ---------------------------------------------------------------------------


def decode_depth_raster(encoded: np.ndarray, far_plane: float = DEFAULT_FAR_PLANE) -> np.ndarray:
    """Plane depth in metres from a 24-bit ``(R, G, B)`` depth encoding."""
    a = np.asarray(encoded)
    if a.ndim != 3 or a.shape[2] != 3 or a.dtype != np.uint8:
        raise DepthFormatError(f"expected an 8-bit 3-channel raster, got {a.dtype} {a.shape}")
    code = a[..., 0].astype(np.float64) + a[..., 1] * 256.0 + a[..., 2] * 65536.0
    return code / (256.0**3 - 1.0) * far_plane


def read_boxes(path: str | Path) -> tuple[list[OrientedBox3D], list[OrientedBox3D]]:
    doc = json.loads(Path(path).read_text())
    curr = [OrientedBox3D.from_dict(b) for b in doc.get("boxes", [])]
    prev = [OrientedBox3D.from_dict(b) for b in doc.get("boxes_prev", [])]
    return curr, prev


@dataclass(frozen=True, eq=False)
class FramePoses:
    timestamp: float | None
    fps: float
    weather: str | None
    camera_poses: Mapping[str, tuple[RigidTransform, RigidTransform]]
    ego_pose: tuple[RigidTransform, RigidTransform] | None
    object_transforms: tuple[dict[int, RigidTransform], dict[int, RigidTransform]] | None
    spawned: frozenset[int]


def read_poses(path: str | Path, calibrations: Mapping[str, CameraCalibration] | None = None) -> FramePoses:
    """Parse a pose file; 4x4 row-major matrices, sensor/object to world.

    Camera poses missing from the file are derived from the ego pose and the
    calibration extrinsic when both are available.
    """
    doc = json.loads(Path(path).read_text())

    def pair(d, conv):
        return RigidTransform.from_matrix(d["prev"], conv), RigidTransform.from_matrix(d["curr"], conv)

    ego = pair(doc["ego_pose"], "ego_to_world") if "ego_pose" in doc else None
    cams = {name: pair(d, "sensor_to_world") for name, d in doc.get("camera_poses", {}).items()}
    if ego is not None and calibrations:
        for name, calib in calibrations.items():
            if name not in cams:
                cams[name] = (ego[0] @ calib.extrinsic, ego[1] @ calib.extrinsic)
    objs = None
    if "object_transforms" in doc:
        prev, curr = {}, {}
        for oid, d in doc["object_transforms"].items():
            if d.get("prev") is not None:
                prev[int(oid)] = RigidTransform.from_matrix(d["prev"], "object_to_world")
            if d.get("curr") is not None:
                curr[int(oid)] = RigidTransform.from_matrix(d["curr"], "object_to_world")
        objs = (prev, curr)
    weather = doc.get("weather")
    return FramePoses(
        doc.get("timestamp"),
        float(doc.get("fps", 10.0)),
        normalize_weather(weather) if weather is not None else None,
        cams,
        ego,
        objs,
        frozenset(int(s) for s in doc.get("spawned", [])),
    )


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ClassHistogram:
    counts: np.ndarray  # int64 per class id

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def percentages(self) -> np.ndarray:
        total = self.total
        return self.counts * (100.0 / total) if total else np.zeros(len(self.counts))

    def __add__(self, other: "ClassHistogram") -> "ClassHistogram":
        return ClassHistogram(self.counts + other.counts)

    @classmethod
    def zero(cls) -> "ClassHistogram":
        return cls(np.zeros(NUM_CLASSES, dtype=np.int64))

    def to_dict(self) -> dict:
        pct = self.percentages
        return {
            "total_pixels": self.total,
            "classes": [
                {"id": i, "name": CLASS_NAMES[i], "pixels": int(self.counts[i]), "percent": float(pct[i])}
                for i in range(len(self.counts))
            ],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class_id", "class_name", "pixels", "percent"])
        for i, (c, p) in enumerate(zip(self.counts, self.percentages)):
            w.writerow([i, CLASS_NAMES[i], int(c), repr(float(p))])
        return buf.getvalue()


def count_classes(labels: np.ndarray) -> tuple[ClassHistogram, int]:
    """Histogram of one label raster and the number of unknown-id pixels.

    The out-of-coverage sentinel is not counted; unknown ids count as
    ``unlabeled``.
    """
    lab = np.asarray(labels).ravel()
    lab = lab[lab != INVALID_LABEL]
    counts = np.bincount(lab.astype(np.int64), minlength=NUM_CLASSES)
    unknown = int(counts[NUM_CLASSES:].sum())
    counts = counts[:NUM_CLASSES].astype(np.int64)
    counts[UNLABELED] += unknown
    return ClassHistogram(counts), unknown


def class_pixel_histogram(source, modality: str = "semantic") -> ClassHistogram:
    """Exact per-class pixel counts over label rasters.

    ``source`` is a :class:`DatasetManifest` (all cameras and faces of the
    chosen raster modality) or an iterable of arrays / PNG paths, e.g. the
    fisheye and BEV semantic outputs. Rasters are read one at a time.
    """
    if isinstance(source, DatasetManifest):
        items = (
            f.files[k] for f in source.frames for k in sorted(f.files) if k.split("/")[1:2] == [modality]
        )
    else:
        items = source
    hist = ClassHistogram.zero()
    unknown = 0
    for item in items:
        arr = read_png(item) if isinstance(item, (str, Path)) else np.asarray(item)
        h, u = count_classes(arr)
        hist = hist + h
        unknown += u
    if unknown:
        warnings.warn(f"{unknown} pixels carried unknown class ids; counted as unlabeled", stacklevel=2)
    return hist


@dataclass(frozen=True)
class FrameObjects:
    """Per-frame input to :func:`object_statistics`: box classes and displacements."""

    class_ids: Mapping[int, int]  # object_id -> class id
    motions: Mapping[int, float]  # object_id -> metres


@dataclass(frozen=True, eq=False)
class ObjectStats:
    n_images: int
    thresholds: tuple[float, ...]
    percent_images: dict[str, float]
    objects_per_image: dict[str, float]
    moving_per_image: dict[str, tuple[float, ...]]

    def to_dict(self) -> dict:
        return {
            "n_images": self.n_images,
            "thresholds_m": list(self.thresholds),
            "classes": {
                name: {
                    "percent_images": self.percent_images[name],
                    "objects_per_image": self.objects_per_image[name],
                    "moving_per_image": list(self.moving_per_image[name]),
                }
                for name in self.percent_images
            },
        }

    def table(self) -> str:
        """Aligned text table: class, % of images, objects/image, moving objects per threshold."""
        thr_cols = [repr(float(t)) for t in self.thresholds]  # 0.0, 0.25, ... 1.0
        header = ["Class", "% of images", "objects/image"] + thr_cols
        rows = [
            [name, f"{self.percent_images[name]:.2f}", f"{self.objects_per_image[name]:.2f}"]
            + [f"{v:.2f}" for v in self.moving_per_image[name]]
            for name in self.percent_images
        ]
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        group = " " * (widths[0] + 2) + "All objects".center(widths[1] + widths[2] + 2) + " | "
        group += "Moving objects (thresholds in meters)"
        lines = [group]
        for r in [header] + rows:
            cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
            lines.append("  ".join(cells[:3]) + " | " + "  ".join(cells[3:]))
        return "\n".join(lines) + "\n"


def frame_objects(boxes: Iterable[OrientedBox3D], records: Iterable[MotionRecord]) -> FrameObjects:
    return FrameObjects({b.object_id: b.class_id for b in boxes}, {r.object_id: r.displacement for r in records})


def object_statistics(source, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> ObjectStats:
    """Frequency and moving-object statistics per class.

    ``source`` is a :class:`DatasetManifest` (boxes and pose files) or an
    iterable of :class:`FrameObjects`. An object is moving at threshold
    ``t`` when its displacement is strictly greater than ``t``.
    """
    if isinstance(source, DatasetManifest):
        frames = (_manifest_frame_objects(source, f) for f in source.frames)
    else:
        frames = source
    thresholds = tuple(float(t) for t in thresholds)
    n = 0
    with_class = {k: 0 for k in STAT_CLASSES}
    total = {k: 0 for k in STAT_CLASSES}
    moving = {k: [0] * len(thresholds) for k in STAT_CLASSES}
    for fo in frames:
        n += 1
        for name, cid in STAT_CLASSES.items():
            ids = [oid for oid, c in fo.class_ids.items() if c == cid]
            total[name] += len(ids)
            with_class[name] += bool(ids)
            for i, t in enumerate(thresholds):
                moving[name][i] += sum(1 for oid in ids if fo.motions.get(oid, 0.0) > t)
    div = n if n else 1
    return ObjectStats(
        n,
        thresholds,
        {k: 100.0 * with_class[k] / div for k in STAT_CLASSES},
        {k: total[k] / div for k in STAT_CLASSES},
        {k: tuple(m / div for m in moving[k]) for k in STAT_CLASSES},
    )


def _manifest_frame_objects(manifest: DatasetManifest, frame: FrameEntry) -> FrameObjects:
    boxes, _ = read_boxes(frame.files["boxes"])
    records: list[MotionRecord] = []
    if "poses" in frame.files:
        poses = read_poses(frame.files["poses"])
        if poses.object_transforms is not None:
            prev, curr = poses.object_transforms
            records = [r for r in motion_distances(prev, curr) if r.object_id not in poses.spawned]
    return frame_objects(boxes, records)


# ---------------------------------------------------------------------------
# Output writing
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Product:
    """One output file: ``{frame}_{camera}_{modality}.{ext}``."""

    camera: str | None  # None for rig-level products such as BEV and motions
    modality: str
    ext: str
    data: object


def output_name(frame_id: str, camera: str | None, modality: str, ext: str) -> str:
    if camera is None:
        return f"{frame_id}_{modality}.{ext}"
    return f"{frame_id}_{camera}_{modality}.{ext}"


def _write_product(path: Path, p: Product) -> None:
    if p.ext == "png":
        write_png(path, p.data)
    elif p.ext == "fras":
        write_fras(path, p.data)
    elif p.ext == "npy":
        save_events(path, p.data)
    elif p.ext in ("txt", "csv"):
        path.write_text(p.data)
    elif p.ext == "json":
        path.write_text(json.dumps(p.data, indent=2, sort_keys=True) + "\n")
    else:
        raise ValueError(f"unsupported output extension {p.ext!r}")


def frame_metadata(frame_id: str, **fields) -> dict:
    return {"frame_id": frame_id, "toolkit_version": __version__, **fields}


def write_outputs(frame_id: str, products: Iterable[Product], output_root: str | Path, metadata: dict) -> list[Path]:
    """Write one frame's products and its metadata record; returns written paths.

    The metadata file is written last, so its presence marks a completed frame.
    """
    root = Path(output_root)
    root.mkdir(parents=True, exist_ok=True)
    written = []
    names = []
    for p in products:
        path = root / output_name(frame_id, p.camera, p.modality, p.ext)
        _write_product(path, p)
        written.append(path)
        names.append(path.name)
    meta = dict(metadata)
    meta["files"] = sorted(names)
    meta_path = root / f"{frame_id}_meta.json"
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    written.append(meta_path)
    return written


def read_metadata(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


