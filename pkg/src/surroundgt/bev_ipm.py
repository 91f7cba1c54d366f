"""Bird's-eye-view grids: inverse perspective mapping, fusion and height maps.

The ego frame has +X forward, +Y left, +Z up with the origin on the ground
under the rear-axle centre. Grid row 0 is the far-forward edge and column 0
the far-left edge, so the top of a BEV image points forward.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .calib_geometry import DomainError, FisheyeIntrinsics, RigidTransform, unproject_fisheye_pixels
from .classes import INVALID_LABEL
from .groundtruth import camera_points, project_points

CAMERA_PRECEDENCE = ("front", "rear", "left", "right")


@dataclass(frozen=True)
class BevGrid:
    extent: float = 40.0
    cells: int = 1024

    def __post_init__(self):
        if self.extent <= 0 or self.cells <= 0:
            raise DomainError(f"invalid BEV grid {self.extent} m / {self.cells} cells")

    @classmethod
    def from_resolution(cls, extent: float, resolution: float) -> "BevGrid":
        n = extent / resolution
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise DomainError(f"extent {extent} m is not a whole number of {resolution} m cells")
        return cls(extent, int(round(n)))

    @property
    def resolution(self) -> float:
        return self.extent / self.cells

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Ego ``(X, Y)`` of every cell centre, each shaped ``(cells, cells)``."""
        idx = np.arange(self.cells, dtype=np.float64)
        half = self.cells / 2.0
        x = (half - idx - 0.5) * self.resolution
        return np.repeat(x[:, None], self.cells, axis=1), np.repeat(x[None, :], self.cells, axis=0)

    def cell_of(self, x, y):
        """Row/column of the cell containing ego point ``(x, y)`` and an inside mask."""
        half = self.cells / 2.0
        row = np.floor(half - np.asarray(x) / self.resolution).astype(np.int64)
        col = np.floor(half - np.asarray(y) / self.resolution).astype(np.int64)
        inside = (row >= 0) & (row < self.cells) & (col >= 0) & (col < self.cells)
        return row, col, inside

    def to_dict(self) -> dict:
        return {
            "extent_m": self.extent,
            "cells": self.cells,
            "resolution_m": self.resolution,
            "origin": "ego rear-axle centre at grid centre",
            "axes": "+X forward (up in image), +Y left (left in image)",
        }


@dataclass(frozen=True, eq=False)
class BevProjection:
    labels: np.ndarray  # uint8, INVALID_LABEL where not hit
    hit: np.ndarray
    distance: np.ndarray  # optical centre to ground point, metres (inf where not hit)


def ground_points(intr: FisheyeIntrinsics, cam_to_ego: RigidTransform, pixels: np.ndarray):
    """Intersect pixel rays with the ground plane ``z = 0`` (ego frame)."""
    dirs, ok = unproject_fisheye_pixels(intr, pixels)
    d_ego = dirs @ cam_to_ego.rotation.T
    o = cam_to_ego.translation
    with np.errstate(invalid="ignore", divide="ignore"):
        s = -o[2] / d_ego[..., 2]
    ok = ok & (s > 0)
    pts = o + s[..., None] * d_ego
    pts[~ok] = np.nan
    return pts, ok


def ipm_project(
    semantic: np.ndarray, intr: FisheyeIntrinsics, cam_to_ego: RigidTransform, grid: BevGrid
) -> BevProjection:
    """Label each BEV cell with the fisheye pixel that sees its ground point.

    Flat-ground assumption: anything above the ground is smeared away from
    the camera; occlusion is not modelled.
    """
    if semantic.shape != (intr.height, intr.width):
        raise DomainError(f"semantic raster {semantic.shape} does not match camera {intr.width}x{intr.height}")
    X, Y = grid.cell_centers()
    ground = np.stack([X, Y, np.zeros_like(X)], axis=-1)
    cam = cam_to_ego.inverse().apply(ground)
    pix, valid, _ = project_points(intr, cam)
    xi = np.floor(np.nan_to_num(pix[..., 0]) + 0.5).astype(np.int64).clip(0, intr.width - 1)
    yi = np.floor(np.nan_to_num(pix[..., 1]) + 0.5).astype(np.int64).clip(0, intr.height - 1)
    labels = np.where(valid, np.asarray(semantic)[yi, xi], INVALID_LABEL).astype(np.uint8)
    hit = valid & (labels != INVALID_LABEL)
    labels[~hit] = INVALID_LABEL
    dist = np.where(hit, np.linalg.norm(ground - cam_to_ego.translation, axis=-1), np.inf)
    return BevProjection(labels, hit, dist)


def _precedence(names) -> list[str]:
    known = [n for n in CAMERA_PRECEDENCE if n in names]
    return known + sorted(n for n in names if n not in CAMERA_PRECEDENCE)


def fuse_bev(projections: Mapping[str, BevProjection]) -> tuple[np.ndarray, np.ndarray]:
    """Merge per-camera projections; the camera nearest the ground point wins.

    Equal distances resolve by precedence front > rear > left > right, so the
    result does not depend on the mapping's iteration order.
    """
    if not projections:
        raise DomainError("no projections to fuse")
    names = _precedence(projections)
    shape = projections[names[0]].labels.shape
    labels = np.full(shape, INVALID_LABEL, dtype=np.uint8)
    best = np.full(shape, np.inf)
    for name in names:
        p = projections[name]
        if p.labels.shape != shape:
            raise DomainError("projections use different grids")
        take = p.hit & (p.distance < best)
        labels[take] = p.labels[take]
        best[take] = p.distance[take]
    return labels, np.isfinite(best)


def bev_height(
    depths: Mapping[str, np.ndarray],
    cameras: Mapping[str, tuple[FisheyeIntrinsics, RigidTransform]],
    grid: BevGrid,
    depth_kind: str = "ray",
) -> np.ndarray:
    """Maximum point height per BEV cell (metres above ground, NaN when empty).

    ``depth_kind`` is ``"ray"`` for Euclidean ray distances (the fisheye
    depth output) or ``"plane"`` for distance along the optical axis.
    """
    if depth_kind not in ("ray", "plane"):
        raise DomainError(f"unknown depth kind {depth_kind!r}")
    acc = np.full(grid.cells * grid.cells, -np.inf)
    for name in _precedence(depths):
        intr, cam_to_ego = cameras[name]
        d = np.asarray(depths[name], dtype=np.float64)
        pts = camera_points(intr, np.ones_like(d))  # unit directions
        if depth_kind == "plane":
            with np.errstate(invalid="ignore", divide="ignore"):
                d = d / pts[..., 2]
        pts = pts * np.where(np.isfinite(d) & (d > 0), d, np.nan)[..., None]
        ego = cam_to_ego.apply(pts.reshape(-1, 3))
        ego = ego[np.all(np.isfinite(ego), axis=1)]
        row, col, inside = grid.cell_of(ego[:, 0], ego[:, 1])
        np.maximum.at(acc, row[inside] * grid.cells + col[inside], ego[inside, 2])
    out = acc.reshape(grid.cells, grid.cells)
    out[~np.isfinite(out)] = np.nan
    return out.astype(np.float32)
