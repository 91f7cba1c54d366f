"""Event-camera streams: cubemap -> fisheye remapping, NPY storage, rendering."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .calib_geometry import DomainError
from .fisheye_remap import FACE_NAMES, LookupTable

EVENT_DTYPE = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<i8"), ("pol", "i1")])
POSITIVE_COLOR = (0, 0, 255)
NEGATIVE_COLOR = (255, 0, 0)


@dataclass(frozen=True, eq=False)
class EventStream:
    """Time-ordered ``(x, y, t[us], pol)`` records over a ``width x height`` sensor."""

    records: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        rec = np.asarray(self.records)
        if rec.dtype != EVENT_DTYPE:
            rec = rec.astype(EVENT_DTYPE)
        if rec.ndim != 1:
            raise DomainError("event records must be a 1-D structured array")
        if len(rec):
            if np.any(np.diff(rec["t"]) < 0):
                raise DomainError("event timestamps must be non-decreasing")
            if not np.all(np.isin(rec["pol"], (-1, 1))):
                raise DomainError("event polarity must be +1 or -1")
        object.__setattr__(self, "records", rec)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def time_span(self) -> tuple[int, int] | None:
        if not len(self.records):
            return None
        return int(self.records["t"][0]), int(self.records["t"][-1])

    @classmethod
    def from_arrays(cls, x, y, t, pol, width: int, height: int) -> "EventStream":
        rec = np.empty(len(t), dtype=EVENT_DTYPE)
        rec["x"], rec["y"], rec["t"], rec["pol"] = x, y, t, pol
        return cls(rec, width, height)

    @classmethod
    def empty(cls, width: int, height: int) -> "EventStream":
        return cls(np.empty(0, dtype=EVENT_DTYPE), width, height)


@dataclass(frozen=True, eq=False)
class ReverseMap:
    """For every cubemap pixel, the fisheye pixels that sample it (CSR layout).

    Keys are flat cubemap indices ``face*n*n + v*n + u``; targets are flat
    fisheye indices ``y*width + x`` in ascending order within each key.
    """

    face_size: int
    width: int
    height: int
    offsets: np.ndarray
    targets: np.ndarray

    def lookup(self, face: int | str, u: int, v: int) -> list[tuple[int, int]]:
        fi = FACE_NAMES.index(face) if isinstance(face, str) else int(face)
        n = self.face_size
        if not (0 <= fi < len(FACE_NAMES) and 0 <= u < n and 0 <= v < n):
            return []
        key = fi * n * n + v * n + u
        tg = self.targets[self.offsets[key]:self.offsets[key + 1]]
        return [(int(t % self.width), int(t // self.width)) for t in tg]

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)


def invert_lut(lut: LookupTable) -> ReverseMap:
    """Register each valid fisheye pixel under its nearest cubemap source pixel."""
    n = lut.face_size
    keys = lut.nearest_index.ravel()
    fish = np.flatnonzero(lut.valid.ravel())
    keys = keys[fish]
    order = np.lexsort((fish, keys))
    counts = np.bincount(keys, minlength=len(FACE_NAMES) * n * n)
    offsets = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return ReverseMap(n, lut.width, lut.height, offsets, fish[order].astype(np.int64))


def remap_events(streams: Mapping[str, EventStream], reverse: ReverseMap) -> tuple[EventStream, int]:
    """Fan each cubemap event out to every fisheye pixel registered for its source.

    Returns the merged fisheye stream and the number of input events rejected
    for out-of-bounds coordinates. Output order: time, then face, source
    row, source column, input position, fisheye pixel index.
    """
    n = reverse.face_size
    parts = []
    rejected = 0
    for fi, name in enumerate(FACE_NAMES):
        if name not in streams:
            continue
        rec = streams[name].records
        if not len(rec):
            continue
        inb = (rec["x"] < n) & (rec["y"] < n)
        rejected += int((~inb).sum())
        idx_in = np.flatnonzero(inb)
        rec = rec[inb]
        keys = fi * n * n + rec["y"].astype(np.int64) * n + rec["x"].astype(np.int64)
        start = reverse.offsets[keys]
        cnt = reverse.offsets[keys + 1] - start
        src = np.repeat(np.arange(len(rec)), cnt)
        # position within each fan-out run
        run_start = np.repeat(np.cumsum(cnt) - cnt, cnt)
        tgt = reverse.targets[np.repeat(start, cnt) + (np.arange(len(src)) - run_start)]
        parts.append(
            (
                rec["t"][src],
                np.full(len(src), fi, dtype=np.int64),
                rec["y"][src].astype(np.int64),
                rec["x"][src].astype(np.int64),
                idx_in[src],
                tgt,
                rec["pol"][src],
            )
        )
    if not parts:
        return EventStream.empty(reverse.width, reverse.height), rejected
    t, face, sy, sx, pos, tgt, pol = (np.concatenate(c) for c in zip(*parts))
    order = np.lexsort((tgt, pos, sx, sy, face, t))
    tgt = tgt[order]
    out = EventStream.from_arrays(
        tgt % reverse.width, tgt // reverse.width, t[order], pol[order], reverse.width, reverse.height
    )
    return out, rejected


def render_events(stream: EventStream, window: tuple[int, int], size: tuple[int, int] | None = None) -> np.ndarray:
    """RGB image of the latest event per pixel inside ``[t0, t1]``.

    Positive polarity is blue, negative red, no event black. ``size`` is
    ``(width, height)`` and defaults to the stream's sensor size.
    """
    t0, t1 = window
    if t0 > t1:
        raise DomainError(f"empty window [{t0}, {t1}]")
    w, h = size if size is not None else (stream.width, stream.height)
    img = np.zeros((h, w, 3), dtype=np.uint8)
    rec = stream.records
    sel = rec[(rec["t"] >= t0) & (rec["t"] <= t1) & (rec["x"] < w) & (rec["y"] < h)]
    if not len(sel):
        return img
    pix = sel["y"].astype(np.int64) * w + sel["x"].astype(np.int64)
    # the stream is time-ordered: the last occurrence of a pixel is its latest event
    rev_pix = pix[::-1]
    _, first_rev = np.unique(rev_pix, return_index=True)
    last = len(pix) - 1 - first_rev
    flat = img.reshape(-1, 3)
    pol = sel["pol"][last]
    flat[pix[last]] = np.where((pol > 0)[:, None], POSITIVE_COLOR, NEGATIVE_COLOR).astype(np.uint8)
    return img


def save_events(path: str | Path, stream: EventStream) -> None:
    with open(path, "wb") as fh:
        np.lib.format.write_array(fh, np.ascontiguousarray(stream.records), version=(1, 0), allow_pickle=False)


def load_events(path: str | Path, width: int, height: int) -> EventStream:
    rec = np.load(path, allow_pickle=False)
    if rec.dtype.names is None or set(rec.dtype.names) != set(EVENT_DTYPE.names):
        raise DomainError(f"{path}: expected fields {EVENT_DTYPE.names}, got {rec.dtype.names}")
    return EventStream(rec.astype(EVENT_DTYPE), width, height)
