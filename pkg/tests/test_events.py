from __future__ import annotations

from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surroundgt.calib_geometry import DomainError
from surroundgt.events import (
    EVENT_DTYPE,
    NEGATIVE_COLOR,
    POSITIVE_COLOR,
    EventStream,
    invert_lut,
    load_events,
    remap_events,
    render_events,
    save_events,
)
from surroundgt.fisheye_remap import FACE_NAMES, build_lut
from surroundgt.synthetic import demo_intrinsics

N = 24
LUT = build_lut(demo_intrinsics(64, 48), N)
REVERSE = invert_lut(LUT)


@pytest.fixture
def lut():
    return LUT


@pytest.fixture
def reverse():
    return REVERSE


def key_with_count(reverse, count):
    k = int(np.flatnonzero(reverse.counts() == count)[0])
    face, rem = divmod(k, N * N)
    v, u = divmod(rem, N)
    return face, u, v


def stream(xs, ys, ts, pols, n=N):
    return EventStream.from_arrays(xs, ys, ts, pols, n, n)


class TestStream:
    def test_dtype(self):
        assert EVENT_DTYPE.descr == [("x", "<u2"), ("y", "<u2"), ("t", "<i8"), ("pol", "|i1")]

    def test_time_order_enforced(self):
        with pytest.raises(DomainError):
            stream([0, 0], [0, 0], [5, 4], [1, 1])

    def test_polarity_values(self):
        with pytest.raises(DomainError):
            stream([0], [0], [5], [0])

    def test_npy_round_trip(self, tmp_path):
        s = stream([1, 2], [3, 4], [10, 11], [1, -1])
        save_events(tmp_path / "e.npy", s)
        raw = (tmp_path / "e.npy").read_bytes()
        assert raw[:8] == b"\x93NUMPY\x01\x00"
        back = load_events(tmp_path / "e.npy", N, N)
        assert back.records.tobytes() == s.records.tobytes()

    def test_load_wrong_fields(self, tmp_path):
        np.save(tmp_path / "bad.npy", np.zeros(3, dtype=[("x", "<u2"), ("t", "<i8")]))
        with pytest.raises(DomainError):
            load_events(tmp_path / "bad.npy", N, N)


class TestInvert:
    def test_singleton_and_empty(self, lut, reverse):
        face, u, v = key_with_count(reverse, 1)
        (x, y), = reverse.lookup(face, u, v)
        assert lut.valid[y, x] and lut.nearest_index[y, x] == face * N * N + v * N + u
        face, u, v = key_with_count(reverse, 0)
        assert reverse.lookup(FACE_NAMES[face], u, v) == []
        assert reverse.lookup(0, N + 3, 0) == []

    def test_union_is_valid_set(self, lut, reverse):
        seen = []
        for k in range(5 * N * N):
            face, rem = divmod(k, N * N)
            v, u = divmod(rem, N)
            seen += reverse.lookup(face, u, v)
        assert len(seen) == len(set(seen)) == int(lut.valid.sum())
        ys, xs = np.nonzero(lut.valid)
        assert set(seen) == set(zip(xs.tolist(), ys.tolist()))

    def test_fan_out_exists(self, reverse):
        assert reverse.counts().max() > 1


class TestRemap:
    def test_empty(self, reverse):
        out, rejected = remap_events({}, reverse)
        assert len(out) == 0 and rejected == 0

    def test_single_event(self, reverse):
        face, u, v = key_with_count(reverse, 1)
        out, _ = remap_events({FACE_NAMES[face]: stream([u], [v], [1234], [-1])}, reverse)
        assert len(out) == 1
        (x, y), = reverse.lookup(face, u, v)
        rec = out.records[0]
        assert (rec["x"], rec["y"], rec["t"], rec["pol"]) == (x, y, 1234, -1)

    def test_interleaved_faces_merge(self, reverse):
        counts = reverse.counts().reshape(5, N, N)
        streams = {}
        for fi, name in enumerate(FACE_NAMES[:2]):
            v, u = np.argwhere(counts[fi] > 0)[0]
            streams[name] = stream([u] * 3, [v] * 3, [fi, fi + 2, fi + 4], [1, -1, 1])
        out, _ = remap_events(streams, reverse)
        assert np.all(np.diff(out.records["t"]) >= 0)

    def test_out_of_bounds_rejected(self, reverse):
        s = EventStream.from_arrays([1, N + 5], [1, 0], [1, 2], [1, 1], N + 10, N)
        out, rejected = remap_events({"front": s}, reverse)
        assert rejected == 1

    def test_deterministic_tie_order(self, reverse):
        counts = reverse.counts().reshape(5, N, N)
        (v1, u1), (v2, u2) = np.argwhere(counts[0] > 0)[:2]
        a = {"front": stream([u2, u1], [v2, v1], [7, 7], [1, -1])}
        out1, _ = remap_events(a, reverse)
        out2, _ = remap_events(a, reverse)
        assert out1.records.tobytes() == out2.records.tobytes()
        # equal timestamps: source row, then column order
        first = out1.records[0]
        assert (int(first["x"]), int(first["y"])) in reverse.lookup(0, int(u1), int(v1))


@settings(max_examples=20, deadline=None)
@given(st.data())
def test_payload_preservation(data):
    rev = REVERSE
    n_events = data.draw(st.integers(0, 300))
    rng = np.random.default_rng(data.draw(st.integers(0, 2**31)))
    streams, sources = {}, []
    for fi, name in enumerate(FACE_NAMES):
        k = n_events // 5
        t = np.sort(rng.integers(0, 1000, k))
        xs, ys = rng.integers(0, N, k), rng.integers(0, N, k)
        pol = rng.choice([-1, 1], k)
        streams[name] = stream(xs, ys, t, pol)
        sources += [(fi, x, y, tt, p) for x, y, tt, p in zip(xs, ys, t, pol)]
    out, rejected = remap_events(streams, rev)
    assert rejected == 0
    expect = Counter()
    for fi, x, y, t, p in sources:
        mult = len(rev.lookup(fi, int(x), int(y)))
        expect[(int(t), int(p))] += mult
    got = Counter(zip(out.records["t"].tolist(), out.records["pol"].tolist()))
    assert got == expect
    assert np.all(np.diff(out.records["t"]) >= 0)
    assert LUT.valid[out.records["y"], out.records["x"]].all()


class TestRender:
    def test_no_events_black(self):
        img = render_events(EventStream.empty(8, 6), (0, 100))
        assert img.shape == (6, 8, 3) and not img.any()

    def test_single_positive_blue(self):
        img = render_events(EventStream.from_arrays([3], [2], [50], [1], 8, 6), (0, 100))
        assert tuple(img[2, 3]) == POSITIVE_COLOR == (0, 0, 255)
        assert img.reshape(-1, 3).any(axis=1).sum() == 1

    def test_single_negative_red(self):
        img = render_events(EventStream.from_arrays([3], [2], [50], [-1], 8, 6), (0, 100))
        assert tuple(img[2, 3]) == NEGATIVE_COLOR == (255, 0, 0)

    def test_latest_wins(self):
        s = EventStream.from_arrays([1, 1, 1], [1, 1, 1], [10, 20, 30], [-1, 1, -1], 4, 4)
        assert tuple(render_events(s, (0, 25))[1, 1]) == POSITIVE_COLOR
        assert tuple(render_events(s, (0, 30))[1, 1]) == NEGATIVE_COLOR

    def test_window(self):
        s = EventStream.from_arrays([1], [1], [10], [1], 4, 4)
        assert not render_events(s, (11, 20)).any()
        with pytest.raises(DomainError):
            render_events(s, (20, 11))
