"""Acceptance criteria C1 to C12.

Each test prints one ``C<n> PASS|FAIL`` line; the lines are repeated in the
terminal summary. Run with ``pytest -m acceptance``.
"""

from __future__ import annotations

import math
import os
import time

import numpy as np
import pytest

from surroundgt.bev_ipm import BevGrid, bev_height, fuse_bev, ipm_project
from surroundgt.calib_geometry import (
    OrientedBox3D,
    PinholeIntrinsics,
    RigidTransform,
    backproject,
    pinhole_focal,
    point_in_box,
    project_fisheye_points,
    pixel_grid,
    unproject_fisheye_pixels,
)
from surroundgt.classes import FOUR_WHEELER, INSTANCE_CLASSES, PEDESTRIAN, ROAD, ROAD_LINE, SIDEWALK, TWO_WHEELER
from surroundgt.cli import main
from surroundgt.dataset_io import (
    FrameObjects,
    class_pixel_histogram,
    decode_depth_raster,
    object_statistics,
    scan_dataset,
)
from surroundgt.events import NEGATIVE_COLOR, POSITIVE_COLOR, EventStream, invert_lut, remap_events, render_events
from surroundgt.fisheye_remap import (
    FACE_NAMES,
    CubemapFaceSet,
    build_lut,
    build_lut_for,
    face_directions,
    remap,
    remap_depth,
)
from surroundgt.groundtruth import (
    instance_segmentation,
    motion_distances,
    motion_mask,
    optical_flow,
    scene_flow,
)
from surroundgt.synthetic import (
    Scene,
    SceneObject,
    constant_radius_depth_faces,
    demo_intrinsics,
    demo_rig,
    encode_depth_raster,
    look_rotation,
    render_cubemap,
    render_pinhole,
    sphere_color,
    write_fixture_dataset,
    z_rotation,
)

pytestmark = pytest.mark.acceptance

FACE_512 = 512
PIN = PinholeIntrinsics(90.0, 64, 48)


@pytest.fixture(scope="module")
def realistic_lut(realistic_fisheye):
    intr = realistic_fisheye
    t0 = time.perf_counter()
    lut = build_lut(intr, FACE_512)
    return intr, lut, time.perf_counter() - t0


def tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------------------


def test_c1_projection_round_trip(realistic_fisheye, report):
    intr = realistic_fisheye
    rng = np.random.default_rng(2024)
    pix = np.empty((0, 2))
    while len(pix) < 10_000:
        cand = rng.uniform([0.0, 0.0], [intr.width - 1.0, intr.height - 1.0], (20_000, 2))
        keep = np.hypot(cand[:, 0] - intr.cx, cand[:, 1] - intr.cy) <= intr.r_max
        pix = np.concatenate([pix, cand[keep]])
    pix = pix[:10_000]
    t0 = time.perf_counter()
    dirs, ok = unproject_fisheye_pixels(intr, pix)
    back, ok2 = project_fisheye_points(intr, dirs)
    elapsed = time.perf_counter() - t0
    err = float(np.max(np.hypot(*(back - pix).T)))
    good = bool(ok.all() and ok2.all() and err < 1e-4 and elapsed < 1.0)
    report("C1", "projection round trip", good, f"max error {err:.2e} px, {elapsed:.3f} s")
    assert good


def test_c2_pinhole_constants(report):
    f = pinhole_focal(90.0, 1024)
    K = PinholeIntrinsics(90.0, 1024, 768).K
    expect = np.array([[512.0, 0.0, 512.0], [0.0, 512.0, 384.0], [0.0, 0.0, 1.0]])
    fields_ok = K.shape == (3, 3) and all(K[i, j] == expect[i, j] for i in range(3) for j in range(3))
    # other angles against the closed form evaluated independently
    others = all(
        math.isclose(pinhole_focal(fov, w), w / (2 * math.tan(math.pi * fov / 360)), rel_tol=1e-12)
        for fov, w in [(60.0, 1280), (120.0, 640), (30.0, 3264)]
    )
    good = f == 512.0 and fields_ok and others
    report("C2", "focal length and intrinsic matrix", good, f"f={f!r}")
    assert good


def test_c3_remap_oracle(realistic_lut, report):
    intr, lut, t_lut = realistic_lut
    faces = {n: np.round(sphere_color(face_directions(FACE_512, n))).astype(np.uint8) for n in FACE_NAMES}
    t0 = time.perf_counter()
    out = remap(lut, CubemapFaceSet(faces, "image"))
    elapsed = t_lut + time.perf_counter() - t0
    dirs, valid = unproject_fisheye_pixels(intr, pixel_grid(intr.width, intr.height))
    direct = np.round(sphere_color(dirs[valid]))
    diff = np.max(np.abs(out[valid].astype(np.float64) - direct), axis=-1)
    frac = float(np.mean(diff <= 1.0))
    good = frac >= 0.999 and elapsed < 10.0
    report("C3", "cubemap remap vs direct ray evaluation", good,
           f"{100 * frac:.4f}% within 1 level, {elapsed:.2f} s")
    assert good


def test_c4_depth_conversion(realistic_lut, report):
    _, lut, _ = realistic_lut
    encoded = {n: encode_depth_raster(d) for n, d in constant_radius_depth_faces(7.0, FACE_512).items()}
    plane = {n: decode_depth_raster(e) for n, e in encoded.items()}
    ray = remap_depth(lut, CubemapFaceSet(plane, "depth"))
    err = float(np.max(np.abs(ray[lut.valid] - 7.0)))
    good = err <= 1e-3 and bool(np.isnan(ray[~lut.valid]).all())
    report("C4", "constant-radius sphere depth", good, f"max |d - 7| = {err:.2e} m")
    assert good


def random_frame(rng):
    pose = RigidTransform(look_rotation([1.0, 0.0, 0.0]), [0.0, 0.0, 1.5], "sensor_to_world")
    objects, boxes = [], []
    for oid in range(1, int(rng.integers(1, 11)) + 1):
        half = rng.uniform(0.2, 1.5, 3)
        x = rng.uniform(3.0, 15.0)
        center = [x, rng.uniform(-0.6, 0.6) * x, half[2] + rng.uniform(0.0, 0.5)]
        label = int(rng.choice([PEDESTRIAN, FOUR_WHEELER, TWO_WHEELER]))
        box = OrientedBox3D(oid, label, center, half, z_rotation(rng.uniform(-math.pi, math.pi)))
        objects.append(SceneObject(box, label))
        boxes.append(box)
    r = render_pinhole(Scene(objects), PIN, pose)
    return r, boxes, pose


def brute_force_ids(depth, sem, boxes, pose):
    out = np.zeros(depth.shape, np.uint16)
    for y in range(depth.shape[0]):
        for x in range(depth.shape[1]):
            d = depth[y, x]
            if sem[y, x] not in INSTANCE_CLASSES or not (np.isfinite(d) and d > 0):
                continue
            p = backproject(PIN, pose, (x, y), d)
            inside = [b for b in boxes if point_in_box(p, b)]
            if inside:
                out[y, x] = min(inside, key=lambda b: (b.volume, b.object_id)).object_id
    return out


def test_c5_instance_brute_force(report):
    rng = np.random.default_rng(5)
    mismatched, labelled = 0, 0
    for _ in range(50):
        r, boxes, pose = random_frame(rng)
        prod = instance_segmentation(r.depth, r.semantic, boxes, PIN, pose).id_map
        brute = brute_force_ids(r.depth, r.semantic, boxes, pose)
        mismatched += int(np.count_nonzero(prod != brute))
        labelled += int(np.count_nonzero(brute))
    good = mismatched == 0 and labelled > 0
    report("C5", "instance segmentation vs per-pixel oracle", good,
           f"50 frames, {labelled} object pixels, {mismatched} mismatches")
    assert good


def test_c6_motion_thresholds(report):
    # displacements chosen to be exact in binary: 0, 0.25, 0.5, 0.75, 1.0 and 1.25 m
    steps = {1: 0.0, 2: 0.25, 3: 0.5, 4: 0.75, 5: 1.0, 6: 1.25}
    pose = RigidTransform(look_rotation([1.0, 0.0, 0.0]), [0.0, 0.0, 1.5], "sensor_to_world")
    cam = PinholeIntrinsics(120.0, 160, 120)
    prev, curr, objects = {}, {}, []
    for oid, step in steps.items():
        c0 = np.array([8.0, -7.5 + 2.5 * oid, 0.75])
        c1 = c0 + np.array([step, 0.0, 0.0])
        prev[oid] = RigidTransform(np.eye(3), c0, "object_to_world")
        curr[oid] = RigidTransform(np.eye(3), c1, "object_to_world")
        objects.append(SceneObject(OrientedBox3D(oid, PEDESTRIAN, c1, [0.4, 0.4, 0.75]), PEDESTRIAN))
    r = render_pinhole(Scene(objects), cam, pose)
    ids = instance_segmentation(r.depth, r.semantic, [o.box for o in objects], cam, pose).id_map
    records = motion_distances(prev, curr)
    masks = [motion_mask(ids, records, t) for t in (0.0, 0.25, 0.5, 0.75, 1.0)]
    nested = all(np.all(masks[k + 1] <= masks[k]) for k in range(4))
    half = ids == 3
    exact = dict((rec.object_id, rec.displacement) for rec in records)[3] == 0.5
    excluded = bool(half.any() and masks[1][half].all() and not masks[2][half].any())
    good = nested and exact and excluded and all(np.any(ids == o) for o in steps)
    report("C6", "motion threshold monotonicity and strict 0.5 m", good,
           f"object at exactly 0.5 m excluded at 0.5: {excluded}")
    assert good


def flow_closed_form():
    z0, tz = 10.0, 1.0
    depth = np.full((48, 64), z0)
    sf = scene_flow(depth, np.zeros((48, 64), np.uint16), PIN, RigidTransform.identity(), {}, {})
    f = optical_flow(sf, PIN, RigidTransform.identity(), RigidTransform(np.eye(3), [0, 0, tz], "sensor_to_world"))
    xs, ys = np.meshgrid(np.arange(64.0), np.arange(48.0))
    expect = np.stack([(xs - 32) * tz / (z0 - tz), (ys - 24) * tz / (z0 - tz)], -1)
    return float(np.max(np.abs(f.flow[f.valid] - expect[f.valid]))), int(f.valid.sum())


def flow_static():
    pose = RigidTransform(look_rotation([1.0, 0.0, 0.0]), [0.0, 0.0, 1.5], "sensor_to_world")
    box = OrientedBox3D(3, FOUR_WHEELER, [9.0, 1.0, 0.8], [2.0, 1.0, 0.8], z_rotation(0.3))
    r = render_pinhole(Scene([SceneObject(box, FOUR_WHEELER)]), PIN, pose)
    ids = instance_segmentation(r.depth, r.semantic, [box], PIN, pose).id_map
    t = {3: RigidTransform(box.rotation, box.center, "object_to_world")}
    sf = scene_flow(r.depth, ids, PIN, pose, t, dict(t))
    f = optical_flow(sf, PIN, pose, pose, depth_curr=r.depth)
    return float(np.nanmax(np.abs(f.flow))), int(np.count_nonzero(ids))


def flow_label_transport():
    # fronto-parallel plates whose image shifts are whole pixels (f = 32 px)
    plates = [
        (1, FOUR_WHEELER, [-0.5, 0.0, 5.05], [1.0, 0.5, 0.05], [3 * 5.0 / 32, 0.0, 0.0]),
        (2, PEDESTRIAN, [1.0, 0.3, 8.05], [0.4, 0.6, 0.05], [0.0, 2 * 8.0 / 32, 0.0]),
    ]
    cam = RigidTransform.identity()
    prev_objs, curr_objs, t_prev, t_curr = [], [], {}, {}
    for oid, label, c, h, step in plates:
        c0, c1 = np.array(c), np.array(c) + np.array(step)
        prev_objs.append(SceneObject(OrientedBox3D(oid, label, c0, h), label))
        curr_objs.append(SceneObject(OrientedBox3D(oid, label, c1, h), label))
        t_prev[oid] = RigidTransform(np.eye(3), c0, "object_to_world")
        t_curr[oid] = RigidTransform(np.eye(3), c1, "object_to_world")
    r0 = render_pinhole(Scene(prev_objs, ground=False), PIN, cam)
    r1 = render_pinhole(Scene(curr_objs, ground=False), PIN, cam)
    ids0 = instance_segmentation(r0.depth, r0.semantic, [o.box for o in prev_objs], PIN, cam).id_map
    f = optical_flow(scene_flow(r0.depth, ids0, PIN, cam, t_prev, t_curr), PIN, cam, cam, depth_curr=r1.depth)
    use = f.valid & ~f.occluded
    ys, xs = np.nonzero(use)
    fl = f.flow[use].astype(np.float64)
    whole = float(np.max(np.abs(fl - np.round(fl))))
    tx = xs + np.round(fl[:, 0]).astype(int)
    ty = ys + np.round(fl[:, 1]).astype(int)
    wrong = int(np.count_nonzero(r1.semantic[ty, tx] != r0.semantic[ys, xs]))
    moved = int(np.count_nonzero(np.any(fl != 0, axis=1)))
    return wrong, whole, moved, int(use.sum()), int(f.occluded.sum())


def test_c7_optical_flow(report):
    static_max, n_obj = flow_static()
    radial_err, n_radial = flow_closed_form()
    wrong, whole, moved, used, occluded = flow_label_transport()
    good = (
        static_max == 0.0 and n_obj > 0
        and radial_err < 1e-3 and n_radial > 1000
        and wrong == 0 and whole < 1e-3 and moved > 0 and occluded > 0
    )
    report("C7", "optical flow: static zero, radial closed form, label transport", good,
           f"static max {static_max}, radial err {radial_err:.2e} px, "
           f"transport {wrong} wrong of {used} ({moved} moving)")
    assert good


def test_c8_event_remap(report):
    n = 128
    lut = build_lut(demo_intrinsics(320, 240), n)
    reverse = invert_lut(lut)
    rng = np.random.default_rng(8)
    streams, src = {}, []
    per_face = 200_000
    for fi, name in enumerate(FACE_NAMES):
        xs = rng.integers(0, n, per_face)
        ys = rng.integers(0, n, per_face)
        ts = np.sort(rng.integers(0, 50_000, per_face))
        pol = rng.choice(np.array([-1, 1]), per_face)
        streams[name] = EventStream.from_arrays(xs, ys, ts, pol, n, n)
        src.append(np.stack([fi * n * n + ys * n + xs, ts, pol], axis=1))
    src = np.concatenate(src)
    out, rejected = remap_events(streams, reverse)
    rec = out.records
    # fan-out counted from the forward table, independently of the reverse map
    fan = np.bincount(lut.nearest_index[lut.valid], minlength=5 * n * n)
    expect = np.repeat(src, fan[src[:, 0]], axis=0)
    got = np.stack([lut.nearest_index[rec["y"], rec["x"]], rec["t"], rec["pol"]], axis=1)
    expect = expect[np.lexsort(expect.T[::-1])]
    got = got[np.lexsort(got.T[::-1])]
    preserved = rejected == 0 and bool(lut.valid[rec["y"], rec["x"]].all()) and np.array_equal(got, expect)
    ordered = bool(np.all(np.diff(rec["t"]) >= 0))
    blue = render_events(EventStream.from_arrays([3], [2], [5], [1], 8, 6), (0, 10))
    red = render_events(EventStream.from_arrays([3], [2], [5], [-1], 8, 6), (0, 10))
    colours = (
        tuple(blue[2, 3]) == POSITIVE_COLOR == (0, 0, 255)
        and tuple(red[2, 3]) == NEGATIVE_COLOR == (255, 0, 0)
        and blue.reshape(-1, 3).any(axis=1).sum() == 1
    )
    good = preserved and ordered and colours and len(src) == 10**6
    report("C8", "event remap payloads, ordering and colours", good,
           f"{len(src)} in, {len(rec)} out, ordered {ordered}")
    assert good


def checker(x, y):
    return np.where((np.floor(x) + np.floor(y)) % 2 == 0, ROAD, ROAD_LINE).astype(np.uint8)


def boundary_distance(x, y):
    return np.minimum(np.abs(x - np.round(x)), np.abs(y - np.round(y)))


def test_c9_ipm(report):
    rig = demo_rig(320, 240)
    n = 256
    grid = BevGrid(16.0, 128)
    X, Y = grid.cell_centers()
    truth = checker(X, Y)
    painted = Scene([], paint=checker)
    projs, clean = {}, {}
    for name, calib in rig.items():
        intr, ext = calib.intrinsics, calib.extrinsic
        lut = build_lut_for(calib, n)
        faces = {f: r.semantic for f, r in render_cubemap(painted, ext, n).items()}
        sem = remap(lut, CubemapFaceSet(faces, "label"), mode="nearest")
        projs[name] = p = ipm_project(sem, intr, ext, grid)
        # footprint: ground point of the face pixel that ended up labelling each cell
        cam = ext.inverse().apply(np.stack([X, Y, np.zeros_like(X)], -1))
        pix, _ = project_fisheye_points(intr, cam)
        q = np.clip(np.floor(np.nan_to_num(pix) + 0.5).astype(int), 0, [intr.width - 1, intr.height - 1])
        k = lut.nearest_index[q[..., 1], q[..., 0]]
        face, rem = np.divmod(k, n * n)
        v, u = np.divmod(rem, n)
        dirs = np.stack([face_directions(n, fn) for fn in FACE_NAMES])[face, v, u] @ ext.rotation.T
        with np.errstate(divide="ignore", invalid="ignore"):
            s = -ext.translation[2] / dirs[..., 2]
        gx = ext.translation[0] + s * dirs[..., 0]
        gy = ext.translation[1] + s * dirs[..., 1]
        clean[name] = ~p.hit | (boundary_distance(X, Y) > np.hypot(gx - X, gy - Y))
    labels, hit = fuse_bev(projs)
    check = hit & np.logical_and.reduce(list(clean.values()))
    label_ok = bool(check.sum() > 0.5 * hit.sum() and np.array_equal(labels[check], truth[check]))

    curb = OrientedBox3D(1, SIDEWALK, [1.0, -3.0, 0.06], [4.0, 0.5, 0.06])
    scene = Scene([SceneObject(curb, SIDEWALK)])
    hgrid = BevGrid(16.0, 160)
    depths, cams = {}, {}
    for name, calib in rig.items():
        lut = build_lut_for(calib, n)
        faces = {f: r.depth for f, r in render_cubemap(scene, calib.extrinsic, n).items()}
        d = remap_depth(lut, CubemapFaceSet(faces, "depth"))
        depths[name] = np.where(d < 999.0, d, np.nan)
        cams[name] = (calib.intrinsics, calib.extrinsic)
    h = bev_height(depths, cams, hgrid)
    HX, HY = hgrid.cell_centers()
    half = hgrid.resolution / 2
    top = (np.abs(HX - 1.0) <= 4.0 - half) & (np.abs(HY + 3.0) <= 0.5 - half) & np.isfinite(h)
    curb_err = float(np.max(np.abs(h[top] - 0.12)))
    curb_ok = top.sum() > 100 and curb_err <= hgrid.resolution

    good = label_ok and curb_ok
    report("C9", "IPM painted grid and curb height", good,
           f"{int(check.sum())}/{int(hit.sum())} covered cells checked, curb error {curb_err:.3f} m "
           f"(resolution {hgrid.resolution:.3f})")
    assert good


def test_c10_statistics(fixture_root, report):
    P, F, T = PEDESTRIAN, FOUR_WHEELER, TWO_WHEELER
    frames = [
        FrameObjects({1: P, 2: P, 10: F}, {1: 0.0, 2: 0.3, 10: 0.6}),
        FrameObjects({3: P, 11: F, 20: T}, {3: 0.8, 11: 1.2, 20: 0.25}),
        FrameObjects({12: F, 13: F}, {12: 0.0, 13: 0.5}),
        FrameObjects({4: P, 5: P, 21: T}, {4: 1.0, 5: 0.1, 21: 0.76}),
    ]
    # hand counts over 4 images
    hand = {
        "Pedestrian": (75.0, 1.25, (1.0, 0.75, 0.5, 0.5, 0.0)),
        "Four-wheeler": (75.0, 1.0, (0.75, 0.75, 0.5, 0.25, 0.25)),
        "Two-wheeler": (50.0, 0.5, (0.5, 0.25, 0.25, 0.25, 0.0)),
    }
    s = object_statistics(frames)
    got = {c: (s.percent_images[c], s.objects_per_image[c], tuple(s.moving_per_image[c])) for c in hand}
    counts_ok = got == hand
    lines = s.table().splitlines()
    layout_ok = (
        "All objects" in lines[0] and "Moving objects" in lines[0]
        and lines[1].split()[-5:] == ["0.0", "0.25", "0.5", "0.75", "1.0"]
        and "% of images" in lines[1] and "objects/image" in lines[1]
        and lines[2].split() == ["Pedestrian", "75.00", "1.25", "|", "1.00", "0.75", "0.50", "0.50", "0.00"]
    )
    hist = class_pixel_histogram(scan_dataset(fixture_root))
    total = float(hist.percentages.sum())
    good = counts_ok and layout_ok and abs(total - 100.0) <= 1e-6
    report("C10", "object statistics table and class histogram", good,
           f"21 hand-counted values match: {counts_ok}, histogram sum {total!r}")
    assert good


def test_c11_determinism(fixture_root, tmp_path, report):
    outs = []
    for k, workers in enumerate((1, 1, 8)):
        out = tmp_path / f"run{k}"
        code = main(["all", "--input", str(fixture_root), "--output", str(out), "--workers", str(workers),
                     "--summary", str(tmp_path / f"run{k}.json")])
        assert code == 0
        outs.append(tree(out))
    same_rerun = outs[0] == outs[1]
    same_workers = outs[0] == outs[2]
    good = same_rerun and same_workers and len(outs[0]) > 100
    report("C11", "byte-identical output trees", good,
           f"{len(outs[0])} files; rerun identical {same_rerun}, workers 1 vs 8 identical {same_workers}")
    assert good


def test_c12_throughput(tmp_path, report):
    root = tmp_path / "export"
    write_fixture_dataset(root, n_frames=2, face_size=FACE_512, fisheye_size=(1280, 966))
    out = tmp_path / "out"
    assert main(["build-lut", "--input", str(root), "--output", str(out), "--summary", str(tmp_path / "a.json")]) == 0
    t0 = time.perf_counter()
    code = main(["all", "--input", str(root), "--output", str(out), "--summary", str(tmp_path / "b.json")])
    per_frame = (time.perf_counter() - t0) / 2
    cores = os.cpu_count() or 1
    # documented, not a gate: the target assumes a multicore desktop
    report("C12", "throughput (documented, not gated)", per_frame < 2.0,
           f"{per_frame:.1f} s/frame at 1280x966, 4 cameras, all modalities, {cores} core(s)")
    assert code == 0
