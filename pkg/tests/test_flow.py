import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowtrack.errors import ParseError, ShapeMismatch
from flowtrack.flow import (FlowField, compose_flow, flow_box_gen, propagate_pose, propagate_pose_through,
                            read_flo, sample_flow, sample_flow_many, write_flo)
from flowtrack.pose_model import BoxSource, Instance, Pose, bbox_from_pose, expand_box

from conftest import random_pose


def affine_field(rng, width=32, height=32, max_disp=0.9):
    """Random affine field with displacements below ``max_disp`` pixels."""
    ys, xs = np.mgrid[0:height, 0:width].astype(float)
    a = rng.uniform(-0.02, 0.02, size=(2, 2))
    cx, cy = (width - 1) / 2, (height - 1) / 2
    b = rng.uniform(-0.3, 0.3, size=2)
    u = b[0] + a[0, 0] * (xs - cx) + a[0, 1] * (ys - cy)
    v = b[1] + a[1, 0] * (xs - cx) + a[1, 1] * (ys - cy)
    assert np.abs(u).max() < max_disp and np.abs(v).max() < max_disp
    return FlowField(u, v)


def smooth_field(rng, width=32, height=32, amp=0.8, n_waves=3):
    """Sum of a few low-frequency sinusoids, displacement below ``amp`` pixels."""
    ys, xs = np.mgrid[0:height, 0:width].astype(float)
    out = []
    for _ in range(2):
        acc = np.zeros((height, width))
        for _ in range(n_waves):
            kx, ky = rng.uniform(-0.3, 0.3, size=2)
            acc += np.sin(kx * xs + ky * ys + rng.uniform(0, 2 * np.pi))
        out.append(amp * acc / n_waves)
    return FlowField(*out)


def test_sample_constant_field():
    f = FlowField.constant(20, 10, 5, -3)
    for x, y in [(0, 0), (3.7, 8.2), (19, 9), (-5, 40)]:
        assert sample_flow(f, x, y) == (5.0, -3.0)


def test_sample_integer_coordinate_is_exact(rng):
    f = FlowField(rng.normal(size=(6, 7)), rng.normal(size=(6, 7)))
    for _ in range(20):
        x, y = int(rng.integers(7)), int(rng.integers(6))
        assert sample_flow(f, x, y) == (f.u[y, x], f.v[y, x])


def test_sample_midpoint():
    u = np.array([[2.0, 4.0], [2.0, 4.0]])
    f = FlowField(u, np.zeros_like(u))
    assert sample_flow(f, 0.5, 0.0) == (3.0, 0.0)


def test_sample_clamps_to_border(rng):
    f = FlowField(rng.normal(size=(5, 5)), rng.normal(size=(5, 5)))
    assert sample_flow(f, -3.0, 2.0) == sample_flow(f, 0.0, 2.0)
    assert sample_flow(f, 4.0, 99.0) == sample_flow(f, 4.0, 4.0)


def test_sample_matches_hand_bilinear(rng):
    u, v = rng.normal(size=(2, 8, 9))
    f = FlowField(u, v)
    for _ in range(50):
        x, y = rng.uniform(0, 8), rng.uniform(0, 7)
        x0, y0 = int(x), int(y)
        x1, y1 = min(x0 + 1, 8), min(y0 + 1, 7)
        fx, fy = x - x0, y - y0
        want = ((1 - fx) * (1 - fy) * u[y0, x0] + fx * (1 - fy) * u[y0, x1]
                + (1 - fx) * fy * u[y1, x0] + fx * fy * u[y1, x1])
        assert sample_flow(f, x, y)[0] == pytest.approx(want, abs=1e-12)


@settings(max_examples=100)
@given(st.integers(0, 2 ** 31), st.floats(0, 14), st.floats(0, 14), st.floats(1e-6, 1.0))
def test_sample_is_lipschitz(seed, x, y, eps):
    r = np.random.default_rng(seed)
    u, v = r.normal(size=(2, 16, 16))
    f = FlowField(u, v)
    lip = max(np.abs(np.diff(a, axis=ax)).max() for a in (u, v) for ax in (0, 1))
    for dx, dy in [(eps, 0), (0, eps)]:
        a = np.array(sample_flow(f, x, y))
        b = np.array(sample_flow(f, x + dx, y + dy))
        assert np.max(np.abs(a - b)) <= lip * eps + 1e-12


def test_field_validation():
    with pytest.raises(ShapeMismatch):
        FlowField(np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        FlowField(np.array([[np.nan]]), np.zeros((1, 1)))
    f = FlowField.zeros(4, 3)
    assert (f.width, f.height) == (4, 3)
    assert f == FlowField.zeros(4, 3)
    with pytest.raises(ValueError):
        f.u[0, 0] = 1.0


def test_propagate_zero_flow_identity(rng):
    pose = random_pose(rng)
    moved = propagate_pose(pose, FlowField.zeros(100, 100))
    assert np.array_equal(moved.xy, pose.xy)
    assert np.array_equal(moved.confidences, pose.confidences)


def test_propagate_constant_flow():
    pose = Pose.from_arrays(np.full((15, 2), 10.0), np.linspace(0.2, 1, 15))
    moved = propagate_pose(pose, FlowField.constant(50, 50, 5, -3))
    assert np.array_equal(moved.xy[0], [15.0, 7.0])
    assert np.array_equal(moved.confidences, pose.confidences)
    assert np.array_equal(moved.visibility, pose.visibility)


def test_propagate_out_of_frame_margin():
    xy = np.full((15, 2), 5.0)
    xy[0] = (45.0, 5.0)
    pose = Pose.from_arrays(xy)
    f = FlowField.constant(50, 50, 10, 0)
    assert propagate_pose(pose, f).visibility.all()
    moved = propagate_pose(pose, f, out_of_frame_margin=2.0)
    assert not moved.visibility[0] and moved.visibility[1:].all()


def test_compose_zero():
    z = FlowField.zeros(8, 8)
    assert compose_flow(z, z) == z


def test_compose_constants():
    c = compose_flow(FlowField.constant(8, 8, 2, 0), FlowField.constant(8, 8, 3, 1))
    assert c == FlowField.constant(8, 8, 5, 1)


def test_compose_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        compose_flow(FlowField.zeros(4, 4), FlowField.zeros(5, 4))


def _sequential(points, fields):
    """Step each point through every field by independent bilinear lookups."""
    out = []
    for x, y in points:
        for f in fields:
            dx, dy = sample_flow(f, x, y)
            x, y = x + dx, y + dy
        out.append((x, y))
    return np.array(out)


def test_compose_matches_sequential_at_grid_points(rng):
    for _ in range(5):
        f, g = smooth_field(rng), smooth_field(rng)
        c = compose_flow(f, g)
        idx = rng.integers(0, 32, size=(100, 2))
        pts = idx.astype(float)
        composed = pts + np.stack([c.u[idx[:, 1], idx[:, 0]], c.v[idx[:, 1], idx[:, 0]]], axis=1)
        assert np.max(np.abs(composed - _sequential(pts, [f, g]))) <= 1e-9


def test_compose_matches_sequential_subpixel_affine(rng):
    for _ in range(5):
        f, g = affine_field(rng), affine_field(rng)
        c = compose_flow(f, g)
        pts = rng.uniform(2, 29, size=(100, 2))
        dx, dy = sample_flow_many(c, pts[:, 0], pts[:, 1])
        composed = pts + np.stack([dx, dy], axis=1)
        assert np.max(np.abs(composed - _sequential(pts, [f, g]))) <= 1e-9


def test_compose_associative_constants():
    f, g, h = (FlowField.constant(8, 8, *d) for d in [(0.5, 0.25), (-1, 2), (0.125, -0.75)])
    assert compose_flow(compose_flow(f, g), h) == compose_flow(f, compose_flow(g, h))


def test_compose_associative_affine(rng):
    for _ in range(5):
        f, g, h = affine_field(rng), affine_field(rng), affine_field(rng)
        a = compose_flow(compose_flow(f, g), h)
        b = compose_flow(f, compose_flow(g, h))
        # away from the border no lookup is clamped, so bilinear sampling is exact
        inner = (slice(4, -4), slice(4, -4))
        assert max(np.abs(a.u - b.u)[inner].max(), np.abs(a.v - b.v)[inner].max()) < 1e-6


def test_propagate_through_is_hop_by_hop(rng):
    fields = [smooth_field(rng) for _ in range(3)]
    pose = random_pose(rng, lo=1, hi=30)
    moved = propagate_pose_through(pose, fields)
    assert np.allclose(moved.xy, _sequential(pose.xy, fields), atol=1e-12)
    assert propagate_pose_through(pose, []) == pose


def test_flow_box_gen_empty():
    assert flow_box_gen([], FlowField.zeros(10, 10)) == []


def test_flow_box_gen_zero_flow(rng):
    inst = Instance(random_pose(rng), 3, 0.8)
    (box,) = flow_box_gen([inst], FlowField.zeros(100, 100), 0.15)
    want = expand_box(bbox_from_pose(inst.pose), 0.15)
    assert box.as_tuple() == pytest.approx(want.as_tuple())
    assert box.source is BoxSource.FLOW
    assert box.score == 0.8


def test_flow_box_gen_translates_and_decays(rng):
    inst = Instance(random_pose(rng), None, 0.8)
    (box,) = flow_box_gen([inst], FlowField.constant(200, 200, 7, -2), 0.0, score_decay=0.5)
    ref = bbox_from_pose(inst.pose)
    assert box.as_tuple() == pytest.approx((ref.x_min + 7, ref.y_min - 2, ref.x_max + 7, ref.y_max - 2))
    assert box.score == pytest.approx(0.4)


def test_flow_box_gen_skips_invisible_instances():
    pose = Pose.from_arrays(np.ones((15, 2)), None, np.zeros(15, bool))
    assert flow_box_gen([Instance(pose, 0, 1.0)], FlowField.zeros(4, 4)) == []


def test_flo_round_trip_bit_exact(tmp_path, rng):
    u = rng.normal(size=(7, 9)).astype(np.float32).astype(float)
    v = rng.normal(size=(7, 9)).astype(np.float32).astype(float)
    f = FlowField(u, v)
    p = tmp_path / "a.flo"
    write_flo(p, f)
    g = read_flo(p)
    assert g == f
    write_flo(tmp_path / "b.flo", g)
    assert (tmp_path / "b.flo").read_bytes() == p.read_bytes()


def test_flo_layout(tmp_path):
    f = FlowField(np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]]))
    p = tmp_path / "x.flo"
    write_flo(p, f)
    raw = p.read_bytes()
    assert raw[:4] == b"PIEH"
    assert struct.unpack("<f", raw[:4])[0] == 202021.25
    assert struct.unpack("<ii", raw[4:12]) == (2, 1)
    assert struct.unpack("<4f", raw[12:]) == (1.0, 3.0, 2.0, 4.0)
    assert not list(tmp_path.glob("*.tmp"))


def test_flo_bad_files(tmp_path):
    p = tmp_path / "bad.flo"
    p.write_bytes(b"XXXX" + struct.pack("<ii", 1, 1) + b"\0" * 8)
    with pytest.raises(ParseError, match="magic"):
        read_flo(p)
    p.write_bytes(b"PIEH" + struct.pack("<ii", 2, 2) + b"\0" * 8)
    with pytest.raises(ParseError, match="expected 44"):
        read_flo(p)
    p.write_bytes(b"PIE")
    with pytest.raises(ParseError):
        read_flo(p)
