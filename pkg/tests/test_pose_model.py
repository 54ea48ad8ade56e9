import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowtrack.errors import DegenerateBox, InvalidConfig, NoJoints, SchemaMismatch
from flowtrack.pose_model import (COCO17, POSETRACK15, BBox, BoxSource, Instance, Joint, JointSchema, Pose,
                                  bbox_from_pose, expand_box, fix_aspect_ratio, get_schema)

from conftest import make_pose, random_pose


def test_bbox_from_pose_two_joints():
    box = bbox_from_pose(make_pose([(0, 0), (100, 200)]))
    assert box.as_tuple() == (0, 0, 100, 200)


def test_bbox_from_pose_single_joint_degenerate():
    box = bbox_from_pose(make_pose([(5, 5)]))
    assert box.as_tuple() == (5, 5, 5, 5)


def test_bbox_from_pose_matches_exhaustive_scan(rng):
    for _ in range(50):
        pose = random_pose(rng)
        vis = rng.random(15) < 0.5
        vis[rng.integers(15)] = True
        pose = Pose.from_arrays(pose.xy, None, vis)
        box = bbox_from_pose(pose)
        xmin = ymin = math.inf
        xmax = ymax = -math.inf
        for j in pose.joints:
            if j.visible:
                xmin, xmax = min(xmin, j.x), max(xmax, j.x)
                ymin, ymax = min(ymin, j.y), max(ymax, j.y)
        assert box.as_tuple() == (xmin, ymin, xmax, ymax)
        assert all(box.contains(j.x, j.y) for j in pose.joints if j.visible)


def test_bbox_from_pose_score_is_mean_confidence():
    conf = np.linspace(0.1, 0.9, 15)
    box = bbox_from_pose(make_pose([(0, 0), (1, 1)], conf=conf))
    assert box.score == pytest.approx(conf.mean())


def test_bbox_from_pose_no_visible_joints():
    pose = make_pose([(1, 2)], visible=np.zeros(15, bool))
    with pytest.raises(NoJoints):
        bbox_from_pose(pose)
    assert bbox_from_pose(pose, visible_only=False).as_tuple() == (1, 2, 1, 2)


def test_expand_box_fifteen_percent():
    box = expand_box(BBox(0, 0, 100, 200), 0.15)
    assert box.as_tuple() == pytest.approx((-7.5, -15, 107.5, 215))


def test_expand_box_zero_is_identity():
    b = BBox(3, 4, 10, 12, 0.7)
    assert expand_box(b, 0.0) == b


def test_expand_box_doubling():
    assert expand_box(BBox(10, 10, 20, 20), 1.0).as_tuple() == (5, 5, 25, 25)


def test_expand_box_rejects_negative():
    with pytest.raises(ValueError):
        expand_box(BBox(0, 0, 1, 1), -0.1)


@given(st.floats(0, 2), st.floats(0, 2), st.floats(1, 100), st.floats(1, 100))
def test_expand_box_composes_multiplicatively(f1, f2, w, h):
    b = BBox(0, 0, w, h)
    e = expand_box(expand_box(b, f1), f2)
    assert e.width == pytest.approx(w * (1 + f1) * (1 + f2), rel=1e-9)
    assert e.center == pytest.approx(b.center)


def test_fix_aspect_ratio_square():
    b = fix_aspect_ratio(BBox(0, 0, 30, 30), 4 / 3)
    assert b.as_tuple() == pytest.approx((0, -5, 30, 35))
    assert b.height / b.width == pytest.approx(4 / 3)


def test_fix_aspect_ratio_tall():
    b = fix_aspect_ratio(BBox(0, 0, 30, 80), 4 / 3)
    assert b.as_tuple() == pytest.approx((-15, 0, 45, 80))
    assert b.height / b.width == pytest.approx(4 / 3)


def test_fix_aspect_ratio_fixed_point():
    b = BBox(0, 0, 30, 40)
    assert fix_aspect_ratio(b, 4 / 3) == b


def test_fix_aspect_ratio_degenerate():
    with pytest.raises(DegenerateBox):
        fix_aspect_ratio(BBox(1, 1, 1, 1))
    # a line box can still be extended
    b = fix_aspect_ratio(BBox(0, 0, 0, 8))
    assert b.width == pytest.approx(6)


@settings(max_examples=200)
@given(st.floats(0.01, 500), st.floats(0.01, 500), st.floats(0.1, 10))
def test_fix_aspect_ratio_properties(w, h, ratio):
    b = BBox(-w / 2, -h / 2, w / 2, h / 2)
    f = fix_aspect_ratio(b, ratio)
    assert abs(f.height / f.width - ratio) < 1e-9 * max(1.0, ratio)
    assert f.width >= w * (1 - 1e-12) and f.height >= h * (1 - 1e-12)
    assert f.center == pytest.approx(b.center, abs=1e-9)
    assert fix_aspect_ratio(f, ratio) == f


def test_joint_validation():
    with pytest.raises(ValueError):
        Joint(0, 0, 1.5)
    with pytest.raises(ValueError):
        Joint(float("nan"), 0)


def test_pose_length_checked_against_schema():
    with pytest.raises(SchemaMismatch):
        Pose(tuple(Joint(0, 0) for _ in range(14)))
    assert len(Pose(tuple(Joint(0, 0) for _ in range(17)), COCO17)) == 17


def test_pose_arrays_are_read_only(rng):
    p = random_pose(rng)
    with pytest.raises(ValueError):
        p.xy[0, 0] = 1.0


def test_drop_joints_marks_low_confidence_invisible():
    conf = np.full(15, 0.9)
    conf[[2, 5]] = 0.3
    p = make_pose([(0, 0)], conf=conf).drop_joints(0.4)
    assert list(np.nonzero(~p.visibility)[0]) == [2, 5]
    assert p.xy.shape == (15, 2)


def test_instance_score_defaults_to_mean_confidence():
    conf = np.linspace(0, 1, 15)
    inst = Instance(make_pose([(0, 0)], conf=conf))
    assert inst.score == pytest.approx(0.5)
    assert inst.id is None
    assert inst.with_id(4).id == 4
    with pytest.raises(ValueError):
        Instance(inst.pose, id=-1)


def test_bbox_validation():
    with pytest.raises(ValueError):
        BBox(2, 0, 1, 1)
    with pytest.raises(ValueError):
        BBox(0, 0, 1, 1, score=1.2)
    assert BBox(0, 0, 1, 1, source="flow").source is BoxSource.FLOW


def test_schema_definitions():
    assert POSETRACK15.n_joints == 15 and COCO17.n_joints == 17
    assert all(k == 0.1 for k in POSETRACK15.kappa)
    for schema in (POSETRACK15, COCO17):
        perm = schema.flip_permutation()
        assert np.array_equal(perm[perm], np.arange(schema.n_joints))
        grouped = sorted(i for _, idx in schema.groups for i in idx)
        assert grouped == list(range(schema.n_joints))
    assert get_schema("coco17") is COCO17
    with pytest.raises(SchemaMismatch):
        get_schema("mpii16")


def test_schema_validation():
    with pytest.raises(InvalidConfig):
        JointSchema("x", ("a", "b"), (0.1, 0.0))
    with pytest.raises(InvalidConfig):
        JointSchema("x", ("a", "b"), (0.1, 0.1), ((0, 2),))
    with pytest.raises(InvalidConfig):
        JointSchema("x", ("a", "b", "c"), (0.1,) * 3, ((0, 1), (1, 2)))
