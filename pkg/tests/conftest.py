import numpy as np
import pytest

from flowtrack.pose_model import POSETRACK15, Instance, Pose


def random_pose(rng, n=15, lo=10.0, hi=90.0, visible=None, conf=None, schema=POSETRACK15):
    xy = rng.uniform(lo, hi, size=(n, 2))
    return Pose.from_arrays(xy, conf, visible, schema)


def make_pose(points, schema=POSETRACK15, visible=None, conf=None):
    """Pose from a short list of points; remaining joints repeat the last one."""
    pts = list(points)
    pts += [pts[-1]] * (schema.n_joints - len(pts))
    return Pose.from_arrays(pts, conf, visible, schema)


def instance_at(x, y, track_id=None, size=20.0, score=None):
    """Stick-like pose whose joints fill the square [x, x+size] x [y, y+size]."""
    t = np.linspace(0.0, 1.0, 15)
    xy = np.stack([x + size * t, y + size * t[::-1]], axis=1)
    return Instance(Pose.from_arrays(xy), track_id, score)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, detail in sorted(RESULTS):
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}: {title} | {detail}")
