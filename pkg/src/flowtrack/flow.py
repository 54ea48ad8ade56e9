"""Dense flow fields, joint propagation and flow-box generation.

Also reads and writes Middlebury ``.flo`` files.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NoJoints, ParseError, ShapeMismatch
from .pose_model import BBox, BoxSource, Instance, Pose, bbox_from_pose, expand_box

FLO_MAGIC = 202021.25
FLO_TAG = b"PIEH"


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel displacement ``(u, v)`` in pixels, arrays of shape (height, width)."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.array(self.u, dtype=float)
        v = np.array(self.v, dtype=float)
        if u.ndim != 2 or u.shape != v.shape:
            raise ShapeMismatch(f"u and v must be equal 2D arrays, got {u.shape} and {v.shape}")
        if u.size == 0:
            raise ShapeMismatch("flow field must be non-empty")
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise ValueError("flow field contains non-finite values")
        u.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.u.shape

    @classmethod
    def zeros(cls, width: int, height: int) -> "FlowField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    @classmethod
    def constant(cls, width: int, height: int, dx: float, dy: float) -> "FlowField":
        return cls(np.full((height, width), float(dx)), np.full((height, width), float(dy)))

    def __eq__(self, other):
        if not isinstance(other, FlowField):
            return NotImplemented
        return np.array_equal(self.u, other.u) and np.array_equal(self.v, other.v)

    __hash__ = None


def _bilinear(u: np.ndarray, v: np.ndarray, xs, ys):
    h, w = u.shape
    xs = np.clip(np.asarray(xs, dtype=float), 0.0, w - 1)
    ys = np.clip(np.asarray(ys, dtype=float), 0.0, h - 1)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = xs - x0
    wy = ys - y0
    out = []
    for a in (u, v):
        top = a[y0, x0] * (1.0 - wx) + a[y0, x1] * wx
        bottom = a[y1, x0] * (1.0 - wx) + a[y1, x1] * wx
        out.append(top * (1.0 - wy) + bottom * wy)
    return out[0], out[1]


def sample_flow_many(f: FlowField, xs, ys) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`sample_flow`."""
    return _bilinear(f.u, f.v, xs, ys)


def sample_flow(f: FlowField, x: float, y: float) -> Tuple[float, float]:
    """Bilinear flow lookup; coordinates outside the field clamp to the border."""
    dx, dy = _bilinear(f.u, f.v, x, y)
    return float(dx), float(dy)


def propagate_pose(pose: Pose, f: FlowField, out_of_frame_margin: Optional[float] = None) -> Pose:
    """Move every joint by the flow sampled at its location.

    Confidences are kept. Visibility is kept too, unless
    ``out_of_frame_margin`` is given: joints that land farther than that many
    pixels outside the field are then marked invisible.
    """
    xy = pose.xy
    dx, dy = sample_flow_many(f, xy[:, 0], xy[:, 1])
    moved = np.stack([xy[:, 0] + dx, xy[:, 1] + dy], axis=1)
    vis = pose.visibility
    if out_of_frame_margin is not None:
        m = out_of_frame_margin
        inside = ((moved[:, 0] >= -m) & (moved[:, 0] <= f.width - 1 + m)
                  & (moved[:, 1] >= -m) & (moved[:, 1] <= f.height - 1 + m))
        vis = vis & inside
    return pose.with_coords(moved, vis)


def propagate_pose_through(pose: Pose, flows: Sequence[FlowField],
                           out_of_frame_margin: Optional[float] = None) -> Pose:
    """Propagate across consecutive fields, one hop at a time.

    This evaluates the composed displacement exactly at the joints rather
    than interpolating a materialized composed grid.
    """
    for f in flows:
        pose = propagate_pose(pose, f, out_of_frame_margin)
    return pose


def compose_flow(f_ab: FlowField, f_bc: FlowField) -> FlowField:
    """Displacement a->c: ``F_ab(p) + F_bc(p + F_ab(p))`` at every pixel ``p``."""
    if f_ab.shape != f_bc.shape:
        raise ShapeMismatch(f"cannot compose flows of shape {f_ab.shape} and {f_bc.shape}")
    ys, xs = np.mgrid[0:f_ab.height, 0:f_ab.width].astype(float)
    du, dv = sample_flow_many(f_bc, xs + f_ab.u, ys + f_ab.v)
    return FlowField(f_ab.u + du, f_ab.v + dv)


def flow_box_gen(instances: Iterable[Instance], f: FlowField, expand_fraction: float = 0.15,
                 score_decay: float = 1.0, out_of_frame_margin: Optional[float] = None) -> List[BBox]:
    """Boxes around each instance's flow-propagated joints, expanded by ``expand_fraction``.

    Instances whose joints all end up invisible produce no box.
    """
    boxes = []
    for inst in instances:
        moved = propagate_pose(inst.pose, f, out_of_frame_margin)
        try:
            box = bbox_from_pose(moved, visible_only=True)
        except NoJoints:
            continue
        box = expand_box(box, expand_fraction)
        score = min(max(inst.score * score_decay, 0.0), 1.0)
        boxes.append(replace(box, score=score, source=BoxSource.FLOW))
    return boxes


def write_flo(path: Union[str, os.PathLike], f: FlowField) -> None:
    """Write a Middlebury .flo file (little-endian float32, interleaved u/v)."""
    data = np.empty((f.height, f.width, 2), dtype="<f4")
    data[..., 0] = f.u
    data[..., 1] = f.v
    header = FLO_TAG + struct.pack("<ii", f.width, f.height)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())
    os.replace(tmp, path)


def read_flo(path: Union[str, os.PathLike]) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise ParseError("truncated .flo header", path=path, offset=len(raw))
    magic = struct.unpack("<f", raw[:4])[0]
    if magic != FLO_MAGIC:
        raise ParseError(f"bad .flo magic {magic!r}, expected {FLO_MAGIC}", path=path, offset=0)
    width, height = struct.unpack("<ii", raw[4:12])
    if width <= 0 or height <= 0:
        raise ParseError(f"bad .flo dimensions {width}x{height}", path=path, offset=4)
    expected = 12 + 8 * width * height
    if len(raw) != expected:
        raise ParseError(f".flo payload is {len(raw)} bytes, expected {expected}", path=path,
                         offset=min(len(raw), expected))
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(height, width, 2)
    return FlowField(data[..., 0].astype(float), data[..., 1].astype(float))
