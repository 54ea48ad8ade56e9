"""Joints, poses, tracked instances and boxes.

All types are frozen dataclasses. Boxes use continuous corner coordinates
``(x_min, y_min, x_max, y_max)`` in pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from functools import cached_property
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import DegenerateBox, InvalidConfig, NoJoints, SchemaMismatch


@dataclass(frozen=True)
class JointSchema:
    """Keypoint layout: joint names, OKS falloff constants and mirror pairs."""

    name: str
    names: Tuple[str, ...]
    kappa: Tuple[float, ...]
    flip_pairs: Tuple[Tuple[int, int], ...] = ()
    # report groups, e.g. "Head" -> joint indices
    groups: Tuple[Tuple[str, Tuple[int, ...]], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "kappa", tuple(float(k) for k in self.kappa))
        object.__setattr__(self, "flip_pairs", tuple((int(a), int(b)) for a, b in self.flip_pairs))
        object.__setattr__(self, "groups", tuple((g, tuple(ix)) for g, ix in self.groups))
        n = len(self.names)
        if n == 0:
            raise InvalidConfig(f"schema {self.name!r} has no joints")
        if len(self.kappa) != n:
            raise InvalidConfig(f"schema {self.name!r}: {len(self.kappa)} kappa values for {n} joints")
        if not all(k > 0 and math.isfinite(k) for k in self.kappa):
            raise InvalidConfig(f"schema {self.name!r}: kappa must be strictly positive")
        seen = set()
        for a, b in self.flip_pairs:
            if not (0 <= a < n and 0 <= b < n) or a == b:
                raise InvalidConfig(f"schema {self.name!r}: bad flip pair ({a}, {b})")
            if a in seen or b in seen:
                raise InvalidConfig(f"schema {self.name!r}: joint listed in two flip pairs")
            seen.update((a, b))

    @property
    def n_joints(self) -> int:
        return len(self.names)

    def flip_permutation(self) -> np.ndarray:
        """Index map sending each joint channel to its left/right counterpart."""
        perm = np.arange(self.n_joints)
        for a, b in self.flip_pairs:
            perm[a], perm[b] = b, a
        return perm


POSETRACK15 = JointSchema(
    name="posetrack15",
    names=(
        "right_ankle", "right_knee", "right_hip", "left_hip", "left_knee", "left_ankle",
        "right_wrist", "right_elbow", "right_shoulder", "left_shoulder", "left_elbow",
        "left_wrist", "head_bottom", "nose", "head_top",
    ),
    kappa=(0.1,) * 15,
    flip_pairs=((0, 5), (1, 4), (2, 3), (6, 11), (7, 10), (8, 9)),
    groups=(
        ("Head", (12, 13, 14)), ("Sho.", (8, 9)), ("Elb.", (7, 10)), ("Wri.", (6, 11)),
        ("Hip", (2, 3)), ("Knee", (1, 4)), ("Ank.", (0, 5)),
    ),
)

_COCO_SIGMAS = (0.26, 0.25, 0.25, 0.35, 0.35, 0.79, 0.79, 0.72, 0.72,
                0.62, 0.62, 1.07, 1.07, 0.87, 0.87, 0.89, 0.89)

COCO17 = JointSchema(
    name="coco17",
    names=(
        "nose", "left_eye", "right_eye", "left_ear", "right_ear",
        "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
        "left_wrist", "right_wrist", "left_hip", "right_hip",
        "left_knee", "right_knee", "left_ankle", "right_ankle",
    ),
    # COCO publishes sigma with the falloff written as (2*sigma)^2
    kappa=tuple(2 * s / 10.0 for s in _COCO_SIGMAS),
    flip_pairs=((1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16)),
    groups=(
        ("Head", (0, 1, 2, 3, 4)), ("Sho.", (5, 6)), ("Elb.", (7, 8)), ("Wri.", (9, 10)),
        ("Hip", (11, 12)), ("Knee", (13, 14)), ("Ank.", (15, 16)),
    ),
)

SCHEMAS: Dict[str, JointSchema] = {s.name: s for s in (POSETRACK15, COCO17)}


def get_schema(name: str) -> JointSchema:
    try:
        return SCHEMAS[name]
    except KeyError:
        raise SchemaMismatch(f"unknown joint schema {name!r}; known: {sorted(SCHEMAS)}") from None


@dataclass(frozen=True)
class Joint:
    x: float
    y: float
    confidence: float = 1.0
    visible: bool = True

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"joint coordinates must be finite, got ({self.x}, {self.y})")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"joint confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class Pose:
    joints: Tuple[Joint, ...]
    schema: JointSchema = POSETRACK15

    def __post_init__(self):
        object.__setattr__(self, "joints", tuple(self.joints))
        if len(self.joints) != self.schema.n_joints:
            raise SchemaMismatch(
                f"schema {self.schema.name!r} expects {self.schema.n_joints} joints, got {len(self.joints)}"
            )

    @classmethod
    def from_arrays(cls, xy, confidence=None, visible=None, schema: JointSchema = POSETRACK15) -> "Pose":
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        n = len(xy)
        conf = np.ones(n) if confidence is None else np.asarray(confidence, dtype=float)
        vis = np.ones(n, dtype=bool) if visible is None else np.asarray(visible, dtype=bool)
        joints = tuple(
            Joint(float(x), float(y), float(c), bool(v)) for (x, y), c, v in zip(xy, conf, vis)
        )
        return cls(joints, schema)

    # cached array views; safe because the dataclass is frozen
    @cached_property
    def xy(self) -> np.ndarray:
        a = np.array([(j.x, j.y) for j in self.joints], dtype=float)
        a.setflags(write=False)
        return a

    @cached_property
    def confidences(self) -> np.ndarray:
        a = np.array([j.confidence for j in self.joints], dtype=float)
        a.setflags(write=False)
        return a

    @cached_property
    def visibility(self) -> np.ndarray:
        a = np.array([j.visible for j in self.joints], dtype=bool)
        a.setflags(write=False)
        return a

    def with_coords(self, xy, visible=None) -> "Pose":
        """Same confidences (and visibility unless given) at new coordinates."""
        vis = self.visibility if visible is None else visible
        return Pose.from_arrays(xy, self.confidences, vis, self.schema)

    def drop_joints(self, threshold: float) -> "Pose":
        """Mark joints with confidence below ``threshold`` invisible."""
        keep = self.visibility & (self.confidences >= threshold)
        if np.array_equal(keep, self.visibility):
            return self
        return Pose.from_arrays(self.xy, self.confidences, keep, self.schema)

    def __len__(self):
        return len(self.joints)


@dataclass(frozen=True)
class Instance:
    """A pose with an optional track id. ``score`` defaults to the mean joint confidence."""

    pose: Pose
    id: Optional[int] = None
    score: Optional[float] = None

    def __post_init__(self):
        if self.id is not None and (int(self.id) != self.id or self.id < 0):
            raise ValueError(f"track id must be a non-negative integer, got {self.id!r}")
        if self.score is None:
            object.__setattr__(self, "score", float(np.mean(self.pose.confidences)))
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"instance score {self.score} outside [0, 1]")

    def with_id(self, track_id: int) -> "Instance":
        return replace(self, id=track_id)


class BoxSource(str, Enum):
    DETECTOR = "detector"
    FLOW = "flow"


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    score: float = 1.0
    source: BoxSource = BoxSource.DETECTOR

    def __post_init__(self):
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise ValueError(f"malformed box {self.as_tuple()}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"box score {self.score} outside [0, 1]")
        object.__setattr__(self, "source", BoxSource(self.source))

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def contains(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max


def _centered(box: BBox, w: float, h: float) -> BBox:
    cx, cy = box.center
    return replace(box, x_min=cx - w / 2.0, y_min=cy - h / 2.0, x_max=cx + w / 2.0, y_max=cy + h / 2.0)


def bbox_from_pose(pose: Pose, visible_only: bool = True) -> BBox:
    """Tightest axis-aligned box around the (visible) joints.

    The score is the mean confidence of the selected joints.
    """
    mask = pose.visibility if visible_only else np.ones(len(pose), dtype=bool)
    if not mask.any():
        raise NoJoints("pose has no joints to bound" + (" (none visible)" if visible_only else ""))
    pts = pose.xy[mask]
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    score = float(np.clip(pose.confidences[mask].mean(), 0.0, 1.0))
    return BBox(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]), score=score)


def expand_box(box: BBox, fraction: float) -> BBox:
    """Grow width and height by ``fraction`` (half on each side), keeping the center."""
    if fraction < 0:
        raise ValueError("expansion fraction must be non-negative")
    if fraction == 0:
        return box
    return _centered(box, box.width * (1.0 + fraction), box.height * (1.0 + fraction))


def fix_aspect_ratio(box: BBox, target_ratio: float = 4.0 / 3.0) -> BBox:
    """Extend one side symmetrically so that height / width == target_ratio."""
    if not target_ratio > 0:
        raise ValueError("target ratio must be positive")
    w, h = box.width, box.height
    if w == 0 and h == 0:
        raise DegenerateBox(f"cannot fix aspect ratio of point box {box.as_tuple()}")
    if w > 0 and math.isclose(h / w, target_ratio, rel_tol=1e-12):
        return box
    if w == 0 or h / w > target_ratio:
        return _centered(box, h / target_ratio, h)
    return _centered(box, w, w * target_ratio)
