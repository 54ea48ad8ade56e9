"""Synthetic scenes: ground-truth tracks, consistent flow, oracle detector and pose providers.

Actors are rigid 15-joint stick figures that translate between frames. The
flow field of each gap equals each actor's displacement over the actor's
region and is zero elsewhere, with a cosine blending band in between.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidScenario
from .flow import FlowField
from .metrics import GroundTruth, GTPerson
from .pose_model import POSETRACK15, BBox, Instance, Pose, bbox_from_pose, expand_box
from .similarity import iou

# posetrack15 joint order; x relative to the body axis, y down from the head top,
# both in units of actor height
STICK15 = np.array([
    [-0.10, 1.00], [-0.09, 0.75], [-0.08, 0.52], [0.08, 0.52], [0.09, 0.75], [0.10, 1.00],
    [-0.20, 0.50], [-0.17, 0.35], [-0.12, 0.20], [0.12, 0.20], [0.17, 0.35], [0.20, 0.50],
    [0.00, 0.17], [0.00, 0.08], [0.00, 0.00],
])
HEAD_FRACTION = 0.17  # head top to head bottom, in actor heights
CORE_MARGIN = 2.0  # px of exact flow around an actor's joints
BLEND_BAND = 4.0  # px of cosine falloff outside the core
GT_BOX_EXPAND = 0.15

MOTION_KINDS = ("constant", "sinusoidal", "teleport")


@dataclass(frozen=True)
class Motion:
    """Position of an actor's anchor (head top) at frame t."""

    kind: str = "constant"
    start: Tuple[float, float] = (0.0, 0.0)
    velocity: Tuple[float, float] = (0.0, 0.0)
    amplitude: Tuple[float, float] = (0.0, 0.0)
    period: float = 10.0

    def __post_init__(self):
        if self.kind not in MOTION_KINDS:
            raise InvalidScenario(f"unknown motion kind {self.kind!r}; expected one of {MOTION_KINDS}")
        if self.kind == "sinusoidal" and not self.period > 0:
            raise InvalidScenario("sinusoidal motion needs a positive period")
        object.__setattr__(self, "start", tuple(float(v) for v in self.start))
        object.__setattr__(self, "velocity", tuple(float(v) for v in self.velocity))
        object.__setattr__(self, "amplitude", tuple(float(v) for v in self.amplitude))

    def position(self, t: int) -> np.ndarray:
        p = np.asarray(self.start) + t * np.asarray(self.velocity)
        if self.kind == "sinusoidal":
            p = p + np.asarray(self.amplitude) * math.sin(2.0 * math.pi * t / self.period)
        return p


@dataclass(frozen=True)
class Actor:
    track_id: int
    height: float
    motion: Motion
    occluded: FrozenSet[int] = frozenset()
    width_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "occluded", frozenset(int(k) for k in self.occluded))
        if not self.height > 0 or not self.width_scale > 0:
            raise InvalidScenario(f"actor {self.track_id}: height and width_scale must be positive")
        if self.motion.kind == "teleport":
            span = float(np.ptp(STICK15[:, 0])) * self.height * self.width_scale * (1 + GT_BOX_EXPAND)
            if abs(self.motion.velocity[0]) <= span and abs(self.motion.velocity[1]) <= self.height * (1 + GT_BOX_EXPAND):
                raise InvalidScenario(
                    f"actor {self.track_id}: teleport motion must move farther than its box each frame")

    def joints_at(self, t: int) -> np.ndarray:
        scale = np.array([self.height * self.width_scale, self.height])
        return self.motion.position(t) + STICK15 * scale

    @property
    def head_size(self) -> float:
        return HEAD_FRACTION * self.height


@dataclass(frozen=True)
class NoiseModel:
    detector_miss_rate: float = 0.0
    false_positive_rate: float = 0.0
    box_jitter: float = 0.0
    joint_noise_sigma: float = 0.0
    score_noise_sigma: float = 0.0

    def __post_init__(self):
        for name in ("detector_miss_rate", "false_positive_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidScenario(f"{name} must lie in [0, 1]")
        for name in ("box_jitter", "joint_noise_sigma", "score_noise_sigma"):
            if getattr(self, name) < 0:
                raise InvalidScenario(f"{name} must be non-negative")


@dataclass(frozen=True)
class Scenario:
    n_frames: int
    frame_w: int
    frame_h: int
    actors: Tuple[Actor, ...]
    seed: int = 0
    noise: NoiseModel = field(default_factory=NoiseModel)
    name: str = "scenario"

    def __post_init__(self):
        object.__setattr__(self, "actors", tuple(self.actors))
        if self.n_frames < 1 or self.frame_w < 2 or self.frame_h < 2:
            raise InvalidScenario("scenario needs at least one frame and a frame of at least 2x2 pixels")
        ids = [a.track_id for a in self.actors]
        if len(set(ids)) != len(ids):
            raise InvalidScenario(f"duplicate actor track ids: {ids}")


def _gt_pose(actor: Actor, t: int, frame_w: int, frame_h: int) -> Pose:
    xy = actor.joints_at(t)
    inside = (xy[:, 0] >= 0) & (xy[:, 0] <= frame_w - 1) & (xy[:, 1] >= 0) & (xy[:, 1] <= frame_h - 1)
    vis = inside & (t not in actor.occluded)
    return Pose.from_arrays(xy, np.ones(len(xy)), vis, POSETRACK15)


def _paint(u: np.ndarray, v: np.ndarray, joints: np.ndarray, d: np.ndarray) -> None:
    """Blend displacement ``d`` over the region around ``joints`` into (u, v) in place."""
    h, w = u.shape
    x0, y0 = joints.min(axis=0) - CORE_MARGIN
    x1, y1 = joints.max(axis=0) + CORE_MARGIN
    gx0 = max(int(math.floor(x0 - BLEND_BAND)), 0)
    gy0 = max(int(math.floor(y0 - BLEND_BAND)), 0)
    gx1 = min(int(math.ceil(x1 + BLEND_BAND)) + 1, w)
    gy1 = min(int(math.ceil(y1 + BLEND_BAND)) + 1, h)
    if gx0 >= gx1 or gy0 >= gy1:
        return
    ys, xs = np.mgrid[gy0:gy1, gx0:gx1].astype(float)
    ox = np.maximum(np.maximum(x0 - xs, xs - x1), 0.0)
    oy = np.maximum(np.maximum(y0 - ys, ys - y1), 0.0)
    dist = np.hypot(ox, oy)
    wgt = np.where(dist < BLEND_BAND, 0.5 * (1.0 + np.cos(np.pi * dist / BLEND_BAND)), 0.0)
    wgt[dist == 0] = 1.0
    sl = (slice(gy0, gy1), slice(gx0, gx1))
    u[sl] = u[sl] * (1.0 - wgt) + wgt * d[0]
    v[sl] = v[sl] * (1.0 - wgt) + wgt * d[1]


def generate(scn: Scenario) -> Tuple[GroundTruth, Dict[int, FlowField]]:
    """Ground truth for every frame and ``flows[k]``, the field from frame k-1 to k.

    Later actors paint over earlier ones where their regions overlap.
    Occluded actors still move the flow; they are only hidden from the
    ground truth, the detector and the pose provider.
    """
    frames: List[List[GTPerson]] = []
    for t in range(scn.n_frames):
        people = []
        for a in scn.actors:
            pose = _gt_pose(a, t, scn.frame_w, scn.frame_h)
            if pose.visibility.any():
                people.append(GTPerson(a.track_id, pose, a.head_size))
        frames.append(people)
    flows: Dict[int, FlowField] = {}
    for t in range(scn.n_frames - 1):
        u = np.zeros((scn.frame_h, scn.frame_w))
        v = np.zeros((scn.frame_h, scn.frame_w))
        for a in scn.actors:
            d = a.motion.position(t + 1) - a.motion.position(t)
            _paint(u, v, a.joints_at(t), d)
        flows[t + 1] = FlowField(u, v)
    return GroundTruth(frames, POSETRACK15), flows


def gt_box(person: GTPerson) -> BBox:
    return expand_box(bbox_from_pose(person.pose, visible_only=True), GT_BOX_EXPAND)


def _score(rng: np.random.Generator, sigma: float) -> float:
    return float(np.clip(1.0 - abs(rng.normal(0.0, sigma)), 0.0, 1.0)) if sigma > 0 else 1.0


class SimDetector:
    """Per-frame detections derived from ground truth, deterministic per (seed, frame)."""

    def __init__(self, gt: GroundTruth, noise: NoiseModel, seed: int, frame_w: int, frame_h: int):
        self.frames: List[List[BBox]] = []
        for k, people in enumerate(gt.frames):
            rng = np.random.default_rng([seed, k, 1])
            boxes = []
            for person in people:
                miss = rng.random() < noise.detector_miss_rate
                jitter = rng.normal(0.0, noise.box_jitter, size=4) if noise.box_jitter > 0 else np.zeros(4)
                score = _score(rng, noise.score_noise_sigma)
                if miss:
                    continue
                b = np.asarray(gt_box(person).as_tuple()) + jitter
                xs, ys = sorted((b[0], b[2])), sorted((b[1], b[3]))
                boxes.append(BBox(float(xs[0]), float(ys[0]), float(xs[1]), float(ys[1]), score))
            if rng.random() < noise.false_positive_rate:
                bw = rng.uniform(0.05, 0.2) * frame_w
                bh = rng.uniform(0.1, 0.4) * frame_h
                x = rng.uniform(0, frame_w - bw)
                y = rng.uniform(0, frame_h - bh)
                boxes.append(BBox(float(x), float(y), float(x + bw), float(y + bh), float(rng.uniform(0.3, 0.9))))
            self.frames.append(boxes)

    def detect(self, frame_index: int) -> List[BBox]:
        if 0 <= frame_index < len(self.frames):
            return list(self.frames[frame_index])
        return []


def noisy_detector(gt: GroundTruth, noise: NoiseModel, seed: int, frame_w: int = 640,
                   frame_h: int = 480) -> SimDetector:
    return SimDetector(gt, noise, seed, frame_w, frame_h)


def junk_pose(box: BBox, rng: np.random.Generator, schema=POSETRACK15) -> Instance:
    """Low-confidence pose scattered inside ``box``; the answer when a box holds nobody."""
    n = schema.n_joints
    xs = rng.uniform(box.x_min, box.x_max, size=n) if box.width > 0 else np.full(n, box.x_min)
    ys = rng.uniform(box.y_min, box.y_max, size=n) if box.height > 0 else np.full(n, box.y_min)
    conf = rng.uniform(0.0, 0.1, size=n)
    pose = Pose.from_arrays(np.stack([xs, ys], axis=1), conf, np.ones(n, dtype=bool), schema)
    return Instance(pose, None, float(conf.mean()))


class BoxMatchedPoseProvider:
    """Answers each requested box with the stored pose whose box overlaps it most.

    ``entries[k]`` lists ``(box, instance)`` pairs available in frame k. A
    request overlapping no stored box gets a junk pose seeded by
    (seed, frame, request index).
    """

    def __init__(self, entries: Sequence[Sequence[Tuple[BBox, Instance]]], seed: int = 0,
                 schema=POSETRACK15):
        self.entries = [list(e) for e in entries]
        self.seed = seed
        self.schema = schema

    def estimate(self, frame_index: int, boxes: Sequence[BBox]) -> List[Instance]:
        stored = self.entries[frame_index] if 0 <= frame_index < len(self.entries) else []
        out = []
        for i, req in enumerate(boxes):
            best, best_iou = None, 0.0
            for box, inst in stored:
                o = iou(req, box)
                if o > best_iou:
                    best, best_iou = inst, o
            if best is None:
                out.append(junk_pose(req, np.random.default_rng([self.seed, frame_index, i, 2]), self.schema))
            else:
                out.append(best)
        return out


def noisy_pose(person: GTPerson, noise: NoiseModel, rng: np.random.Generator) -> Instance:
    """Ground-truth pose with Gaussian joint noise on the visible joints."""
    pose = person.pose
    vis = pose.visibility
    n = len(pose)
    xy = np.array(pose.xy)
    if noise.joint_noise_sigma > 0:
        xy[vis] += rng.normal(0.0, noise.joint_noise_sigma, size=(int(vis.sum()), 2))
    conf = np.zeros(n)
    for j in np.nonzero(vis)[0]:
        conf[j] = _score(rng, noise.score_noise_sigma)
    out = Pose.from_arrays(xy, conf, vis, pose.schema)
    return Instance(out, None, float(conf[vis].mean()))


def oracle_entries(gt: GroundTruth, noise: NoiseModel, seed: int) -> List[List[Tuple[BBox, Instance]]]:
    """One noisy pose per visible person per frame, keyed by its ground-truth box."""
    entries = []
    for k, people in enumerate(gt.frames):
        row = []
        for person in people:
            rng = np.random.default_rng([seed, k, person.track_id, 3])
            row.append((gt_box(person), noisy_pose(person, noise, rng)))
        entries.append(row)
    return entries


def oracle_pose_provider(gt: GroundTruth, noise: NoiseModel, seed: int = 0) -> BoxMatchedPoseProvider:
    return BoxMatchedPoseProvider(oracle_entries(gt, noise, seed), seed, gt.schema)


# scenario configs ----------------------------------------------------------

def scenario_from_dict(d: dict) -> Scenario:
    try:
        actors = []
        for a in d["actors"]:
            m = a.get("motion", {})
            motion = Motion(kind=m.get("kind", "constant"), start=tuple(m.get("start", (0.0, 0.0))),
                            velocity=tuple(m.get("velocity", (0.0, 0.0))),
                            amplitude=tuple(m.get("amplitude", (0.0, 0.0))),
                            period=float(m.get("period", 10.0)))
            actors.append(Actor(int(a["track_id"]), float(a["height"]), motion,
                                frozenset(a.get("occluded", ())), float(a.get("width_scale", 1.0))))
        noise = NoiseModel(**d.get("noise", {}))
        return Scenario(int(d["n_frames"]), int(d["frame_w"]), int(d["frame_h"]), tuple(actors),
                        int(d.get("seed", 0)), noise, str(d.get("name", "scenario")))
    except InvalidScenario:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidScenario(f"malformed scenario definition: {exc!r}") from exc


def scenario_to_dict(scn: Scenario) -> dict:
    return {
        "name": scn.name,
        "n_frames": scn.n_frames,
        "frame_w": scn.frame_w,
        "frame_h": scn.frame_h,
        "seed": scn.seed,
        "noise": {
            "detector_miss_rate": scn.noise.detector_miss_rate,
            "false_positive_rate": scn.noise.false_positive_rate,
            "box_jitter": scn.noise.box_jitter,
            "joint_noise_sigma": scn.noise.joint_noise_sigma,
            "score_noise_sigma": scn.noise.score_noise_sigma,
        },
        "actors": [
            {
                "track_id": a.track_id,
                "height": a.height,
                "width_scale": a.width_scale,
                "occluded": sorted(a.occluded),
                "motion": {
                    "kind": a.motion.kind,
                    "start": list(a.motion.start),
                    "velocity": list(a.motion.velocity),
                    "amplitude": list(a.motion.amplitude),
                    "period": a.motion.period,
                },
            }
            for a in scn.actors
        ],
    }


def load_scenario(path_or_name) -> Scenario:
    """Read a scenario JSON file, or a shipped scenario by name (e.g. ``fast_walker``)."""
    path = Path(path_or_name)
    if path.suffix != ".json" and not path.exists():
        shipped = resources.files("flowtrack") / "scenarios" / f"{path_or_name}.json"
        if not shipped.is_file():
            raise InvalidScenario(f"no scenario file or shipped scenario named {str(path_or_name)!r}")
        text = shipped.read_text()
    else:
        try:
            text = path.read_text()
        except OSError as exc:
            raise InvalidScenario(f"cannot read scenario {path}: {exc}") from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidScenario(f"scenario {path_or_name}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return scenario_from_dict(d)


def shipped_scenarios() -> List[str]:
    root = resources.files("flowtrack") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def lane_scenario(seed: int, n_frames: int = 30, n_actors: int = 3, speed: Tuple[float, float] = (4.0, 8.0),
                  frame_w: int = 480, frame_h: int = 360, noise: Optional[NoiseModel] = None,
                  occlusions: Optional[Dict[int, Sequence[int]]] = None) -> Scenario:
    """Actors walking horizontally in separate lanes, so their regions never overlap."""
    rng = np.random.default_rng([seed, 11])
    lane_h = frame_h / n_actors
    actors = []
    for i in range(n_actors):
        height = float(rng.uniform(0.6, 0.75) * lane_h)
        vx = float(rng.uniform(*speed)) * (1 if rng.random() < 0.5 else -1)
        half_w = 0.2 * height * 1.2
        travel = abs(vx) * (n_frames - 1)
        lo, hi = half_w + 2, frame_w - 3 - half_w
        if travel > hi - lo:
            raise InvalidScenario(f"lane scenario: {n_frames} frames at {abs(vx):.1f} px/frame leave the frame")
        x_start = float(rng.uniform(lo, hi - travel)) if vx > 0 else float(rng.uniform(lo + travel, hi))
        y_top = i * lane_h + (lane_h - height) / 2.0
        amp = min(2.0, (lane_h - height) / 4.0)
        motion = Motion("sinusoidal", (x_start, y_top), (vx, 0.0), (0.0, amp), float(rng.uniform(8, 16)))
        occ = frozenset((occlusions or {}).get(i, ()))
        actors.append(Actor(i, height, motion, occ))
    return Scenario(n_frames, frame_w, frame_h, tuple(actors), seed, noise or NoiseModel(), f"lanes_{seed}")
