"""Per-joint average precision and CLEAR-MOT tracking metrics.

A predicted joint matches a ground-truth joint of the same class when their
distance is within ``threshold_fraction`` times the person's head size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import EmptyGroundTruth, InvalidConfig
from .pose_model import POSETRACK15, Instance, Joint, JointSchema, Pose

PCKH_THRESHOLD = 0.5


@dataclass(frozen=True)
class GTPerson:
    track_id: int
    pose: Pose
    head_size: float

    def __post_init__(self):
        if not self.head_size > 0:
            raise ValueError(f"head size must be positive, got {self.head_size}")


@dataclass
class GroundTruth:
    frames: List[List[GTPerson]]
    schema: JointSchema = POSETRACK15

    def __post_init__(self):
        for k, people in enumerate(self.frames):
            ids = [p.track_id for p in people]
            if len(set(ids)) != len(ids):
                raise InvalidConfig(f"duplicate ground-truth track ids in frame {k}: {ids}")

    def __len__(self):
        return len(self.frames)


@dataclass
class JointStats:
    n_gt: int = 0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    idsw: int = 0
    dist_sum: float = 0.0  # sum of matched distances, each normalized by its threshold
    ap: float = float("nan")

    @property
    def mota(self) -> float:
        if self.n_gt == 0:
            return float("nan")
        return 1.0 - (self.fn + self.fp + self.idsw) / self.n_gt

    @property
    def motp(self) -> float:
        return self.dist_sum / self.tp if self.tp else float("nan")

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / self.n_gt if self.n_gt else 0.0

    def __add__(self, other: "JointStats") -> "JointStats":
        return JointStats(self.n_gt + other.n_gt, self.tp + other.tp, self.fp + other.fp,
                          self.fn + other.fn, self.idsw + other.idsw, self.dist_sum + other.dist_sum)


@dataclass
class EvalReport:
    per_joint: Dict[str, JointStats]
    groups: Dict[str, JointStats]
    total: JointStats
    schema_name: str = ""

    @property
    def map_total(self) -> float:
        return self.total.ap

    @property
    def mota_total(self) -> float:
        return self.total.mota


def _finite_mean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def match_joints(pred: Sequence[Joint], gt: Sequence[Tuple[int, Joint, float]],
                 threshold_fraction: float = PCKH_THRESHOLD) -> List[Tuple[int, int, float]]:
    """One-to-one matching by ascending distance, gated by head size.

    Returns ``(pred_index, gt_index, distance)`` triples. Invisible joints on
    either side never match. Equal distances go to the lower pred index,
    then the lower gt index.
    """
    if not threshold_fraction > 0:
        raise ValueError("threshold_fraction must be positive")
    cands = []
    for i, pj in enumerate(pred):
        if not pj.visible:
            continue
        for g, (_, gj, head) in enumerate(gt):
            if not gj.visible:
                continue
            d = math.hypot(pj.x - gj.x, pj.y - gj.y)
            if d <= threshold_fraction * head:
                cands.append((d, i, g))
    cands.sort()
    used_p, used_g = set(), set()
    out = []
    for d, i, g in cands:
        if i in used_p or g in used_g:
            continue
        used_p.add(i)
        used_g.add(g)
        out.append((i, g, d))
    return out


def average_precision(tp_flags: Sequence[bool], n_gt: int) -> float:
    """Area under the PR curve with all-point interpolation.

    ``tp_flags`` are in descending score order.
    """
    if n_gt == 0:
        return float("nan")
    flags = np.asarray(tp_flags, dtype=bool)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _gt_joints(people: Sequence[GTPerson], j: int):
    return [(p.track_id, p.pose.joints[j], p.head_size) for p in people if p.pose.joints[j].visible]


def _pad(tracked: Sequence[Sequence[Instance]], gt: GroundTruth) -> List[Sequence[Instance]]:
    if len(tracked) > len(gt.frames):
        extra = [k for k in range(len(gt.frames), len(tracked)) if tracked[k]]
        if extra:
            raise InvalidConfig(f"predictions for frames {extra[:5]} beyond the ground truth ({len(gt)} frames)")
    return [tracked[k] if k < len(tracked) else [] for k in range(len(gt.frames))]


def compute_map(predictions: Sequence[Sequence[Instance]], gt: GroundTruth,
                threshold_fraction: float = PCKH_THRESHOLD) -> Tuple[List[float], float]:
    """Per-joint AP and their mean.

    Each joint class ranks all its visible predicted joints by confidence;
    in that order a prediction claims the nearest still-unclaimed
    ground-truth joint of its frame inside the threshold, or counts as a
    false positive. Classes without ground truth give NaN and are left out
    of the mean.
    """
    predictions = _pad(predictions, gt)
    aps = []
    for j in range(gt.schema.n_joints):
        scored = []
        for k, insts in enumerate(predictions):
            for n, inst in enumerate(insts):
                pj = inst.pose.joints[j]
                if pj.visible:
                    scored.append((-pj.confidence, k, n, pj))
        scored.sort(key=lambda t: t[:3])
        claimed = set()
        flags = []
        per_frame = [_gt_joints(people, j) for people in gt.frames]
        n_gt = sum(len(g) for g in per_frame)
        for _, k, _, pj in scored:
            best = None
            for g, (_, gj, head) in enumerate(per_frame[k]):
                if (k, g) in claimed:
                    continue
                d = math.hypot(pj.x - gj.x, pj.y - gj.y)
                if d <= threshold_fraction * head and (best is None or d < best[0]):
                    best = (d, g)
            if best is None:
                flags.append(False)
            else:
                claimed.add((k, best[1]))
                flags.append(True)
        aps.append(average_precision(flags, n_gt))
    return aps, _finite_mean(aps)


def compute_mot(tracked: Sequence[Sequence[Instance]], gt: GroundTruth,
                threshold_fraction: float = PCKH_THRESHOLD) -> EvalReport:
    """CLEAR-MOT counts per joint class, plus group and total aggregates.

    An id switch is counted when a ground-truth track is matched to a
    predicted id different from the one it was last matched to, however
    many frames ago that was.
    """
    tracked = _pad(tracked, gt)
    schema = gt.schema
    per_joint: Dict[str, JointStats] = {}
    for j, name in enumerate(schema.names):
        st = JointStats()
        last_id: Dict[int, int] = {}
        for insts, people in zip(tracked, gt.frames):
            preds = [inst for inst in insts if inst.pose.joints[j].visible]
            gts = _gt_joints(people, j)
            matches = match_joints([inst.pose.joints[j] for inst in preds], gts, threshold_fraction)
            st.n_gt += len(gts)
            st.tp += len(matches)
            st.fn += len(gts) - len(matches)
            st.fp += len(preds) - len(matches)
            for pi, gi, d in matches:
                track = gts[gi][0]
                pid = preds[pi].id
                if track in last_id and last_id[track] != pid:
                    st.idsw += 1
                last_id[track] = pid
                st.dist_sum += d / (threshold_fraction * gts[gi][2])
        per_joint[name] = st
    total = sum(per_joint.values(), JointStats())
    if total.n_gt == 0:
        raise EmptyGroundTruth("ground truth contains no visible joints")
    groups = {}
    for gname, idx in schema.groups:
        groups[gname] = sum((per_joint[schema.names[i]] for i in idx), JointStats())
    return EvalReport(per_joint, groups, total, schema.name)


def evaluate(tracked: Sequence[Sequence[Instance]], gt: GroundTruth,
             threshold_fraction: float = PCKH_THRESHOLD) -> EvalReport:
    """Tracking metrics and per-joint AP in one report."""
    report = compute_mot(tracked, gt, threshold_fraction)
    aps, m = compute_map(tracked, gt, threshold_fraction)
    schema = gt.schema
    for name, ap in zip(schema.names, aps):
        report.per_joint[name].ap = ap
    for gname, idx in schema.groups:
        report.groups[gname].ap = _finite_mean(aps[i] for i in idx)
    report.total.ap = m
    return report
