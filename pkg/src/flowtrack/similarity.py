"""Instance similarity: box IoU, OKS, flow-propagated OKS; box NMS; similarity matrices."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import MissingFlow, NoJoints, NoVisibleJoints, SchemaMismatch
from .flow import FlowField, propagate_pose, propagate_pose_through
from .pose_model import BBox, BoxSource, Instance, JointSchema, Pose, bbox_from_pose

MIN_SCALE = 1.0  # px; floor for the OKS scale of degenerate (point/line) poses


class Metric(str, Enum):
    BBOX = "bbox"
    POSE = "pose"
    FLOW = "flow"
    MULTI_FLOW = "multi_flow"


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


def pose_scale(pose: Pose) -> float:
    """Square root of the area of the tight box around the visible joints."""
    try:
        box = bbox_from_pose(pose, visible_only=True)
    except NoJoints:
        raise NoVisibleJoints("pose has no visible joints to derive a scale from") from None
    return max(math.sqrt(box.area), MIN_SCALE)


def oks(candidate: Pose, reference: Pose, schema: Optional[JointSchema] = None,
        scale: Optional[float] = None) -> float:
    """Object keypoint similarity of ``candidate`` against ``reference``.

    Averages ``exp(-d^2 / (2 s^2 kappa^2))`` over the joints visible in the
    reference. A reference-visible joint that is invisible in the candidate
    contributes 0. ``scale`` defaults to :func:`pose_scale` of the reference.
    """
    schema = schema or reference.schema
    if candidate.schema.n_joints != schema.n_joints or reference.schema.n_joints != schema.n_joints:
        raise SchemaMismatch(
            f"OKS needs poses of schema {schema.name!r} ({schema.n_joints} joints); "
            f"got {len(candidate)} and {len(reference)}"
        )
    ref_vis = reference.visibility
    n_vis = int(ref_vis.sum())
    if n_vis == 0:
        raise NoVisibleJoints("reference pose has no visible joints")
    if scale is None:
        scale = pose_scale(reference)
    if not scale > 0:
        raise ValueError("OKS scale must be positive")
    kappa = np.asarray(schema.kappa)
    d2 = np.sum((candidate.xy - reference.xy) ** 2, axis=1)
    e = np.exp(-d2 / (2.0 * scale ** 2 * kappa ** 2))
    e = np.where(candidate.visibility, e, 0.0)
    return float(np.sum(e[ref_vis]) / n_vis)


def s_flow(j_k: Pose, j_l: Pose, flow_k_to_l, schema: Optional[JointSchema] = None,
           scale: Optional[float] = None) -> float:
    """OKS between ``j_k`` carried to frame l by flow and the frame-l pose ``j_l``.

    ``flow_k_to_l`` is one field, or a sequence of consecutive fields that are
    applied hop by hop.
    """
    if isinstance(flow_k_to_l, FlowField):
        moved = propagate_pose(j_k, flow_k_to_l)
    else:
        moved = propagate_pose_through(j_k, flow_k_to_l)
    return oks(moved, j_l, schema, scale)


def _nms_key(item):
    idx, box = item
    return (-box.score, 0 if box.source == BoxSource.DETECTOR else 1, idx)


def nms(boxes: Sequence[BBox], iou_threshold: float = 0.5) -> List[int]:
    """Greedy NMS; returns kept indices in selection order.

    Order is score descending, detector boxes before flow boxes on equal
    score, then lower index. A box is suppressed when its IoU with an
    already kept box is >= ``iou_threshold``.
    """
    order = sorted(enumerate(boxes), key=_nms_key)
    kept: List[int] = []
    for idx, box in order:
        if all(iou(box, boxes[k]) < iou_threshold for k in kept):
            kept.append(idx)
    return kept


def nms_unify(det_boxes: Sequence[BBox], flow_boxes: Sequence[BBox], iou_threshold: float = 0.5) -> List[BBox]:
    """Merge detector and flow boxes into one candidate set by NMS."""
    pool = list(det_boxes) + list(flow_boxes)
    return [pool[i] for i in nms(pool, iou_threshold)]


@dataclass
class SimilarityMatrix:
    values: np.ndarray  # (n_tracks, n_candidates), entries in [0, 1]
    row_ids: List[int]
    row_src_frame: List[int]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class FrameRecord:
    """Tracked instances of one processed frame, as stored in the history queue."""

    frame_index: int
    instances: Tuple[Instance, ...]


def _pair_similarity(metric: Metric, track: Pose, moved: Optional[Pose], cand: Pose,
                     schema: JointSchema) -> float:
    try:
        if metric is Metric.BBOX:
            return iou(bbox_from_pose(track), bbox_from_pose(cand))
        if metric is Metric.POSE:
            return oks(track, cand, schema)
        return oks(moved, cand, schema)
    except (NoJoints, NoVisibleJoints):
        return 0.0


def _row_sources(history: Sequence[FrameRecord], metric: Metric, mode: str
                 ) -> List[Tuple[int, List[Tuple[int, Instance]]]]:
    """Per track id: the (frame, instance) occurrences a row is built from."""
    if not history:
        return []
    frames = sorted(history, key=lambda r: r.frame_index)
    if metric is not Metric.MULTI_FLOW:
        frames = frames[-1:]
    occurrences: Dict[int, List[Tuple[int, Instance]]] = {}
    for rec in frames:
        for inst in rec.instances:
            if inst.id is None:
                continue
            occurrences.setdefault(inst.id, []).append((rec.frame_index, inst))
    rows = []
    for track_id in sorted(occurrences):
        occ = occurrences[track_id]
        if mode == "most_recent":
            occ = occ[-1:]
        rows.append((track_id, occ))
    return rows


def build_sim_matrix(history: Sequence[FrameRecord], current: Sequence[Instance],
                     flows: Mapping[int, FlowField], metric, schema: JointSchema,
                     current_frame: Optional[int] = None, multi_flow_mode: str = "most_recent",
                     n_threads: int = 1) -> SimilarityMatrix:
    """Similarity between tracks in ``history`` and the untracked ``current`` instances.

    ``flows[k]`` holds the field from frame k-1 to frame k. One row per
    track id, ordered by id. Only the newest history frame feeds rows for
    the single-frame metrics; ``multi_flow`` uses every frame in history and,
    by default, each id's most recent occurrence carried forward through the
    consecutive fields. ``multi_flow_mode="max"`` instead takes the best
    similarity over all of an id's occurrences.
    """
    metric = Metric(metric)
    if multi_flow_mode not in ("most_recent", "max"):
        raise ValueError(f"unknown multi_flow_mode {multi_flow_mode!r}")
    if current_frame is None:
        current_frame = max((r.frame_index for r in history), default=-1) + 1
    rows = _row_sources(history, metric, multi_flow_mode)
    needs_flow = metric in (Metric.FLOW, Metric.MULTI_FLOW)
    if needs_flow:
        for _, occ in rows:
            for frame, _ in occ:
                for k in range(frame + 1, current_frame + 1):
                    if k not in flows or flows[k] is None:
                        raise MissingFlow(f"no flow field from frame {k - 1} to frame {k}")

    cand_poses = [inst.pose for inst in current]

    def row_values(row):
        _, occ = row
        best = np.zeros(len(cand_poses))
        for frame, inst in occ:
            moved = None
            if needs_flow:
                moved = propagate_pose_through(inst.pose, [flows[k] for k in range(frame + 1, current_frame + 1)])
            vals = np.array([_pair_similarity(metric, inst.pose, moved, c, schema) for c in cand_poses])
            best = np.maximum(best, vals)
        return best, occ[-1][0]

    if n_threads > 1 and len(rows) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(row_values, rows))
    else:
        results = [row_values(r) for r in rows]

    values = np.zeros((len(rows), len(cand_poses)))
    for i, (vals, _) in enumerate(results):
        values[i] = vals
    values = np.clip(values, 0.0, 1.0)
    return SimilarityMatrix(values, [r[0] for r in rows], [res[1] for res in results])
