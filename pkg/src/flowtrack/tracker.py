"""Online pose tracking: box unification, pose acquisition, greedy id assignment.

Each frame: detector boxes are thresholded, boxes propagated from the
previous frame's poses by optical flow are added, the union is reduced by
NMS, poses are estimated in the surviving boxes, and ids are carried over
from a bounded history of tracked frames by greedy matching.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Deque, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from .errors import InvalidConfig, InvariantViolation, MissingFlow, OutOfOrderFrame
from .flow import FlowField, flow_box_gen
from .pose_model import POSETRACK15, BBox, BoxSource, Instance, JointSchema
from .similarity import FrameRecord, Metric, SimilarityMatrix, build_sim_matrix, nms_unify

log = logging.getLogger(__name__)


class DetectionProvider(Protocol):
    def detect(self, frame_index: int) -> List[BBox]:
        """Person boxes with scores for one frame."""
        ...


class PoseProvider(Protocol):
    def estimate(self, frame_index: int, boxes: Sequence[BBox]) -> List[Instance]:
        """One untracked instance per requested box, in request order."""
        ...


@dataclass(frozen=True)
class TrackerConfig:
    l_q: int = 3
    box_drop_threshold: float = 0.5
    joint_drop_threshold: float = 0.4
    nms_iou_threshold: float = 0.5
    similarity_metric: Metric = Metric.MULTI_FLOW
    min_match_similarity: float = 0.0
    expand_fraction: float = 0.15
    joint_propagation: bool = True
    flow_box_score_decay: float = 1.0
    multi_flow_mode: str = "most_recent"
    n_threads: int = 1
    schema: JointSchema = POSETRACK15

    def __post_init__(self):
        object.__setattr__(self, "similarity_metric", Metric(self.similarity_metric))
        if self.l_q < 1:
            raise InvalidConfig("l_q must be at least 1")
        for name in ("box_drop_threshold", "joint_drop_threshold", "nms_iou_threshold",
                     "min_match_similarity", "flow_box_score_decay"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidConfig(f"{name} must lie in [0, 1], got {value}")
        if self.expand_fraction < 0:
            raise InvalidConfig("expand_fraction must be non-negative")
        if self.multi_flow_mode not in ("most_recent", "max"):
            raise InvalidConfig(f"unknown multi_flow_mode {self.multi_flow_mode!r}")
        if self.n_threads < 1:
            raise InvalidConfig("n_threads must be at least 1")

    @property
    def needs_flow(self) -> bool:
        return self.joint_propagation or self.similarity_metric in (Metric.FLOW, Metric.MULTI_FLOW)

    def as_dict(self) -> dict:
        return {
            "l_q": self.l_q,
            "box_drop_threshold": self.box_drop_threshold,
            "joint_drop_threshold": self.joint_drop_threshold,
            "nms_iou_threshold": self.nms_iou_threshold,
            "similarity_metric": self.similarity_metric.value,
            "min_match_similarity": self.min_match_similarity,
            "expand_fraction": self.expand_fraction,
            "joint_propagation": self.joint_propagation,
            "flow_box_score_decay": self.flow_box_score_decay,
            "multi_flow_mode": self.multi_flow_mode,
            "n_threads": self.n_threads,
            "schema": self.schema.name,
        }


@dataclass
class TrackerState:
    l_q: int = 3
    q: Deque[FrameRecord] = field(default_factory=deque)
    next_id: int = 0
    frame_index: Optional[int] = None  # last processed frame
    flows: Dict[int, FlowField] = field(default_factory=dict)

    def copy(self) -> "TrackerState":
        return TrackerState(self.l_q, deque(self.q), self.next_id, self.frame_index, dict(self.flows))

    @property
    def previous(self) -> Tuple[Instance, ...]:
        return self.q[-1].instances if self.q else ()


def greedy_match(values: np.ndarray, min_sim: float = 0.0) -> Tuple[List[Tuple[int, int]], List[int]]:
    """Greedy matching on a raw matrix; returns (row, col) pairs in selection order.

    Repeatedly binds the largest remaining entry that exceeds ``min_sim``,
    ties going to the lower row, then the lower column.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 2:
        if values.size:
            raise ValueError(f"similarity matrix must be 2D, got shape {values.shape}")
        values = values.reshape(0, 0)
    n_rows, n_cols = values.shape
    rows, cols = np.nonzero(values > min_sim)
    # lexsort: last key is primary
    order = np.lexsort((cols, rows, -values[rows, cols]))
    used_r, used_c = set(), set()
    pairs = []
    for k in order:
        r, c = int(rows[k]), int(cols[k])
        if r in used_r or c in used_c:
            continue
        used_r.add(r)
        used_c.add(c)
        pairs.append((r, c))
        if len(pairs) == min(n_rows, n_cols):
            break
    unmatched = [c for c in range(n_cols) if c not in used_c]
    return pairs, unmatched


def greedy_assign(m: SimilarityMatrix, min_sim: float = 0.0) -> Tuple[List[Tuple[int, int]], List[int]]:
    """Greedy id assignment: returns ``(track_id, col)`` pairs and unmatched columns."""
    pairs, unmatched = greedy_match(m.values, min_sim)
    return [(m.row_ids[r], c) for r, c in pairs], unmatched


def _check_invariants(state: TrackerState, instances: Sequence[Instance]) -> None:
    ids = [inst.id for inst in instances]
    if any(i is None for i in ids):
        raise InvariantViolation("tracked instance left without id")
    if len(set(ids)) != len(ids):
        raise InvariantViolation(f"duplicate ids within frame {state.frame_index}: {ids}")
    if any(i >= state.next_id for i in ids):
        raise InvariantViolation("assigned id not below the id counter")
    if len(state.q) > state.l_q:
        raise InvariantViolation("history queue over capacity")


def process_frame(state: TrackerState, frame_index: int, det: DetectionProvider, pose: PoseProvider,
                  flow_prev_to_cur: Optional[FlowField], cfg: TrackerConfig
                  ) -> Tuple[TrackerState, List[Instance]]:
    """Track one frame; returns the new state and the frame's tracked instances.

    The input state is not modified.
    """
    if state.frame_index is not None and frame_index != state.frame_index + 1:
        raise OutOfOrderFrame(f"expected frame {state.frame_index + 1}, got {frame_index}")
    if state.l_q != cfg.l_q:
        raise InvalidConfig(f"state was built for l_q={state.l_q}, config says {cfg.l_q}")
    new = state.copy()
    first = state.frame_index is None

    det_boxes = [b for b in det.detect(frame_index) if b.score >= cfg.box_drop_threshold]
    det_boxes = [replace(b, source=BoxSource.DETECTOR) for b in det_boxes]

    if first:
        unified = det_boxes
    else:
        if flow_prev_to_cur is None:
            if cfg.needs_flow:
                raise MissingFlow(f"no flow field from frame {frame_index - 1} to frame {frame_index}")
        else:
            new.flows[frame_index] = flow_prev_to_cur
        flow_boxes: List[BBox] = []
        if cfg.joint_propagation:
            flow_boxes = flow_box_gen(state.previous, flow_prev_to_cur, cfg.expand_fraction,
                                      score_decay=cfg.flow_box_score_decay)
        unified = nms_unify(det_boxes, flow_boxes, cfg.nms_iou_threshold)

    estimated = pose.estimate(frame_index, unified)
    if len(estimated) != len(unified):
        raise InvariantViolation(f"pose provider returned {len(estimated)} instances for {len(unified)} boxes")
    candidates = []
    for inst in estimated:
        p = inst.pose.drop_joints(cfg.joint_drop_threshold)
        if not p.visibility.any():
            continue
        candidates.append(replace(inst, pose=p, id=None))

    ids: List[Optional[int]] = [None] * len(candidates)
    if not first and candidates:
        m = build_sim_matrix(new.q, candidates, new.flows, cfg.similarity_metric, cfg.schema,
                             current_frame=frame_index, multi_flow_mode=cfg.multi_flow_mode,
                             n_threads=cfg.n_threads)
        pairs, _ = greedy_assign(m, cfg.min_match_similarity)
        for track_id, col in pairs:
            ids[col] = track_id
    # fresh ids: descending score, then provider order
    fresh = sorted((c for c in range(len(candidates)) if ids[c] is None),
                   key=lambda c: (-candidates[c].score, c))
    for c in fresh:
        ids[c] = new.next_id
        new.next_id += 1
    tracked = [inst.with_id(i) for inst, i in zip(candidates, ids)]

    new.q.append(FrameRecord(frame_index, tuple(tracked)))
    while len(new.q) > new.l_q:
        new.q.popleft()
    oldest = new.q[0].frame_index
    new.flows = {k: f for k, f in new.flows.items() if k > oldest}
    new.frame_index = frame_index
    _check_invariants(new, tracked)
    return new, tracked


FlowSource = Union[Mapping[int, FlowField], Sequence[Optional[FlowField]]]


def _flow_for(flows: Optional[FlowSource], k: int) -> Optional[FlowField]:
    if flows is None:
        return None
    if isinstance(flows, Mapping):
        return flows.get(k)
    return flows[k] if 0 <= k < len(flows) else None


def run_sequence(n_frames: int, det: DetectionProvider, pose: PoseProvider, flows: Optional[FlowSource],
                 cfg: TrackerConfig, start: int = 0) -> List[List[Instance]]:
    """Track frames ``start .. start + n_frames - 1``; ``flows[k]`` is the field k-1 -> k."""
    state = TrackerState(cfg.l_q)
    out = []
    for k in range(start, start + n_frames):
        f = _flow_for(flows, k) if k > start else None
        state, tracked = process_frame(state, k, det, pose, f, cfg)
        log.debug("frame %d: %d instances, next id %d", k, len(tracked), state.next_id)
        out.append(tracked)
    return out
