"""Flow-based multi-person pose tracking with desk-scale reference components."""

from .errors import FlowTrackError, InputError, InvariantViolation
from .flow import FlowField, compose_flow, propagate_pose, read_flo, sample_flow, write_flo
from .metrics import GroundTruth, GTPerson, compute_map, compute_mot, evaluate
from .pose_model import COCO17, POSETRACK15, BBox, Instance, Joint, Pose, bbox_from_pose
from .similarity import Metric, build_sim_matrix, iou, nms, oks
from .tracker import TrackerConfig, TrackerState, greedy_assign, process_frame, run_sequence

__version__ = "0.1.0"

__all__ = [
    "FlowTrackError",
    "InputError",
    "InvariantViolation",
    "FlowField",
    "compose_flow",
    "propagate_pose",
    "read_flo",
    "sample_flow",
    "write_flo",
    "GroundTruth",
    "GTPerson",
    "compute_map",
    "compute_mot",
    "evaluate",
    "COCO17",
    "POSETRACK15",
    "BBox",
    "Instance",
    "Joint",
    "Pose",
    "bbox_from_pose",
    "Metric",
    "build_sim_matrix",
    "iou",
    "nms",
    "oks",
    "TrackerConfig",
    "TrackerState",
    "greedy_assign",
    "process_frame",
    "run_sequence",
]
