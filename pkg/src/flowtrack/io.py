"""Line-delimited JSON formats for poses, detections and ground truth; sequence bundles.

Every file starts with a header record naming the format and joint schema,
followed by one record per frame, e.g. for poses::

    {"format": "flowtrack-poses", "version": 1, "schema": "posetrack15"}
    {"frame": 0, "instances": [{"id": 3, "score": 0.9, "joints": [[x, y, c, v], ...]}]}
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from collections.abc import Mapping
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

from .errors import InputError, MissingFlow, ParseError, SchemaMismatch
from .flow import FlowField, read_flo, write_flo
from .metrics import GroundTruth, GTPerson
from .pose_model import BBox, Instance, JointSchema, Pose, bbox_from_pose, expand_box, get_schema
from .synth import BoxMatchedPoseProvider

POSES_FORMAT = "flowtrack-poses"
DETECTIONS_FORMAT = "flowtrack-detections"
GT_FORMAT = "flowtrack-gt"
VERSION = 1
MANIFEST = "manifest.json"


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), sort_keys=False, allow_nan=False)


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _records(path) -> Iterator[Tuple[int, int, dict]]:
    """Yield (line number, byte offset, record) for each non-blank line."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from exc
    offset = 0
    for lineno, raw in enumerate(data.split(b"\n"), start=1):
        start = offset
        offset += len(raw) + 1
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw.decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise ParseError("invalid UTF-8", path, lineno, start + exc.start) from exc
        except json.JSONDecodeError as exc:
            col_bytes = len(raw.decode("utf-8", errors="replace")[:exc.pos].encode("utf-8"))
            raise ParseError(exc.msg, path, lineno, start + col_bytes) from exc
        if not isinstance(rec, dict):
            raise ParseError("record is not an object", path, lineno, start)
        yield lineno, start, rec


def _read_header(records, path, fmt: str) -> Tuple[JointSchema, Iterator]:
    it = iter(records)
    try:
        lineno, start, head = next(it)
    except StopIteration:
        raise ParseError("empty file, missing header record", path, 1, 0) from None
    if head.get("format") != fmt:
        raise ParseError(f"expected a {fmt!r} header, got {head.get('format')!r}", path, lineno, start)
    if head.get("version") != VERSION:
        raise ParseError(f"unsupported version {head.get('version')!r}", path, lineno, start)
    return get_schema(str(head.get("schema"))), it


def _header(fmt: str, schema: JointSchema) -> str:
    return _dumps({"format": fmt, "version": VERSION, "schema": schema.name})


def _joint_rows(pose: Pose) -> list:
    return [[j.x, j.y, j.confidence, 1 if j.visible else 0] for j in pose.joints]


def _pose_from_rows(rows, schema: JointSchema, path, lineno, start) -> Pose:
    if not isinstance(rows, list):
        raise ParseError("joints must be a list", path, lineno, start)
    if len(rows) != schema.n_joints:
        raise SchemaMismatch(
            f"{path}: line {lineno}: schema {schema.name!r} expects {schema.n_joints} joints, got {len(rows)}"
        )
    try:
        xy = [(float(r[0]), float(r[1])) for r in rows]
        conf = [float(r[2]) for r in rows]
        vis = [bool(r[3]) for r in rows]
        if any(len(r) != 4 for r in rows):
            raise ValueError("each joint must be [x, y, confidence, visible]")
        return Pose.from_arrays(xy, conf, vis, schema)
    except (TypeError, ValueError, IndexError) as exc:
        raise ParseError(f"bad joint data: {exc}", path, lineno, start) from exc


def _frame_list(by_frame: Dict[int, list], n_frames: Optional[int]) -> List[list]:
    n = max(by_frame, default=-1) + 1
    if n_frames is not None:
        n = max(n, n_frames)
    return [by_frame.get(k, []) for k in range(n)]


def write_poses(path, frames: Sequence[Sequence[Instance]], schema: JointSchema) -> None:
    """Write per-frame instance lists; frame index = position in ``frames``."""
    lines = [_header(POSES_FORMAT, schema)]
    for k, insts in enumerate(frames):
        recs = []
        for inst in insts:
            if inst.pose.schema.n_joints != schema.n_joints:
                raise SchemaMismatch(f"instance with {len(inst.pose)} joints in a {schema.name!r} file")
            rec = {}
            if inst.id is not None:
                rec["id"] = int(inst.id)
            rec["score"] = float(inst.score)
            rec["joints"] = _joint_rows(inst.pose)
            recs.append(rec)
        lines.append(_dumps({"frame": k, "instances": recs}))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_poses(path, n_frames: Optional[int] = None) -> Tuple[List[List[Instance]], JointSchema]:
    schema, it = _read_header(_records(path), path, POSES_FORMAT)
    by_frame: Dict[int, list] = {}
    for lineno, start, rec in it:
        try:
            k = int(rec["frame"])
            items = rec["instances"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"frame record needs 'frame' and 'instances': {exc!r}", path, lineno, start) from exc
        if k < 0 or k in by_frame:
            raise ParseError(f"frame {k} negative or repeated", path, lineno, start)
        insts = []
        for item in items:
            pose = _pose_from_rows(item.get("joints"), schema, path, lineno, start)
            try:
                insts.append(Instance(pose, item.get("id"), item.get("score")))
            except (TypeError, ValueError) as exc:
                raise ParseError(f"bad instance: {exc}", path, lineno, start) from exc
        by_frame[k] = insts
    return _frame_list(by_frame, n_frames), schema


def write_detections(path, frames: Sequence[Sequence[BBox]]) -> None:
    lines = [_dumps({"format": DETECTIONS_FORMAT, "version": VERSION, "schema": None})]
    for k, boxes in enumerate(frames):
        lines.append(_dumps({"frame": k, "boxes": [[b.x_min, b.y_min, b.x_max, b.y_max, b.score] for b in boxes]}))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_detections(path, n_frames: Optional[int] = None) -> List[List[BBox]]:
    it = iter(_records(path))
    try:
        lineno, start, head = next(it)
    except StopIteration:
        raise ParseError("empty file, missing header record", path, 1, 0) from None
    if head.get("format") != DETECTIONS_FORMAT or head.get("version") != VERSION:
        raise ParseError(f"expected a {DETECTIONS_FORMAT!r} v{VERSION} header", path, lineno, start)
    by_frame: Dict[int, list] = {}
    for lineno, start, rec in it:
        try:
            k = int(rec["frame"])
            boxes = [BBox(float(b[0]), float(b[1]), float(b[2]), float(b[3]), float(b[4])) for b in rec["boxes"]]
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise ParseError(f"bad detection record: {exc}", path, lineno, start) from exc
        if k < 0 or k in by_frame:
            raise ParseError(f"frame {k} negative or repeated", path, lineno, start)
        by_frame[k] = boxes
    return _frame_list(by_frame, n_frames)


def write_gt(path, gt: GroundTruth) -> None:
    lines = [_header(GT_FORMAT, gt.schema)]
    for k, people in enumerate(gt.frames):
        recs = [{"track_id": p.track_id, "head_size": p.head_size, "joints": _joint_rows(p.pose)} for p in people]
        lines.append(_dumps({"frame": k, "people": recs}))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_gt(path, n_frames: Optional[int] = None) -> GroundTruth:
    schema, it = _read_header(_records(path), path, GT_FORMAT)
    by_frame: Dict[int, list] = {}
    for lineno, start, rec in it:
        try:
            k = int(rec["frame"])
            items = rec["people"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"frame record needs 'frame' and 'people': {exc!r}", path, lineno, start) from exc
        if k < 0 or k in by_frame:
            raise ParseError(f"frame {k} negative or repeated", path, lineno, start)
        people = []
        for item in items:
            pose = _pose_from_rows(item.get("joints"), schema, path, lineno, start)
            try:
                people.append(GTPerson(int(item["track_id"]), pose, float(item["head_size"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad ground-truth person: {exc}", path, lineno, start) from exc
        by_frame[k] = people
    try:
        return GroundTruth(_frame_list(by_frame, n_frames), schema)
    except ValueError as exc:
        raise ParseError(str(exc), path) from exc


def flow_filename(k: int) -> str:
    """File holding the field from frame k-1 to frame k."""
    return f"{k:06d}.flo"


class FlowDirectory(Mapping):
    """Lazy ``{k: field k-1 -> k}`` view over a directory of .flo files."""

    def __init__(self, root, n_frames: int, shape: Optional[Tuple[int, int]] = None):
        self.root = Path(root)
        self.n_frames = n_frames
        self.shape = shape
        self._cache: Dict[int, FlowField] = {}

    def _path(self, k: int) -> Path:
        return self.root / flow_filename(k)

    def __getitem__(self, k):
        if not isinstance(k, int) or not 1 <= k < self.n_frames or not self._path(k).is_file():
            raise KeyError(k)
        if k not in self._cache:
            f = read_flo(self._path(k))
            if self.shape is not None and f.shape != self.shape:
                raise ParseError(f"flow is {f.width}x{f.height}, bundle frames are "
                                 f"{self.shape[1]}x{self.shape[0]}", self._path(k))
            self._cache = {k: f}  # consecutive access only needs the newest field
        return self._cache[k]

    def __iter__(self):
        return (k for k in range(1, self.n_frames) if self._path(k).is_file())

    def __len__(self):
        return sum(1 for _ in self)


@dataclass
class SequenceBundle:
    root: Path
    n_frames: int
    width: int
    height: int
    schema: JointSchema
    detections: str = "detections.jsonl"
    poses: Optional[str] = "poses.jsonl"
    flow_dir: Optional[str] = "flow"
    gt: Optional[str] = "gt.jsonl"

    def path(self, name: Optional[str]) -> Optional[Path]:
        return None if name is None else self.root / name

    def has_flow(self) -> bool:
        d = self.path(self.flow_dir)
        return d is not None and d.is_dir()

    def flows(self) -> FlowDirectory:
        d = self.path(self.flow_dir)
        if d is None or not d.is_dir():
            raise MissingFlow(f"bundle {self.root} has no flow directory")
        return FlowDirectory(d, self.n_frames, (self.height, self.width))

    def manifest(self) -> dict:
        return {
            "n_frames": self.n_frames,
            "width": self.width,
            "height": self.height,
            "schema": self.schema.name,
            "detections": self.detections,
            "poses": self.poses,
            "flow_dir": self.flow_dir,
            "gt": self.gt,
        }


def load_bundle(root) -> SequenceBundle:
    root = Path(root)
    mpath = root / MANIFEST
    try:
        m = json.loads(mpath.read_text())
    except OSError as exc:
        raise InputError(f"cannot read bundle manifest {mpath}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, mpath, exc.lineno, exc.pos) from exc
    try:
        bundle = SequenceBundle(root, int(m["n_frames"]), int(m["width"]), int(m["height"]),
                                get_schema(m["schema"]), m.get("detections", "detections.jsonl"),
                                m.get("poses"), m.get("flow_dir"), m.get("gt"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad manifest: {exc!r}", mpath) from exc
    if bundle.n_frames < 1 or bundle.width < 1 or bundle.height < 1:
        raise ParseError("manifest frame count and size must be positive", mpath)
    if not bundle.path(bundle.detections).is_file():
        raise InputError(f"bundle detections file {bundle.path(bundle.detections)} is missing")
    return bundle


def write_bundle(root, n_frames: int, width: int, height: int, schema: JointSchema,
                 detections: Sequence[Sequence[BBox]], poses: Optional[Sequence[Sequence[Instance]]],
                 flows: Optional[Mapping], gt: Optional[GroundTruth]) -> SequenceBundle:
    """Materialize a bundle under a temporary name, then rename it into place."""
    root = Path(root)
    root.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{root.name}.", dir=root.parent))
    os.chmod(tmp, 0o777 & ~_umask())
    try:
        bundle = SequenceBundle(tmp, n_frames, width, height, schema,
                                poses="poses.jsonl" if poses is not None else None,
                                flow_dir="flow" if flows is not None else None,
                                gt="gt.jsonl" if gt is not None else None)
        write_detections(tmp / bundle.detections, detections)
        if poses is not None:
            write_poses(tmp / bundle.poses, poses, schema)
        if gt is not None:
            write_gt(tmp / bundle.gt, gt)
        if flows is not None:
            (tmp / "flow").mkdir()
            for k in sorted(flows):
                write_flo(tmp / "flow" / flow_filename(k), flows[k])
        atomic_write_text(tmp / MANIFEST, json.dumps(bundle.manifest(), indent=2, sort_keys=True) + "\n")
        if root.exists():
            old = Path(tempfile.mkdtemp(prefix=f".{root.name}.old.", dir=root.parent))
            os.replace(root, old / root.name)
            os.replace(tmp, root)
            shutil.rmtree(old)
        else:
            os.replace(tmp, root)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    bundle.root = root
    return bundle


def format_value(v: float) -> str:
    return "nan" if v != v else repr(float(v))


def write_report(path, report) -> None:
    """Machine-readable ``key=value`` lines for an :class:`EvalReport`."""
    lines = []

    def emit(prefix, st):
        lines.extend([
            f"{prefix}.ap={format_value(st.ap)}",
            f"{prefix}.mota={format_value(st.mota)}",
            f"{prefix}.motp={format_value(st.motp)}",
            f"{prefix}.precision={format_value(st.precision)}",
            f"{prefix}.recall={format_value(st.recall)}",
            f"{prefix}.n_gt={st.n_gt}",
            f"{prefix}.tp={st.tp}",
            f"{prefix}.fp={st.fp}",
            f"{prefix}.fn={st.fn}",
            f"{prefix}.idsw={st.idsw}",
        ])

    emit("total", report.total)
    for name, st in report.groups.items():
        emit(f"group.{name}", st)
    for name, st in report.per_joint.items():
        emit(f"joint.{name}", st)
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_report(path) -> Dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key] = value
    return out


class FileDetector:
    """Detection provider over a detections file."""

    def __init__(self, frames: Sequence[Sequence[BBox]]):
        self.frames = [list(f) for f in frames]

    def detect(self, frame_index: int) -> List[BBox]:
        if 0 <= frame_index < len(self.frames):
            return list(self.frames[frame_index])
        return []


def pose_entries(frames: Sequence[Sequence[Instance]], expand_fraction: float = 0.15
                 ) -> List[List[Tuple[BBox, Instance]]]:
    """Key each stored pose by its expanded tight box; poses without visible joints are skipped."""
    out = []
    for insts in frames:
        row = []
        for inst in insts:
            if not inst.pose.visibility.any():
                continue
            row.append((expand_box(bbox_from_pose(inst.pose), expand_fraction), replace(inst, id=None)))
        out.append(row)
    return out


def bundle_providers(bundle: SequenceBundle, seed: int = 0):
    """(detector, pose provider) backed by the bundle's files.

    Poses come from the poses file when present, otherwise from the ground
    truth; each requested box is answered by the stored pose it overlaps most.
    """
    detector = FileDetector(read_detections(bundle.path(bundle.detections), bundle.n_frames))
    poses_path = bundle.path(bundle.poses)
    if poses_path is not None and poses_path.is_file():
        frames, schema = read_poses(poses_path, bundle.n_frames)
    else:
        gt_path = bundle.path(bundle.gt)
        if gt_path is None or not gt_path.is_file():
            raise InputError(f"bundle {bundle.root} has neither a poses file nor ground truth")
        gt = read_gt(gt_path, bundle.n_frames)
        frames = [[Instance(p.pose, None, 1.0) for p in people] for people in gt.frames]
        schema = gt.schema
    if schema.name != bundle.schema.name:
        raise SchemaMismatch(f"bundle schema is {bundle.schema.name!r}, poses file uses {schema.name!r}")
    provider = BoxMatchedPoseProvider(pose_entries(frames), seed, schema)
    return detector, provider
