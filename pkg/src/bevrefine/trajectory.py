"""Trajectory samples: the handoff between tracking and refinement.

A sample carries one tracked object's initialization boxes, ground truth, and
per-frame context points, all expressed in the trajectory frame (the frame in
which the middle initialization box has pose (0, 0, 0)). Context points are
cropped generously so training-time box perturbation can re-crop faithfully
without going back to the scene files; the model input applies the exact 10%
enlargement crop on top.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .ioutil import atomic_write_text, fmt_real
from .geometry import (
    BevBox,
    Pose,
    as_points,
    canonicalize_headings,
    crop_points,
    middle_index,
    to_trajectory_frame,
    transform_box,
)

# Crop applied by the model input: box scaled by 1.1 (10% enlargement).
INPUT_ENLARGE = 0.1
# Context crop kept in trajectory files: wide enough that any training-time
# perturbation (+-0.25 m shift, +0.2 m growth) stays inside.
CONTEXT_PAD = 0.5


@dataclass
class TrajectorySample:
    """One tracked object in its trajectory frame, with GT attached."""

    tracklet_id: int
    gt_actor_id: int
    frames: list[int]
    t_end: list[float]            # per-frame sweep end times
    boxes: list[BevBox]           # initialization, headings canonicalized
    gt_boxes: list[BevBox]
    gt_size: tuple[float, float]
    points: list[np.ndarray]      # per-frame context points (n_i, 4)

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def t_ref(self) -> float:
        """Sweep end time of the middle frame."""
        return self.t_end[middle_index(self.num_frames)]


@dataclass(frozen=True)
class TrajectoryInput:
    """What the refinement network consumes for one trajectory."""

    boxes: tuple[BevBox, ...]
    object_points: tuple[np.ndarray, ...]
    t_ref: float

    @property
    def num_frames(self) -> int:
        return len(self.boxes)


@dataclass(frozen=True)
class RefinedTrajectory:
    """Per-frame refined poses plus one trajectory-wide size."""

    poses: tuple[Pose, ...]
    size: tuple[float, float]

    def __post_init__(self):
        l, w = self.size
        if not (l > 0 and w > 0):
            raise ValueError(f"refined size must be positive, got {self.size}")

    def boxes(self) -> list[BevBox]:
        l, w = self.size
        return [BevBox(p.x, p.y, l, w, p.theta) for p in self.poses]


def check_trajectory_input(inp: TrajectoryInput, tol: float = 1e-9) -> None:
    """Validate the trajectory-frame contract: M >= 1 and middle pose ~ (0, 0, 0)."""
    m = inp.num_frames
    if m < 1:
        raise ValueError("trajectory input needs at least one frame")
    if len(inp.object_points) != m:
        raise ValueError(f"boxes/points length mismatch: {m} vs {len(inp.object_points)}")
    mid = inp.boxes[middle_index(m)]
    if max(abs(mid.x), abs(mid.y), abs(mid.theta)) > tol:
        raise ValueError(
            f"middle box pose must be (0, 0, 0) in the trajectory frame, got "
            f"({mid.x}, {mid.y}, {mid.theta})")


def build_input(sample: TrajectorySample, enlarge: float = INPUT_ENLARGE,
                boxes: list[BevBox] | None = None) -> TrajectoryInput:
    """Crop the context points with the (possibly perturbed) boxes and package the input."""
    use_boxes = sample.boxes if boxes is None else boxes
    if len(use_boxes) != sample.num_frames:
        raise ValueError("box override length mismatch")
    object_points = tuple(crop_points(pts, box, enlarge=enlarge)
                          for pts, box in zip(sample.points, use_boxes))
    return TrajectoryInput(tuple(use_boxes), object_points, sample.t_ref)


def extract_samples(scene, tracklet_records: list[dict],
                    context_pad: float = CONTEXT_PAD) -> tuple[list[TrajectorySample], int]:
    """Turn associated tracklets into trajectory-frame samples.

    Headings are canonicalized before re-framing so the middle box lands at
    exactly (0, 0, 0). Unassociated tracklets are skipped; returns
    ``(samples, skipped_count)``.
    """
    gt_lookup: dict[int, dict[int, BevBox]] = {}
    frame_points: dict[int, np.ndarray] = {}
    frame_t_end: dict[int, float] = {}
    for f in scene.frames:
        frame_points[f.index] = f.points
        frame_t_end[f.index] = f.t_end
        for aid, box in f.gt:
            gt_lookup.setdefault(aid, {})[f.index] = box

    samples: list[TrajectorySample] = []
    skipped = 0
    for rec in tracklet_records:
        actor_id = rec["gt_actor_id"]
        if actor_id is None:
            skipped += 1
            continue
        frames, boxes = [], []
        for frame, box in zip(rec["frames"], rec["boxes"]):
            if frame in gt_lookup.get(actor_id, {}):
                frames.append(frame)
                boxes.append(box)
        if not frames:
            skipped += 1
            continue
        boxes = canonicalize_headings(boxes)
        context = [crop_points(frame_points[fr], box, enlarge=INPUT_ENLARGE, pad=context_pad)
                   for fr, box in zip(frames, boxes)]
        traj_boxes, traj_points, ref = to_trajectory_frame(boxes, context)
        gt_boxes = [gt_lookup[actor_id][fr] for fr in frames]
        gt_traj = [transform_box(b, ref) for b in gt_boxes]
        samples.append(TrajectorySample(
            tracklet_id=rec["tracklet_id"],
            gt_actor_id=actor_id,
            frames=frames,
            t_end=[frame_t_end[fr] for fr in frames],
            boxes=traj_boxes,
            gt_boxes=gt_traj,
            gt_size=(gt_traj[0].l, gt_traj[0].w),
            points=traj_points,
        ))
    return samples, skipped


# -- trajectory file format -------------------------------------------------

_fmt = fmt_real


def _fmt_row(vals) -> str:
    return "[" + ",".join(_fmt(v) for v in vals) + "]"


def write_samples(samples: list[TrajectorySample], path) -> None:
    """JSONL, one trajectory sample per line, reals at 9 significant digits."""
    lines = []
    for s in samples:
        points = ",".join("[" + ",".join(_fmt_row(row) for row in pts) + "]" for pts in s.points)
        lines.append(
            '{"tracklet_id":%d,"gt_actor_id":%d,"frames":[%s],"t_end":[%s],'
            '"boxes":[%s],"gt_boxes":[%s],"gt_size":%s,"points":[%s]}'
            % (
                s.tracklet_id,
                s.gt_actor_id,
                ",".join(str(f) for f in s.frames),
                ",".join(_fmt(t) for t in s.t_end),
                ",".join(_fmt_row(b.to_list()) for b in s.boxes),
                ",".join(_fmt_row(b.to_list()) for b in s.gt_boxes),
                _fmt_row(s.gt_size),
                points,
            ))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_samples(path) -> list[TrajectorySample]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        raw_lines = f.read().splitlines()
    for lineno, raw in enumerate(raw_lines, start=1):
        try:
            obj = json.loads(raw)
            pts = [as_points(np.array(p, dtype=np.float64).reshape(-1, 4)) for p in obj["points"]]
            sample = TrajectorySample(
                tracklet_id=int(obj["tracklet_id"]),
                gt_actor_id=int(obj["gt_actor_id"]),
                frames=[int(v) for v in obj["frames"]],
                t_end=[float(v) for v in obj["t_end"]],
                boxes=[BevBox.from_list(b) for b in obj["boxes"]],
                gt_boxes=[BevBox.from_list(b) for b in obj["gt_boxes"]],
                gt_size=(float(obj["gt_size"][0]), float(obj["gt_size"][1])),
                points=pts,
            )
            n = sample.num_frames
            if not (len(sample.boxes) == len(sample.gt_boxes) == len(sample.points)
                    == len(sample.t_end) == n):
                raise ValueError("per-frame field lengths differ")
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, IndexError) as exc:
            raise ValueError(f"trajectory file line {lineno}: {exc}") from exc
        out.append(sample)
    return out


def write_refined(records: list[dict], path) -> None:
    """JSONL of refinement outputs: poses, shared size, wall-clock seconds."""
    lines = []
    for r in records:
        refined: RefinedTrajectory = r["refined"]
        lines.append(
            '{"tracklet_id":%d,"gt_actor_id":%d,"frames":[%s],"poses":[%s],'
            '"size":%s,"wall_time_s":%s}'
            % (
                r["tracklet_id"],
                r["gt_actor_id"],
                ",".join(str(f) for f in r["frames"]),
                ",".join(_fmt_row((p.x, p.y, p.theta)) for p in refined.poses),
                _fmt_row(refined.size),
                _fmt(r["wall_time_s"]),
            ))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_refined(path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        raw_lines = f.read().splitlines()
    for lineno, raw in enumerate(raw_lines, start=1):
        try:
            obj = json.loads(raw)
            poses = tuple(Pose(float(p[0]), float(p[1]), float(p[2])) for p in obj["poses"])
            rec = {
                "tracklet_id": int(obj["tracklet_id"]),
                "gt_actor_id": int(obj["gt_actor_id"]),
                "frames": [int(v) for v in obj["frames"]],
                "refined": RefinedTrajectory(poses, (float(obj["size"][0]), float(obj["size"][1]))),
                "wall_time_s": float(obj["wall_time_s"]),
            }
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, IndexError) as exc:
            raise ValueError(f"refined file line {lineno}: {exc}") from exc
        out.append(rec)
    return out
