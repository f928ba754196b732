"""Greedy online multi-object tracker over BEV detections.

Per frame: NMS, score filter, greedy nearest-centroid matching against
extrapolated tracklet positions, score update with a geometric-decay weight,
decay for unmatched tracklets, termination below a score floor, and a final
NMS over the live tracklets. Also provides the heuristic that associates a
finished tracklet with the ground-truth actor it most often overlaps.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

from .geometry import BevBox, normalize_angle, rotated_iou
from .ioutil import atomic_write_text, fmt_real

_DECAY = 0.9


@dataclass(frozen=True)
class Detection:
    box: BevBox
    score: float
    frame: int = 0

    def __post_init__(self):
        if not 0.0 < self.score <= 1.0:
            raise ValueError(f"detection score must be in (0, 1], got {self.score}")


@dataclass
class TrackletEntry:
    frame: int
    box: BevBox
    was_matched: bool
    score: float  # tracklet confidence after this frame's update


@dataclass
class Tracklet:
    id: int
    entries: list[TrackletEntry] = field(default_factory=list)
    score: float = 0.0

    @property
    def steps(self) -> int:
        return len(self.entries)

    @property
    def frames(self) -> list[int]:
        return [e.frame for e in self.entries]

    @property
    def boxes(self) -> list[BevBox]:
        return [e.box for e in self.entries]

    @property
    def last_box(self) -> BevBox:
        return self.entries[-1].box


@dataclass(frozen=True)
class TrackerConfig:
    nms_iou: float = 0.1
    score_min_det: float = 0.1
    match_dist_max: float = 5.0
    decay: float = _DECAY
    terminate_below: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.nms_iou <= 1.0:
            raise ValueError(f"nms_iou must be in [0, 1], got {self.nms_iou}")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        if self.match_dist_max <= 0 or self.terminate_below < 0 or self.score_min_det < 0:
            raise ValueError("thresholds out of range")


def nms(detections: list[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy NMS by descending score; drops any box overlapping a kept one above the threshold."""
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    kept: list[Detection] = []
    for i in order:
        d = detections[i]
        if all(rotated_iou(d.box, k.box) <= iou_thresh for k in kept):
            kept.append(d)
    return kept


def predict_position(tracklet: Tracklet) -> tuple[float, float]:
    """Constant-velocity extrapolation of the next center from the last two entries."""
    if tracklet.steps < 1:
        raise ValueError("cannot predict from an empty tracklet")
    last = tracklet.entries[-1].box
    if tracklet.steps >= 2:
        prev = tracklet.entries[-2].box
        return (2.0 * last.x - prev.x, 2.0 * last.y - prev.y)
    return (last.x, last.y)


def _predict_heading(tracklet: Tracklet) -> float:
    last = tracklet.entries[-1].box.theta
    if tracklet.steps >= 2:
        prev = tracklet.entries[-2].box.theta
        return normalize_angle(last + normalize_angle(last - prev))
    return last


def greedy_match(tracklets: list[Tracklet], detections: list[Detection],
                 match_dist_max: float = 5.0) -> dict[int, int | None]:
    """Assign each tracklet its nearest unclaimed detection, high-score tracklets first.

    Returns tracklet id -> detection index (into ``detections``) or None.
    Distances above ``match_dist_max`` never match.
    """
    order = sorted(tracklets, key=lambda t: (-t.score, t.id))
    claimed: set[int] = set()
    assignment: dict[int, int | None] = {}
    for t in order:
        px, py = predict_position(t)
        best, best_dist = None, math.inf
        for j, det in enumerate(detections):
            if j in claimed:
                continue
            dist = math.hypot(det.box.x - px, det.box.y - py)
            if dist < best_dist:
                best, best_dist = j, dist
        if best is None or best_dist > match_dist_max:
            assignment[t.id] = None
        else:
            assignment[t.id] = best
            claimed.add(best)
    return assignment


def update_matched_score(c_old: float, steps_old: int) -> float:
    """Tracklet confidence after a match: (w * c_old + 1.0) / (w + 1.0), w = sum of 0.9^i."""
    if steps_old < 1:
        raise ValueError(f"steps_old must be >= 1, got {steps_old}")
    w = 0.0
    for i in range(1, steps_old + 1):
        w += _DECAY ** i
    return (w * c_old + 1.0) / (w + 1.0)


class TrackerState:
    """Mutable per-scene tracker; feed frames in increasing order via :meth:`step`."""

    def __init__(self, config: TrackerConfig | None = None):
        self.config = config or TrackerConfig()
        self.active: list[Tracklet] = []
        self.finished: list[Tracklet] = []
        self._next_id = 0
        self._last_frame: int | None = None

    def all_tracklets(self) -> list[Tracklet]:
        return sorted(self.finished + self.active, key=lambda t: t.id)

    def step(self, frame: int, detections: list[Detection]) -> None:
        if self._last_frame is not None and frame <= self._last_frame:
            raise ValueError(f"frames must be strictly increasing: {frame} after {self._last_frame}")
        self._last_frame = frame
        cfg = self.config

        kept = nms(detections, cfg.nms_iou)
        kept = [d for d in kept if d.score >= cfg.score_min_det]

        assignment = greedy_match(self.active, kept, cfg.match_dist_max)
        matched_det_idx = {j for j in assignment.values() if j is not None}

        for t in self.active:
            j = assignment.get(t.id)
            if j is not None:
                det = kept[j]
                t.score = update_matched_score(t.score, t.steps)
                t.entries.append(TrackletEntry(frame, det.box, True, t.score))
            else:
                px, py = predict_position(t)
                heading = _predict_heading(t)
                last = t.last_box
                t.score = cfg.decay * t.score
                t.entries.append(TrackletEntry(
                    frame, BevBox(px, py, last.l, last.w, heading), False, t.score))

        for j, det in enumerate(kept):
            if j in matched_det_idx:
                continue
            t = Tracklet(id=self._next_id, score=det.score)
            self._next_id += 1
            t.entries.append(TrackletEntry(frame, det.box, True, det.score))
            self.active.append(t)

        survivors = []
        for t in self.active:
            if t.score < cfg.terminate_below:
                self.finished.append(t)
            else:
                survivors.append(t)
        self.active = survivors

        # Final NMS over the live tracklets' current boxes; losers terminate.
        order = sorted(self.active, key=lambda t: (-t.score, t.id))
        kept_tracks: list[Tracklet] = []
        for t in order:
            if all(rotated_iou(t.last_box, k.last_box) <= cfg.nms_iou for k in kept_tracks):
                kept_tracks.append(t)
            else:
                self.finished.append(t)
        kept_ids = {t.id for t in kept_tracks}
        self.active = [t for t in self.active if t.id in kept_ids]


def track_scene(frame_detections: list[tuple[int, list[Detection]]],
                config: TrackerConfig | None = None) -> list[Tracklet]:
    """Run the tracker over (frame_index, detections) pairs; returns all tracklets by id."""
    state = TrackerState(config)
    for frame, dets in frame_detections:
        state.step(frame, dets)
    return state.all_tracklets()


def associate_gt(tracklet: Tracklet, gt_tracks: dict[int, dict[int, BevBox]],
                 min_iou: float = 0.1) -> int | None:
    """Ground-truth actor id this tracklet most often overlaps, or None (false positive).

    For each tracklet frame, the GT box with maximum rotated IoU counts as a
    vote if that IoU is at least ``min_iou``; the modal actor id wins, ties
    going to the smaller id.
    """
    if tracklet.steps < 1:
        raise ValueError("cannot associate an empty tracklet")
    votes: Counter[int] = Counter()
    for entry in tracklet.entries:
        best_id, best_iou = None, 0.0
        for actor_id in sorted(gt_tracks):
            box = gt_tracks[actor_id].get(entry.frame)
            if box is None:
                continue
            iou = rotated_iou(entry.box, box)
            if iou > best_iou:
                best_id, best_iou = actor_id, iou
        if best_id is not None and best_iou >= min_iou:
            votes[best_id] += 1
    if not votes:
        return None
    top = max(votes.values())
    return min(aid for aid, n in votes.items() if n == top)


def gt_tracks_from_scene(scene) -> dict[int, dict[int, BevBox]]:
    """actor_id -> {frame_index -> box} lookup from a datagen Scene."""
    tracks: dict[int, dict[int, BevBox]] = {}
    for f in scene.frames:
        for aid, box in f.gt:
            tracks.setdefault(aid, {})[f.index] = box
    return tracks


def detections_from_scene(scene) -> list[tuple[int, list[Detection]]]:
    return [
        (f.index, [Detection(box, score, f.index) for box, score in f.detections])
        for f in scene.frames
    ]


# -- tracklet file format --------------------------------------------------

_fmt = fmt_real


def write_tracklets(tracklets: list[Tracklet], associations: dict[int, int | None], path) -> None:
    """JSONL: one object per tracklet with frames, boxes, per-frame scores, GT association."""
    lines = []
    for t in sorted(tracklets, key=lambda t: t.id):
        gt_id = associations.get(t.id)
        boxes = ",".join("[" + ",".join(_fmt(v) for v in e.box.to_list()) + "]"
                         for e in t.entries)
        scores = ",".join(_fmt(e.score) for e in t.entries)
        frames = ",".join(str(e.frame) for e in t.entries)
        lines.append('{"tracklet_id":%d,"gt_actor_id":%s,"frames":[%s],"boxes":[%s],"scores":[%s]}'
                     % (t.id, "null" if gt_id is None else str(gt_id), frames, boxes, scores))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_tracklets(path) -> list[dict]:
    """Parse the tracklet JSONL into dicts with BevBox lists; errors name the line."""
    out = []
    with open(path, "r", encoding="utf-8") as f:
        raw_lines = f.read().splitlines()
    for lineno, raw in enumerate(raw_lines, start=1):
        try:
            obj = json.loads(raw)
            rec = {
                "tracklet_id": int(obj["tracklet_id"]),
                "gt_actor_id": None if obj["gt_actor_id"] is None else int(obj["gt_actor_id"]),
                "frames": [int(v) for v in obj["frames"]],
                "boxes": [BevBox.from_list(b) for b in obj["boxes"]],
                "scores": [float(s) for s in obj["scores"]],
            }
            if not (len(rec["frames"]) == len(rec["boxes"]) == len(rec["scores"])):
                raise ValueError("frames/boxes/scores length mismatch")
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"tracklet file line {lineno}: {exc}") from exc
        out.append(rec)
    return out
