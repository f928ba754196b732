"""Track-level evaluation: per-track IoU, mean IoU, recall at thresholds.

A track scores the mean rotated IoU between its boxes and the ground truth,
frame by frame. Recall at a threshold alpha is the fraction of tracks whose
score meets or exceeds alpha (inclusive). Tracks split into stationary and
dynamic by the ground-truth displacement rule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .geometry import BevBox, rotated_iou
from .ioutil import atomic_write_text

RC_THRESHOLDS = (0.5, 0.6, 0.7, 0.8)
STATIONARY_MAX_DISPLACEMENT = 1.0  # meters, BEV


@dataclass(frozen=True)
class TrackScore:
    object_id: int
    iou: float            # S: mean per-frame rotated IoU, in [0, 1]
    num_frames: int
    motion_state: str     # "stationary" | "dynamic"


def track_iou(pred_boxes: list[BevBox], gt_boxes: list[BevBox]) -> float:
    """Mean rotated IoU over frame-aligned box sequences."""
    if len(pred_boxes) != len(gt_boxes):
        raise ValueError(f"track length mismatch: {len(pred_boxes)} vs {len(gt_boxes)}")
    if not pred_boxes:
        raise ValueError("empty track")
    return float(sum(rotated_iou(p, g) for p, g in zip(pred_boxes, gt_boxes)) / len(pred_boxes))


def track_iou_by_frame(pred: dict[int, BevBox], gt: dict[int, BevBox]) -> float:
    """Mean IoU over the prediction's frames; frames missing from GT score 0."""
    if not pred:
        raise ValueError("empty track")
    total = 0.0
    for frame, box in pred.items():
        gt_box = gt.get(frame)
        total += rotated_iou(box, gt_box) if gt_box is not None else 0.0
    return total / len(pred)


def motion_state(gt_boxes: list[BevBox],
                 threshold: float = STATIONARY_MAX_DISPLACEMENT) -> str:
    """Stationary when the max displacement between any two GT centers is < threshold."""
    max_disp = 0.0
    n = len(gt_boxes)
    for i in range(n):
        for j in range(i + 1, n):
            d = math.hypot(gt_boxes[i].x - gt_boxes[j].x, gt_boxes[i].y - gt_boxes[j].y)
            if d > max_disp:
                max_disp = d
    return "stationary" if max_disp < threshold else "dynamic"


def score_track(object_id: int, pred_boxes: list[BevBox], gt_boxes: list[BevBox]) -> TrackScore:
    return TrackScore(object_id, track_iou(pred_boxes, gt_boxes), len(pred_boxes),
                      motion_state(gt_boxes))


@dataclass(frozen=True)
class EvalSummary:
    num_tracks: int
    mean_iou: float
    recall: dict[float, float]                 # alpha -> RC@alpha
    by_state: dict[str, dict]                  # state -> {count, mean_iou, recall}


def evaluate_set(scores: list[TrackScore],
                 thresholds: tuple[float, ...] = RC_THRESHOLDS) -> EvalSummary:
    """Aggregate track scores; rejects an empty set."""
    if not scores:
        raise ValueError("evaluate_set needs at least one track")

    def agg(subset):
        if not subset:
            return {"count": 0, "mean_iou": float("nan"),
                    "recall": {a: float("nan") for a in thresholds}}
        mean = sum(s.iou for s in subset) / len(subset)
        rc = {a: sum(1 for s in subset if s.iou >= a) / len(subset) for a in thresholds}
        return {"count": len(subset), "mean_iou": mean, "recall": rc}

    overall = agg(scores)
    by_state = {
        state: agg([s for s in scores if s.motion_state == state])
        for state in ("stationary", "dynamic")
    }
    return EvalSummary(len(scores), overall["mean_iou"], overall["recall"], by_state)


def compare_reports(before: list[TrackScore], after: list[TrackScore]) -> list[dict]:
    """Per-track deltas aligned by object id, plus one aggregate row at the end."""
    b = {s.object_id: s for s in before}
    a = {s.object_id: s for s in after}
    if set(b) != set(a):
        missing = sorted(set(b) ^ set(a))
        raise ValueError(f"object id mismatch between reports: {missing}")
    rows = []
    for oid in sorted(b):
        rows.append({
            "object_id": oid,
            "before": b[oid].iou,
            "after": a[oid].iou,
            "delta": a[oid].iou - b[oid].iou,
        })
    mean_b = sum(s.iou for s in before) / len(before) if before else float("nan")
    mean_a = sum(s.iou for s in after) / len(after) if after else float("nan")
    rows.append({"object_id": "aggregate", "before": mean_b, "after": mean_a,
                 "delta": mean_a - mean_b})
    return rows


def write_comparison_csv(rows: list[dict], path) -> None:
    lines = ["object_id,before,after,delta"]
    for r in rows:
        lines.append(f"{r['object_id']},{float(r['before'])!r},{float(r['after'])!r},"
                     f"{float(r['delta'])!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_report_csv(path, init_scores: list[TrackScore], refined_scores: list[TrackScore],
                     thresholds: tuple[float, ...] = RC_THRESHOLDS) -> None:
    """Per-track table with aggregate footer rows for mean IoU and each RC@alpha.

    Columns: object_id, M, motion_state, S_init, S_refined, delta. Footer rows
    reuse the same columns with the aggregate name in object_id, the track
    count in M, and the bucket in motion_state.
    """
    init_by_id = {s.object_id: s for s in init_scores}
    ref_by_id = {s.object_id: s for s in refined_scores}
    if set(init_by_id) != set(ref_by_id):
        raise ValueError("init/refined object ids differ")
    lines = ["object_id,M,motion_state,S_init,S_refined,delta"]
    for oid in sorted(init_by_id):
        si, sr = init_by_id[oid], ref_by_id[oid]
        lines.append(f"{oid},{si.num_frames},{si.motion_state},"
                     f"{float(si.iou)!r},{float(sr.iou)!r},{float(sr.iou - si.iou)!r}")
    init_sum = evaluate_set(init_scores, thresholds)
    ref_sum = evaluate_set(refined_scores, thresholds)
    lines.append(f"mean_iou,{init_sum.num_tracks},all,"
                 f"{float(init_sum.mean_iou)!r},{float(ref_sum.mean_iou)!r},"
                 f"{float(ref_sum.mean_iou - init_sum.mean_iou)!r}")
    for state in ("stationary", "dynamic"):
        bi, br = init_sum.by_state[state], ref_sum.by_state[state]
        lines.append(f"mean_iou_{state},{bi['count']},{state},"
                     f"{float(bi['mean_iou'])!r},{float(br['mean_iou'])!r},"
                     f"{float(br['mean_iou'] - bi['mean_iou'])!r}")
    for alpha in thresholds:
        ri, rr = init_sum.recall[alpha], ref_sum.recall[alpha]
        lines.append(f"rc@{alpha},{init_sum.num_tracks},all,"
                     f"{float(ri)!r},{float(rr)!r},{float(rr - ri)!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_recall_curve(path, init_scores: list[TrackScore], refined_scores: list[TrackScore],
                       step: float = 0.05) -> None:
    """Plot-ready CSV: threshold, recall_init, recall_refined over [0, 1]."""
    lines = ["threshold,recall_init,recall_refined"]
    n = round(1.0 / step)
    for k in range(n + 1):
        alpha = k * step
        ri = sum(1 for s in init_scores if s.iou >= alpha) / len(init_scores)
        rr = sum(1 for s in refined_scores if s.iou >= alpha) / len(refined_scores)
        lines.append(f"{float(alpha)!r},{float(ri)!r},{float(rr)!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")
