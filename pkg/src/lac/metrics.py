"""Frame-level mAP, event-level mAP at temporal IoU thresholds, and retarget MSE.

Average precision uses step interpolation: the mean of the precision values at
the ranks of the true positives, divided over all ground-truth positives.
Ties in score are broken by ascending frame (or event) index.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .skeleton import SkeletonSequence


@dataclass(frozen=True)
class EventSegment:
    class_id: int
    start_frame: int
    end_frame: int  # exclusive
    score: float = 1.0

    def __post_init__(self):
        if self.start_frame >= self.end_frame:
            raise ValueError(f"event needs start < end, got [{self.start_frame}, {self.end_frame})")


def _rank(scores: np.ndarray) -> np.ndarray:
    # stable sort on the negated score keeps ascending index among ties
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def average_precision(scores: np.ndarray, is_positive: np.ndarray, num_positives: int | None = None) -> float:
    order = _rank(scores)
    hits = np.asarray(is_positive, dtype=bool)[order]
    total = int(hits.sum()) if num_positives is None else num_positives
    if total == 0:
        raise ValueError("no positives")
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits].sum() / total)


def frame_map(scores: np.ndarray, labels: np.ndarray) -> dict:
    """Per-class AP over frames; classes without positive frames are skipped and listed."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be matching T x C arrays")
    per_class, skipped = {}, []
    for c in range(scores.shape[1]):
        if labels[:, c].sum() == 0:
            skipped.append(c)
            continue
        per_class[c] = average_precision(scores[:, c], labels[:, c] > 0)
    if not per_class:
        raise ValueError("no positives: every class has all-zero labels")
    return {"per_class": per_class, "mAP": float(np.mean(list(per_class.values()))), "skipped": skipped}


def extract_events(scores: np.ndarray, threshold: float = 0.5) -> list[EventSegment]:
    """Maximal runs of frames with score >= threshold, per class; score = mean over the run."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 1:
        scores = scores[:, None]
    events = []
    for c in range(scores.shape[1]):
        on = np.concatenate([[False], scores[:, c] >= threshold, [False]])
        edges = np.flatnonzero(on[1:] != on[:-1])
        for s, e in zip(edges[::2], edges[1::2]):
            events.append(EventSegment(c, int(s), int(e), float(scores[s:e, c].mean())))
    return events


def temporal_iou(a: EventSegment, b: EventSegment) -> float:
    inter = max(0, min(a.end_frame, b.end_frame) - max(a.start_frame, b.start_frame))
    union = (a.end_frame - a.start_frame) + (b.end_frame - b.start_frame) - inter
    return inter / union


def match_events(preds: list[EventSegment], gts: list[EventSegment], iou_threshold: float) -> np.ndarray:
    """Greedy matching for one class: predictions in rank order take the unmatched
    ground truth of highest IoU (lowest index on ties) if that IoU reaches the threshold.
    Returns a true-positive flag per prediction, in the input order."""
    tp = np.zeros(len(preds), dtype=bool)
    used = np.zeros(len(gts), dtype=bool)
    for i in _rank([p.score for p in preds]):
        best, best_j = -1.0, -1
        for j, g in enumerate(gts):
            if used[j]:
                continue
            iou = temporal_iou(preds[i], g)
            if iou >= iou_threshold and iou > best:
                best, best_j = iou, j
        if best_j >= 0:
            used[best_j] = True
            tp[i] = True
    return tp


def event_map(predicted: list[EventSegment], ground_truth: list[EventSegment], iou_threshold: float = 0.5) -> dict:
    """Detection-style mAP over classes present in the ground truth."""
    if not ground_truth:
        raise ValueError("ground truth must contain at least one event")
    per_class = {}
    for c in sorted({g.class_id for g in ground_truth}):
        gts = [g for g in ground_truth if g.class_id == c]
        preds = [p for p in predicted if p.class_id == c]
        if not preds:
            per_class[c] = 0.0
            continue
        tp = match_events(preds, gts, iou_threshold)
        per_class[c] = average_precision(np.array([p.score for p in preds]), tp, num_positives=len(gts))
    return {"per_class": per_class, "mAP": float(np.mean(list(per_class.values()))), "iou_threshold": iou_threshold}


def retarget_mse(predicted: SkeletonSequence | np.ndarray, target: SkeletonSequence | np.ndarray) -> float:
    a = np.asarray(predicted.frames if isinstance(predicted, SkeletonSequence) else predicted, dtype=np.float64)
    b = np.asarray(target.frames if isinstance(target, SkeletonSequence) else target, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))
