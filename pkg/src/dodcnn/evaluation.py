"""Average precision, detection AP, late fusion and the JSON metrics record."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .boxes import Box, iou


class UndefinedMetricError(ValueError):
    """AP requested with no positives to recover."""


@dataclass(frozen=True)
class ScoredPrediction:
    score: float
    is_positive: bool


@dataclass(frozen=True)
class Detection:
    image_id: int
    box: Box
    cls: int
    score: float


def average_precision(scores, labels=None, num_positives: int | None = None) -> float:
    """All-points AP: mean over positives of the precision at each positive's rank.

    Accepts a list of :class:`ScoredPrediction` or parallel ``scores``/``labels``.
    Ranking is by descending score with ties kept in input order. ``num_positives``
    overrides the denominator (detection AP counts missed ground truth this way).
    """
    if labels is None:
        preds = list(scores)
        scores = [p.score for p in preds]
        labels = [p.is_positive for p in preds]
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores vs {y.size} labels")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    npos = int(y.sum()) if num_positives is None else int(num_positives)
    if npos <= 0:
        raise UndefinedMetricError("average precision is undefined without positives")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    return float(precision[hits].sum() / npos)


def match_detections(dets: Sequence[Detection], gt: dict[int, list[tuple[int, Box]]], cls: int,
                     iou_thresh: float = 0.5) -> tuple[list[Detection], np.ndarray, int]:
    """Greedy matching of class-``cls`` detections in descending score order.

    A detection is a true positive when it overlaps an still-unmatched gt box of
    the same class with IoU > ``iou_thresh`` (the best such box is taken);
    everything else, duplicates included, is a false positive.
    Returns ``(ranked detections, tp flags, number of gt boxes)``.
    """
    ranked = sorted((d for d in dets if d.cls == cls), key=lambda d: -d.score)
    pool = {img: [b for c, b in objs if c == cls] for img, objs in gt.items()}
    used = {img: np.zeros(len(boxes), dtype=bool) for img, boxes in pool.items()}
    num_gt = sum(len(b) for b in pool.values())
    tp = np.zeros(len(ranked), dtype=bool)
    for i, d in enumerate(ranked):
        boxes = pool.get(d.image_id, [])
        best, best_j = iou_thresh, -1
        for j, b in enumerate(boxes):
            if used[d.image_id][j]:
                continue
            o = iou(d.box, b)
            if o > best:
                best, best_j = o, j
        if best_j >= 0:
            used[d.image_id][best_j] = True
            tp[i] = True
    return ranked, tp, num_gt


def detection_ap(dets: Sequence[Detection], gt: dict[int, list[tuple[int, Box]]], cls: int,
                 iou_thresh: float = 0.5) -> float:
    ranked, tp, num_gt = match_detections(dets, gt, cls, iou_thresh)
    if num_gt == 0:
        raise UndefinedMetricError(f"no ground truth of class {cls}")
    if not ranked:
        return 0.0
    return average_precision([d.score for d in ranked], tp, num_positives=num_gt)


def mean_detection_ap(dets, gt, classes, iou_thresh: float = 0.5) -> float:
    """Macro average of :func:`detection_ap` over the classes that have ground truth."""
    aps = []
    for c in classes:
        try:
            aps.append(detection_ap(dets, gt, c, iou_thresh))
        except UndefinedMetricError:
            continue
    if not aps:
        raise UndefinedMetricError("no class has ground truth")
    return float(np.mean(aps))


def late_fusion(score_sets: Sequence[Sequence[float]], weights: Sequence[float]) -> np.ndarray:
    """Weighted average of per-task image scores after min-max normalisation per task.

    A task whose scores are constant cannot be normalised; it contributes its
    constant value and a ``RuntimeWarning`` is issued.
    """
    if len(score_sets) != len(weights):
        raise ValueError(f"{len(score_sets)} score sets vs {len(weights)} weights")
    if not score_sets:
        raise ValueError("nothing to fuse")
    lengths = {len(s) for s in score_sets}
    if len(lengths) != 1:
        raise ValueError(f"score sets differ in length: {sorted(lengths)}")
    w = np.asarray(weights, dtype=float)
    if not np.isclose(w.sum(), 1.0, atol=1e-9):
        raise ValueError(f"weights must sum to 1, got {w.sum()}")
    fused = np.zeros(lengths.pop())
    for t, (scores, wt) in enumerate(zip(score_sets, w)):
        s = np.asarray(scores, dtype=float)
        lo, hi = s.min(), s.max()
        if hi > lo:
            fused += wt * (s - lo) / (hi - lo)
        else:
            warnings.warn(f"late_fusion: task {t} has constant scores; contributing the constant",
                          RuntimeWarning, stacklevel=2)
            fused += wt * s
    return fused


def metrics_record(task: str, split: str, ap: float, num_pos: int, num_images: int,
                   config_hash: int, **extra) -> dict:
    rec = {"task": task, "split": split, "ap": float(ap), "num_pos": int(num_pos),
           "num_images": int(num_images), "config_hash": f"{config_hash:016x}"}
    rec.update(extra)
    return rec
