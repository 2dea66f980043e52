"""Detection metrics: greedy IoU matching, 101-point average precision, the
0.50:0.05:0.95 summary, and table/CSV emission."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .data import Annotation
from .inference import Detection

IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))
MAX_DETECTIONS = 100  # recall figures are AR@100 in the usual convention


@dataclass
class EvalSummary:
    ap: float  # mean AP over IoU 0.50:0.05:0.95
    ap50: float
    ap75: float
    ar: float  # mean AR@100 over the same thresholds
    ar50: float
    ar75: float
    precision: float  # at IoU 0.5, score threshold 0.5
    recall: float
    f1: float
    per_threshold: dict[float, tuple[float, float]] = field(default_factory=dict)


def match_detections(det_boxes: np.ndarray, det_scores: np.ndarray,
                     gt_boxes: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy one-to-one matching in descending score order.

    Returns a bool true-positive flag per detection, in input order.
    """
    n = len(det_boxes)
    tp = np.zeros(n, dtype=bool)
    if n == 0 or len(gt_boxes) == 0:
        return tp
    ious = kernels.iou_matrix(np.asarray(det_boxes, dtype=np.float64),
                              np.asarray(gt_boxes, dtype=np.float64))
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for i in np.argsort(-np.asarray(det_scores), kind="stable"):
        best, best_iou = -1, -1.0
        for j in range(len(gt_boxes)):
            v = ious[i, j]
            if not taken[j] and v >= iou_threshold and v > best_iou:
                best, best_iou = j, v
        if best >= 0:
            taken[best] = True
            tp[i] = True
    return tp


def precision_recall_f1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Counts -> (precision, recall, F1); empty denominators give 0."""
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def average_precision(scenes, iou_threshold: float,
                      num_points: int = 101) -> float:
    """Interpolated AP over (det_boxes, det_scores, gt_boxes) scenes.

    Matching is greedy per scene; detections are then pooled and ranked by
    score, and the precision envelope is sampled at `num_points` recall values.
    """
    total_gt = sum(len(gt) for _, _, gt in scenes)
    flags, scores = [], []
    for det_boxes, det_scores, gt_boxes in scenes:
        order = np.argsort(-np.asarray(det_scores), kind="stable")[:MAX_DETECTIONS]
        db = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)[order]
        ds = np.asarray(det_scores, dtype=np.float64)[order]
        flags.append(match_detections(db, ds, np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4),
                                      iou_threshold))
        scores.append(ds)
    if total_gt == 0:
        return 0.0
    flags = np.concatenate(flags) if flags else np.zeros(0, dtype=bool)
    scores = np.concatenate(scores) if scores else np.zeros(0)
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp_cum = np.cumsum(flags[order])
    fp_cum = np.cumsum(~flags[order])
    recall = tp_cum / total_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # precision envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    samples = np.linspace(0.0, 1.0, num_points)
    idx = np.searchsorted(recall, samples, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def _recall_at(scenes, iou_threshold: float) -> float:
    total_gt = sum(len(gt) for _, _, gt in scenes)
    if total_gt == 0:
        return 0.0
    matched = 0
    for det_boxes, det_scores, gt_boxes in scenes:
        order = np.argsort(-np.asarray(det_scores), kind="stable")[:MAX_DETECTIONS]
        db = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)[order]
        ds = np.asarray(det_scores, dtype=np.float64)[order]
        matched += int(match_detections(
            db, ds, np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4),
            iou_threshold).sum())
    return matched / total_gt


def _scenes_by_class(detections: Sequence[Detection],
                     annotations: Sequence[Annotation],
                     min_score: float = 0.0):
    """Group into per-class lists of (det_boxes, det_scores, gt_boxes)."""
    per_image = {}
    for det in detections:
        if det.score >= min_score:
            per_image.setdefault(det.image_id, []).append(det)
    labels = sorted({int(l) for ann in annotations for l in ann.labels})
    out = {}
    for label in labels:
        scenes = []
        for ann in annotations:
            gt = ann.boxes_array()
            mask = np.asarray(ann.labels) == label
            dets = [d for d in per_image.get(ann.image_id, []) if d.label == label]
            scenes.append((
                np.array([d.box for d in dets]).reshape(-1, 4),
                np.array([d.score for d in dets]),
                gt[mask] if len(gt) else np.zeros((0, 4)),
            ))
        out[label] = scenes
    return out


def coco_summary(detections: Sequence[Detection],
                 annotations: Sequence[Annotation],
                 score_threshold: float = 0.5) -> EvalSummary:
    """Class-averaged AP/AR over IoU 0.50:0.05:0.95 plus point metrics at
    IoU 0.5 / the given score threshold."""
    known = {ann.image_id for ann in annotations}
    strays = sorted({d.image_id for d in detections} - known)
    if strays:
        raise ValueError(f"detections reference unknown image ids: {strays}")
    by_class = _scenes_by_class(detections, annotations)
    per_threshold = {}
    for thr in IOU_THRESHOLDS:
        aps = [average_precision(scenes, thr) for scenes in by_class.values()]
        ars = [_recall_at(scenes, thr) for scenes in by_class.values()]
        per_threshold[float(thr)] = (float(np.mean(aps)) if aps else 0.0,
                                     float(np.mean(ars)) if ars else 0.0)
    tp = fp = fn = 0
    for scenes in _scenes_by_class(detections, annotations,
                                   min_score=score_threshold).values():
        for det_boxes, det_scores, gt_boxes in scenes:
            flags = match_detections(det_boxes, det_scores, gt_boxes, 0.5)
            tp += int(flags.sum())
            fp += int(len(flags) - flags.sum())
            fn += int(len(gt_boxes) - flags.sum())
    p, r, f1 = precision_recall_f1(tp, fp, fn)
    aps = [v[0] for v in per_threshold.values()]
    ars = [v[1] for v in per_threshold.values()]
    return EvalSummary(
        ap=float(np.mean(aps)), ap50=per_threshold[0.5][0],
        ap75=per_threshold[0.75][0],
        ar=float(np.mean(ars)), ar50=per_threshold[0.5][1],
        ar75=per_threshold[0.75][1],
        precision=p, recall=r, f1=f1, per_threshold=per_threshold,
    )


def pr_curve(detections: Sequence[Detection],
             annotations: Sequence[Annotation],
             iou_threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Pooled (recall, precision) points over all classes at one threshold."""
    flags, scores = [], []
    total_gt = 0
    for scenes in _scenes_by_class(detections, annotations).values():
        for det_boxes, det_scores, gt_boxes in scenes:
            total_gt += len(gt_boxes)
            flags.append(match_detections(det_boxes, det_scores, gt_boxes,
                                          iou_threshold))
            scores.append(det_scores)
    if not flags or total_gt == 0:
        return np.zeros(0), np.zeros(0)
    flags = np.concatenate(flags)
    scores = np.concatenate(scores)
    order = np.argsort(-scores, kind="stable")
    tp_cum = np.cumsum(flags[order])
    fp_cum = np.cumsum(~flags[order])
    return tp_cum / total_gt, tp_cum / (tp_cum + fp_cum)


_FIELDS = ("ap", "ap50", "ap75", "ar", "ar50", "ar75",
           "precision", "recall", "f1")


def summary_table(summary: EvalSummary, title: str = "detection metrics") -> str:
    lines = [title, "-" * len(title)]
    names = {"ap": "AP@[.50:.95]", "ap50": "AP@.50", "ap75": "AP@.75",
             "ar": "AR@100[.50:.95]", "ar50": "AR@100@.50",
             "ar75": "AR@100@.75", "precision": "P@.50/s.50",
             "recall": "R@.50/s.50", "f1": "F1@.50/s.50"}
    for key in _FIELDS:
        lines.append(f"{names[key]:<16} {getattr(summary, key):.4f}")
    return "\n".join(lines)


def write_summary_csv(path: str | Path, summaries: dict[str, EvalSummary]):
    """One row per named summary (e.g. per model variant)."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("name",) + _FIELDS)
        for name, s in summaries.items():
            writer.writerow([name] + [f"{getattr(s, k):.6f}" for k in _FIELDS])
