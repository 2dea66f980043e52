"""Independent brute-force oracles used by unit and acceptance tests.

These deliberately avoid the library's fast paths: rasterized counting for
IoU, pure-python pairwise suppression for NMS, and exhaustive threshold
enumeration for PR curves.
"""

from __future__ import annotations

import numpy as np


def rasterized_iou(a, b, resolution=0.05):
    """IoU via counting raster cells whose center falls inside each box.

    Exact when box coordinates are multiples of `resolution`; the caller is
    responsible for alignment.
    """
    x_lo = min(a[0], b[0])
    y_lo = min(a[1], b[1])
    x_hi = max(a[2], b[2])
    y_hi = max(a[3], b[3])
    xs = np.arange(x_lo + resolution / 2, x_hi, resolution)
    ys = np.arange(y_lo + resolution / 2, y_hi, resolution)
    xg, yg = np.meshgrid(xs, ys)
    in_a = (xg >= a[0]) & (xg < a[2]) & (yg >= a[1]) & (yg < a[3])
    in_b = (xg >= b[0]) & (xg < b[2]) & (yg >= b[1]) & (yg < b[3])
    inter = np.count_nonzero(in_a & in_b)
    union = np.count_nonzero(in_a | in_b)
    return inter / union if union else 0.0


def pairwise_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter <= 0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def brute_force_nms(boxes, scores, iou_threshold):
    """Reference greedy suppression: returns kept indices, score-descending,
    ties by input index."""
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(pairwise_iou(boxes[i], boxes[j]) <= iou_threshold for j in kept):
            kept.append(i)
    return kept


def greedy_match(det_boxes, det_scores, gt_boxes, iou_threshold):
    """Reference detection/GT matching: detections in score order each take
    the unmatched GT of highest IoU >= threshold. Returns (tp_flags, n_matched)."""
    order = sorted(range(len(det_boxes)), key=lambda i: (-det_scores[i], i))
    matched = [False] * len(gt_boxes)
    tp = [False] * len(det_boxes)
    for i in order:
        best_j, best_iou = -1, -1.0
        for j in range(len(gt_boxes)):
            if matched[j]:
                continue
            v = pairwise_iou(det_boxes[i], gt_boxes[j])
            if v >= iou_threshold and v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0:
            matched[best_j] = True
            tp[i] = True
    return tp, sum(matched)


def exhaustive_average_precision(scenes, iou_threshold, num_points=101):
    """PR-curve AP by enumerating every score threshold.

    `scenes` is a list of (det_boxes, det_scores, gt_boxes) triples. Matching
    is per-scene greedy; the PR curve is built over the pooled ranked
    detections and integrated with `num_points`-point interpolation.
    """
    rows = []  # (score, is_tp)
    total_gt = 0
    for det_boxes, det_scores, gt_boxes in scenes:
        total_gt += len(gt_boxes)
        tp, _ = greedy_match(det_boxes, det_scores, gt_boxes, iou_threshold)
        for s, flag in zip(det_scores, tp):
            rows.append((s, flag))
    if total_gt == 0:
        return 0.0
    rows.sort(key=lambda r: -r[0])
    tps = np.cumsum([r[1] for r in rows]) if rows else np.array([])
    fps = np.cumsum([not r[1] for r in rows]) if rows else np.array([])
    if len(rows) == 0:
        return 0.0
    recall = tps / total_gt
    precision = tps / (tps + fps)
    # precision envelope, then sample recall grid
    ap = 0.0
    for r in np.linspace(0, 1, num_points):
        p = precision[recall >= r].max() if np.any(recall >= r) else 0.0
        ap += p / num_points
    return float(ap)
