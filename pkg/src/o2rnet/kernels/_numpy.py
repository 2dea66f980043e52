"""Pure-numpy reference kernels.

These are the fallback implementations selected when numba is disabled
(O2RNET_NUMBA=0) or unavailable. The numba kernels must agree with these
bit-for-bit on float64 inputs; tests enforce it.
"""

from __future__ import annotations

import numpy as np


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two (N,4) / (M,4) box arrays in xyxy format."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.maximum(0.0, ix2 - ix1) * np.maximum(0.0, iy2 - iy1)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending-score order.

    Ties are broken by input index (stable), so the result is deterministic.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).ravel()
    order = np.argsort(-scores, kind="stable")
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    ious = iou_matrix(boxes, boxes)
    for idx in order:
        if suppressed[idx]:
            continue
        keep.append(idx)
        suppressed |= ious[idx] > iou_threshold
        suppressed[idx] = True
    return np.asarray(keep, dtype=np.int64)


def _bilinear_weights(coord: float, size: int):
    """Clamped bilinear interpolation along one axis: (lo, hi, w_lo, w_hi)."""
    if coord < 0.0:
        coord = 0.0
    if coord > size - 1:
        coord = float(size - 1)
    lo = int(np.floor(coord))
    hi = min(lo + 1, size - 1)
    frac = coord - lo
    return lo, hi, 1.0 - frac, frac


def roi_align_forward(features: np.ndarray, boxes: np.ndarray, pool: int,
                      stride: float) -> np.ndarray:
    """Bilinear RoI pooling: (H,W,C) features + (N,4) image-space boxes -> (N,P,P,C).

    One sample per output bin, taken at the bin center.
    """
    feat = np.asarray(features, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    h, w, c = feat.shape
    n = boxes.shape[0]
    out = np.zeros((n, pool, pool, c), dtype=np.float64)
    for i in range(n):
        x1, y1, x2, y2 = boxes[i]
        bw = (x2 - x1) / pool
        bh = (y2 - y1) / pool
        for p in range(pool):
            cy = (y1 + (p + 0.5) * bh) / stride - 0.5
            ylo, yhi, wy0, wy1 = _bilinear_weights(cy, h)
            for q in range(pool):
                cx = (x1 + (q + 0.5) * bw) / stride - 0.5
                xlo, xhi, wx0, wx1 = _bilinear_weights(cx, w)
                out[i, p, q] = (wy0 * wx0 * feat[ylo, xlo]
                                + wy0 * wx1 * feat[ylo, xhi]
                                + wy1 * wx0 * feat[yhi, xlo]
                                + wy1 * wx1 * feat[yhi, xhi])
    return out


def roi_align_backward(grad_out: np.ndarray, boxes: np.ndarray, height: int,
                       width: int, stride: float) -> np.ndarray:
    """Gradient of roi_align_forward with respect to the feature map."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n, pool, _, c = grad_out.shape
    dfeat = np.zeros((height, width, c), dtype=np.float64)
    for i in range(n):
        x1, y1, x2, y2 = boxes[i]
        bw = (x2 - x1) / pool
        bh = (y2 - y1) / pool
        for p in range(pool):
            cy = (y1 + (p + 0.5) * bh) / stride - 0.5
            ylo, yhi, wy0, wy1 = _bilinear_weights(cy, height)
            for q in range(pool):
                cx = (x1 + (q + 0.5) * bw) / stride - 0.5
                xlo, xhi, wx0, wx1 = _bilinear_weights(cx, width)
                g = grad_out[i, p, q]
                dfeat[ylo, xlo] += wy0 * wx0 * g
                dfeat[ylo, xhi] += wy0 * wx1 * g
                dfeat[yhi, xlo] += wy1 * wx0 * g
                dfeat[yhi, xhi] += wy1 * wx1 * g
    return dfeat
