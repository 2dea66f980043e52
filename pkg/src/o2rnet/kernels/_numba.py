"""Numba-compiled kernels. Must match kernels._numpy exactly on float64."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _iou_matrix_jit(a, b):
    n = a.shape[0]
    m = b.shape[0]
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        ax1, ay1, ax2, ay2 = a[i, 0], a[i, 1], a[i, 2], a[i, 3]
        area_a = (ax2 - ax1) * (ay2 - ay1)
        for j in range(m):
            ix1 = max(ax1, b[j, 0])
            iy1 = max(ay1, b[j, 1])
            ix2 = min(ax2, b[j, 2])
            iy2 = min(ay2, b[j, 3])
            iw = ix2 - ix1
            ih = iy2 - iy1
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            union = area_a + (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1]) - inter
            if union > 0.0:
                out[i, j] = inter / union
    return out


def iou_matrix(boxes_a, boxes_b):
    a = np.ascontiguousarray(np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4))
    b = np.ascontiguousarray(np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4))
    return _iou_matrix_jit(a, b)


@njit(cache=True)
def _nms_jit(boxes, scores, order, iou_threshold):
    n = boxes.shape[0]
    suppressed = np.zeros(n, dtype=np.bool_)
    keep = np.empty(n, dtype=np.int64)
    count = 0
    for oi in range(n):
        i = order[oi]
        if suppressed[i]:
            continue
        keep[count] = i
        count += 1
        x1, y1, x2, y2 = boxes[i, 0], boxes[i, 1], boxes[i, 2], boxes[i, 3]
        area_i = (x2 - x1) * (y2 - y1)
        for oj in range(oi + 1, n):
            j = order[oj]
            if suppressed[j]:
                continue
            ix1 = max(x1, boxes[j, 0])
            iy1 = max(y1, boxes[j, 1])
            ix2 = min(x2, boxes[j, 2])
            iy2 = min(y2, boxes[j, 3])
            iw = ix2 - ix1
            ih = iy2 - iy1
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            union = area_i + (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1]) - inter
            if union > 0.0 and inter / union > iou_threshold:
                suppressed[j] = True
    return keep[:count]


def nms_indices(boxes, scores, iou_threshold):
    boxes = np.ascontiguousarray(np.asarray(boxes, dtype=np.float64).reshape(-1, 4))
    scores = np.asarray(scores, dtype=np.float64).ravel()
    order = np.argsort(-scores, kind="stable")
    return _nms_jit(boxes, scores, order, float(iou_threshold))


@njit(cache=True, inline="always")
def _clamped_bilinear(coord, size):
    if coord < 0.0:
        coord = 0.0
    if coord > size - 1:
        coord = float(size - 1)
    lo = int(np.floor(coord))
    hi = min(lo + 1, size - 1)
    frac = coord - lo
    return lo, hi, 1.0 - frac, frac


@njit(cache=True)
def _roi_align_fwd_jit(feat, boxes, pool, stride):
    h, w, c = feat.shape
    n = boxes.shape[0]
    out = np.zeros((n, pool, pool, c), dtype=np.float64)
    for i in range(n):
        x1, y1, x2, y2 = boxes[i, 0], boxes[i, 1], boxes[i, 2], boxes[i, 3]
        bw = (x2 - x1) / pool
        bh = (y2 - y1) / pool
        for p in range(pool):
            cy = (y1 + (p + 0.5) * bh) / stride - 0.5
            ylo, yhi, wy0, wy1 = _clamped_bilinear(cy, h)
            for q in range(pool):
                cx = (x1 + (q + 0.5) * bw) / stride - 0.5
                xlo, xhi, wx0, wx1 = _clamped_bilinear(cx, w)
                for ch in range(c):
                    out[i, p, q, ch] = (wy0 * wx0 * feat[ylo, xlo, ch]
                                        + wy0 * wx1 * feat[ylo, xhi, ch]
                                        + wy1 * wx0 * feat[yhi, xlo, ch]
                                        + wy1 * wx1 * feat[yhi, xhi, ch])
    return out


def roi_align_forward(features, boxes, pool, stride):
    feat = np.ascontiguousarray(np.asarray(features, dtype=np.float64))
    boxes = np.ascontiguousarray(np.asarray(boxes, dtype=np.float64).reshape(-1, 4))
    return _roi_align_fwd_jit(feat, boxes, int(pool), float(stride))


@njit(cache=True)
def _roi_align_bwd_jit(grad_out, boxes, height, width, stride):
    n, pool, _, c = grad_out.shape
    dfeat = np.zeros((height, width, c), dtype=np.float64)
    for i in range(n):
        x1, y1, x2, y2 = boxes[i, 0], boxes[i, 1], boxes[i, 2], boxes[i, 3]
        bw = (x2 - x1) / pool
        bh = (y2 - y1) / pool
        for p in range(pool):
            cy = (y1 + (p + 0.5) * bh) / stride - 0.5
            ylo, yhi, wy0, wy1 = _clamped_bilinear(cy, height)
            for q in range(pool):
                cx = (x1 + (q + 0.5) * bw) / stride - 0.5
                xlo, xhi, wx0, wx1 = _clamped_bilinear(cx, width)
                for ch in range(c):
                    g = grad_out[i, p, q, ch]
                    dfeat[ylo, xlo, ch] += wy0 * wx0 * g
                    dfeat[ylo, xhi, ch] += wy0 * wx1 * g
                    dfeat[yhi, xlo, ch] += wy1 * wx0 * g
                    dfeat[yhi, xhi, ch] += wy1 * wx1 * g
    return dfeat


def roi_align_backward(grad_out, boxes, height, width, stride):
    grad_out = np.ascontiguousarray(np.asarray(grad_out, dtype=np.float64))
    boxes = np.ascontiguousarray(np.asarray(boxes, dtype=np.float64).reshape(-1, 4))
    return _roi_align_bwd_jit(grad_out, boxes, int(height), int(width), float(stride))
