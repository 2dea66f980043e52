"""Box arithmetic: IoU, NMS, anchors, delta coding, and proposal expansion.

Boxes use continuous half-open pixel coordinates with origin top-left, so
area = (x2-x1)*(y2-y1) with no +1 correction. Everything here is pure and
stateless; batch-level paths go through the kernels subpackage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import kernels


class Branch(str, Enum):
    OCCLUDER = "occluder"
    OCCLUDEE = "occludee"


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x1, self.y1, self.x2, self.y2)):
            raise ValueError(f"non-finite box coordinates: {self}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"inverted box: {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def clip(self, image_size: tuple[float, float]) -> "Box":
        """Clip to [0, W] x [0, H]."""
        w, h = image_size
        return Box(
            min(max(self.x1, 0.0), w),
            min(max(self.y1, 0.0), h),
            min(max(self.x2, 0.0), w),
            min(max(self.y2, 0.0), h),
        )

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class ScoredBox:
    box: Box
    score: float
    label: int = 1
    branch: Branch = Branch.OCCLUDER

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score outside [0,1]: {self.score}")


@dataclass(frozen=True)
class AnchorConfig:
    strides: tuple[int, ...] = (8,)
    scales: tuple[float, ...] = (32.0, 64.0, 128.0)
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)

    def __post_init__(self):
        if not (self.strides and self.scales and self.aspect_ratios):
            raise ValueError("anchor config lists must be non-empty")
        if any(v <= 0 for v in (*self.strides, *self.scales, *self.aspect_ratios)):
            raise ValueError("anchor config values must be positive")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)


@dataclass(frozen=True)
class FESConfig:
    t: int = 1
    k: int = 8
    step_frac: float = 0.1
    # Alternative expansion reading: translate the whole box instead of
    # extending faces. Face extension is the default.
    mode: str = "extend"

    def __post_init__(self):
        if self.t < 0:
            raise ValueError("expansion steps t must be >= 0")
        if self.k <= 0:
            raise ValueError("direction count k must be positive")
        if self.step_frac <= 0:
            raise ValueError("step_frac must be positive")
        if self.mode not in ("extend", "translate"):
            raise ValueError(f"unknown expansion mode: {self.mode}")


# Unit compass directions (dx, dy) with y pointing down; index 1..8 of the
# expansion list. Order: E, NE, N, NW, W, SW, S, SE.
COMPASS = (
    (1, 0), (1, -1), (0, -1), (-1, -1),
    (-1, 0), (-1, 1), (0, 1), (1, 1),
)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 for disjoint or zero-area pairs."""
    ix1 = max(a.x1, b.x1)
    iy1 = max(a.y1, b.y1)
    ix2 = min(a.x2, b.x2)
    iy2 = min(a.y2, b.y2)
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    if inter <= 0.0:
        return 0.0
    union = a.area + b.area - inter
    return inter / union if union > 0.0 else 0.0


def nms(candidates: Sequence[ScoredBox], iou_threshold: float) -> list[ScoredBox]:
    """Greedy descending-score suppression; stable on score ties."""
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError("iou_threshold must be in [0,1]")
    if not candidates:
        return []
    boxes = np.array([c.box.as_tuple() for c in candidates], dtype=np.float64)
    scores = np.array([c.score for c in candidates], dtype=np.float64)
    keep = kernels.nms_indices(boxes, scores, iou_threshold)
    return [candidates[i] for i in keep]


def generate_anchors(feature_shape: tuple[int, int], config: AnchorConfig,
                     stride: int) -> np.ndarray:
    """Tile anchors over a feature grid; returns (rows*cols*A, 4) xyxy array.

    Cell (i,j) anchors are centered at ((j+0.5)*stride, (i+0.5)*stride); for
    scale s and ratio r the anchor is s*sqrt(r) wide and s/sqrt(r) tall.
    Anchors may extend beyond image bounds.
    """
    rows, cols = feature_shape
    if rows <= 0 or cols <= 0:
        raise ValueError("feature grid must be positive")
    shapes = np.array(
        [(s * math.sqrt(r), s / math.sqrt(r))
         for s in config.scales for r in config.aspect_ratios],
        dtype=np.float64,
    )
    cx = (np.arange(cols) + 0.5) * stride
    cy = (np.arange(rows) + 0.5) * stride
    cxg, cyg = np.meshgrid(cx, cy)
    centers = np.stack([cxg.ravel(), cyg.ravel()], axis=1)  # (rows*cols, 2)
    half = 0.5 * shapes  # (A, 2)
    lo = centers[:, None, :] - half[None, :, :]
    hi = centers[:, None, :] + half[None, :, :]
    return np.concatenate([lo, hi], axis=2).reshape(-1, 4)


def fes_expand(proposal: Box, config: FESConfig,
               image_size: tuple[float, float]) -> list[Box]:
    """Expand a proposal t steps in each of k compass directions.

    Element 0 is the proposal itself; elements 1..k extend the face(s) facing
    each direction outward by t*step_frac of the corresponding side length
    (in "translate" mode the whole box shifts instead). All outputs are
    clipped to the image.
    """
    if config.k != len(COMPASS):
        raise ValueError(f"only k={len(COMPASS)} compass directions supported")
    dx = config.t * config.step_frac * proposal.width
    dy = config.t * config.step_frac * proposal.height
    out = [proposal.clip(image_size)]
    for ux, uy in COMPASS:
        x1, y1, x2, y2 = proposal.as_tuple()
        if config.mode == "translate":
            x1 += ux * dx
            x2 += ux * dx
            y1 += uy * dy
            y2 += uy * dy
        else:
            if ux > 0:
                x2 += dx
            elif ux < 0:
                x1 -= dx
            if uy > 0:
                y2 += dy
            elif uy < 0:
                y1 -= dy
        out.append(Box(x1, y1, x2, y2).clip(image_size))
    return out


def encode_deltas(anchor: Box, target: Box) -> tuple[float, float, float, float]:
    """Center/log-size box coding relative to an anchor."""
    wa, ha = anchor.width, anchor.height
    if wa <= 0 or ha <= 0:
        raise ValueError("anchor must have positive size")
    w, h = target.width, target.height
    if w <= 0 or h <= 0:
        raise ValueError("target must have positive size")
    cxa, cya = anchor.center
    cx, cy = target.center
    return ((cx - cxa) / wa, (cy - cya) / ha, math.log(w / wa), math.log(h / ha))


def apply_deltas(anchor: Box, deltas: Sequence[float]) -> Box:
    """Inverse of encode_deltas."""
    tx, ty, tw, th = deltas
    wa, ha = anchor.width, anchor.height
    if wa <= 0 or ha <= 0:
        raise ValueError("anchor must have positive size")
    cxa, cya = anchor.center
    cx = cxa + tx * wa
    cy = cya + ty * ha
    w = wa * math.exp(tw)
    h = ha * math.exp(th)
    return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


def encode_deltas_batch(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorized encode_deltas over (N,4) arrays."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    w = targets[:, 2] - targets[:, 0]
    h = targets[:, 3] - targets[:, 1]
    cxa = anchors[:, 0] + 0.5 * wa
    cya = anchors[:, 1] + 0.5 * ha
    cx = targets[:, 0] + 0.5 * w
    cy = targets[:, 1] + 0.5 * h
    return np.stack([(cx - cxa) / wa, (cy - cya) / ha,
                     np.log(w / wa), np.log(h / ha)], axis=1)


def apply_deltas_batch(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Vectorized apply_deltas over (N,4) arrays."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    cxa = anchors[:, 0] + 0.5 * wa
    cya = anchors[:, 1] + 0.5 * ha
    cx = cxa + deltas[:, 0] * wa
    cy = cya + deltas[:, 1] * ha
    w = wa * np.exp(deltas[:, 2])
    h = ha * np.exp(deltas[:, 3])
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes_batch(boxes: np.ndarray, image_size: tuple[float, float]) -> np.ndarray:
    """Clip an (N,4) array to [0,W] x [0,H]."""
    w, h = image_size
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, w)
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, h)
    return boxes


def fes_expand_batch(proposals: np.ndarray, config: FESConfig,
                     image_size: tuple[float, float]) -> np.ndarray:
    """fes_expand over an (N,4) array; returns (N, k+1, 4)."""
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    n = proposals.shape[0]
    out = np.empty((n, config.k + 1, 4), dtype=np.float64)
    for i in range(n):
        boxes = fes_expand(Box(*proposals[i]), config, image_size)
        out[i] = [b.as_tuple() for b in boxes]
    return out
