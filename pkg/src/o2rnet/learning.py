"""Training machinery: target assignment, occlusion-balanced sampling, the
weighted occluder/occludee loss, LR schedule, SGD with momentum, and
transfer-learning weight surgery.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels, nn
from .data import Annotation
from .geometry import encode_deltas_batch
from .model import BranchOutput, O2RNet, OccludeeOutput, ProposalSet
from .nn import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.5

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if abs(self.lambda1 + self.lambda2 - 1.0) > 1e-9:
            raise ValueError("lambda1 + lambda2 must equal 1")

    @classmethod
    def from_lambda1(cls, lambda1: float) -> "LossWeights":
        return cls(lambda1, 1.0 - lambda1)


@dataclass
class LossBreakdown:
    occluder_cls: float
    occluder_bbox: float
    occludee_terms: list[tuple[float, float]]  # (cls_i, bbox_i) for i=0..k
    total: float

    @property
    def occluder(self) -> float:
        return self.occluder_cls + self.occluder_bbox

    @property
    def occludee(self) -> float:
        return float(sum(c + b for c, b in self.occludee_terms))


@dataclass(frozen=True)
class ScheduleSpec:
    base_lr: float = 0.005
    warmup_iters: int = 50
    total_iters: int = 400
    momentum: float = 0.9
    decay: float = 0.0005
    decay_kind: str = "l2"  # "l2" coefficient or "lr_step" factor at milestones
    milestones: tuple[int, ...] = ()
    warmup_factor: float = 0.1
    batch_size: int = 1
    clip_norm: float = 10.0  # 0 disables gradient clipping

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.warmup_iters >= self.total_iters:
            raise ValueError("warmup_iters must be < total_iters")
        if self.decay_kind not in ("l2", "lr_step"):
            raise ValueError("decay_kind must be 'l2' or 'lr_step'")

    @property
    def l2(self) -> float:
        return self.decay if self.decay_kind == "l2" else 0.0


# Two full-scale recipes (step-decayed high LR vs L2-regularized low LR)
# ship as presets; desk-scale runs use their own smaller default.
SCHEDULE_PRESETS = {
    "full-step": ScheduleSpec(base_lr=0.01, warmup_iters=1000,
                                   total_iters=60000, momentum=0.9,
                                   decay=0.95, decay_kind="lr_step",
                                   milestones=(40000, 50000), batch_size=2),
    "full-l2": ScheduleSpec(base_lr=0.001, warmup_iters=1000,
                                  total_iters=934 * 80, momentum=0.9,
                                  decay=0.0005, decay_kind="l2", batch_size=1),
    "desk": ScheduleSpec(),
}


@dataclass
class ConfusionCounts:
    TP: int = 0
    FP: int = 0
    TN: int = 0  # carried for completeness; detection metrics never set it
    FN: int = 0

    def __post_init__(self):
        if min(self.TP, self.FP, self.TN, self.FN) < 0:
            raise ValueError("confusion counts must be non-negative")


@dataclass
class TargetAssignment:
    class_targets: np.ndarray  # (N,) int: -1 ignore, 0 background, >0 class
    matched_gt: np.ndarray  # (N,) int index into annotation, -1 when none
    delta_targets: np.ndarray  # (N,4) encode(proposal, matched gt); 0 for bg
    occluded: np.ndarray  # (N,) bool, inherited from matched gt

    @property
    def fg_mask(self) -> np.ndarray:
        return self.class_targets > 0

    @property
    def bg_mask(self) -> np.ndarray:
        return self.class_targets == 0


def assign_targets(proposals: ProposalSet | np.ndarray, annotation: Annotation,
                   fg_iou: float = 0.5, bg_iou: float = 0.3) -> TargetAssignment:
    """Match each proposal to its max-IoU ground truth and band into
    foreground / background / ignored."""
    if not 0.0 <= bg_iou <= fg_iou <= 1.0:
        raise ValueError("need 0 <= bg_iou <= fg_iou <= 1")
    boxes = proposals.proposals if isinstance(proposals, ProposalSet) else np.asarray(proposals)
    boxes = boxes.reshape(-1, 4)
    n = len(boxes)
    gt = annotation.boxes_array()
    cls = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    deltas = np.zeros((n, 4))
    occluded = np.zeros(n, dtype=bool)
    if len(gt) and n:
        ious = kernels.iou_matrix(boxes, gt)
        best = ious.argmax(axis=1)
        best_iou = ious[np.arange(n), best]
        fg = best_iou >= fg_iou
        ignore = (~fg) & (best_iou >= bg_iou)
        cls[fg] = np.asarray(annotation.labels)[best[fg]]
        cls[ignore] = -1
        matched[fg] = best[fg]
        if fg.any():
            deltas[fg] = encode_deltas_batch(boxes[fg], gt[best[fg]])
            occluded[fg] = np.asarray(annotation.occluded)[best[fg]]
    return TargetAssignment(cls, matched, deltas, occluded)


def sample_balanced(assignment: TargetAssignment, batch_roi_count: int,
                    occlusion_ratio: float = 0.5, seed: int = 0,
                    fg_fraction: float = 0.5) -> np.ndarray:
    """Pick a training batch of RoI indices with the foreground split between
    occlusion cases and clear cases at `occlusion_ratio` (supply permitting)."""
    if not 0.0 <= occlusion_ratio <= 1.0:
        raise ValueError("occlusion_ratio must be in [0,1]")
    rng = np.random.default_rng(seed)
    fg_idx = np.nonzero(assignment.fg_mask)[0]
    bg_idx = np.nonzero(assignment.bg_mask)[0]
    want_fg = min(len(fg_idx), int(round(batch_roi_count * fg_fraction)))

    occ = fg_idx[assignment.occluded[fg_idx]]
    clear = fg_idx[~assignment.occluded[fg_idx]]
    want_occ = int(round(want_fg * occlusion_ratio))
    n_occ = min(want_occ, len(occ))
    n_clear = min(want_fg - n_occ, len(clear))
    # backfill with occluded when clear supply runs out
    n_occ = min(len(occ), n_occ + (want_fg - n_occ - n_clear))
    take_occ = rng.permutation(occ)[:n_occ]
    take_clear = rng.permutation(clear)[:n_clear]
    n_bg = min(len(bg_idx), batch_roi_count - n_occ - n_clear)
    take_bg = rng.permutation(bg_idx)[:n_bg]
    return np.sort(np.concatenate([take_occ, take_clear, take_bg]))


def branch_loss(cls_logits: Tensor, box_deltas: Tensor,
                cls_targets: np.ndarray, delta_targets: np.ndarray,
                cls_rows: np.ndarray, bbox_rows: np.ndarray) -> tuple[Tensor, Tensor]:
    """Mean cross entropy over `cls_rows` plus mean smooth-L1 over `bbox_rows`.

    Row index arrays select which RoIs contribute; either may be empty, in
    which case that term is a constant zero.
    """
    n = cls_logits.data.shape[0]
    if len(cls_rows):
        w = np.zeros(n)
        w[cls_rows] = 1.0 / len(cls_rows)
        cls_loss = nn.softmax_cross_entropy(cls_logits, np.maximum(cls_targets, 0), w)
    else:
        cls_loss = Tensor(0.0, requires_grad=False)
    if len(bbox_rows):
        w = np.zeros(n)
        w[bbox_rows] = 1.0 / len(bbox_rows)
        bbox_loss = nn.smooth_l1(box_deltas, delta_targets, w)
    else:
        bbox_loss = Tensor(0.0, requires_grad=False)
    return cls_loss, bbox_loss


def occluder_loss(out: BranchOutput, assignment: TargetAssignment,
                  sample_idx: np.ndarray) -> tuple[Tensor, Tensor]:
    """Loss for the occluder branch over the sampled RoIs.

    `out` must be the head applied to exactly the sampled RoIs (rows align
    with `sample_idx`).
    """
    cls_t = assignment.class_targets[sample_idx]
    delta_t = assignment.delta_targets[sample_idx]
    rows = np.arange(len(sample_idx))
    fg_rows = rows[cls_t > 0]
    return branch_loss(out.cls_logits, out.box_deltas, cls_t, delta_t, rows, fg_rows)


def occludee_loss(out: OccludeeOutput, assignment: TargetAssignment,
                  sample_idx: np.ndarray, expansions: np.ndarray,
                  gt_boxes: np.ndarray) -> list[tuple[Tensor, Tensor]]:
    """Per-expansion losses for the occludee branch.

    Only sampled RoIs whose matched ground truth is an occlusion case
    contribute; each expansion i regresses its own expanded box toward the
    same matched ground truth. Returns k+1 (cls, bbox) pairs.
    """
    k = out.k
    n = len(sample_idx)
    occ_rows = np.nonzero((assignment.class_targets[sample_idx] > 0)
                          & assignment.occluded[sample_idx])[0]
    terms = []
    cls_t_rois = assignment.class_targets[sample_idx]
    matched = assignment.matched_gt[sample_idx]
    for i in range(k + 1):
        rows = occ_rows * (k + 1) + i
        cls_targets = np.zeros(n * (k + 1), dtype=np.int64)
        delta_targets = np.zeros((n * (k + 1), 4))
        if len(rows):
            cls_targets[rows] = cls_t_rois[occ_rows]
            exp_boxes = expansions[sample_idx[occ_rows], i]
            delta_targets[rows] = encode_deltas_batch(
                exp_boxes, gt_boxes[matched[occ_rows]])
        terms.append(branch_loss(out.cls_logits, out.box_deltas,
                                 cls_targets, delta_targets, rows, rows))
    return terms


def total_loss(occluder_terms: tuple[Tensor, Tensor],
               occludee_terms: Sequence[tuple[Tensor, Tensor]],
               weights: LossWeights) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum over branches: lambda1*L_occluder + lambda2*L_occludee,
    the occludee part summing all k+1 expansion losses."""
    oc_cls, oc_bbox = occluder_terms
    occluder = nn.add(oc_cls, oc_bbox)
    occludee = Tensor(0.0, requires_grad=False)
    for cls_i, bbox_i in occludee_terms:
        occludee = nn.add(occludee, nn.add(cls_i, bbox_i))
    total = nn.add(nn.scale(occluder, weights.lambda1),
                   nn.scale(occludee, weights.lambda2))
    breakdown = LossBreakdown(
        occluder_cls=float(oc_cls.data),
        occluder_bbox=float(oc_bbox.data),
        occludee_terms=[(float(c.data), float(b.data)) for c, b in occludee_terms],
        total=float(total.data),
    )
    return total, breakdown


def lr_at(iteration: int, spec: ScheduleSpec) -> float:
    """Constant warm-up at warmup_factor*base_lr, then base_lr with optional
    step decay at milestones."""
    if not 0 <= iteration < spec.total_iters:
        raise ValueError("iteration out of schedule range")
    if iteration < spec.warmup_iters:
        return spec.warmup_factor * spec.base_lr
    lr = spec.base_lr
    if spec.decay_kind == "lr_step":
        for m in spec.milestones:
            if iteration >= m:
                lr *= spec.decay
    return lr


class SGDMomentum:
    """v <- momentum*v + grad + l2*param; param <- param - lr*v.

    Optional global-norm gradient clipping guards against the occasional
    spike from the expansion bbox terms early in training.
    """

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9,
                 l2: float = 0.0, clip_norm: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.l2 = l2
        self.clip_norm = clip_norm
        self.velocity = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.skipped_steps = 0

    def step(self, lr: float):
        grads = {}
        for name, t in self.params.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            if not np.isfinite(g).all():
                self.skipped_steps += 1
                log.warning("non-finite gradient for %s; step skipped", name)
                return
            grads[name] = g
        if self.clip_norm > 0:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.clip_norm:
                factor = self.clip_norm / norm
                grads = {n: g * factor for n, g in grads.items()}
        for name, t in self.params.items():
            g = grads[name]
            v = self.velocity[name]
            # dormant parameters (no gradient signal, no velocity) are left
            # untouched so decay cannot shrink branches excluded from the loss
            if not g.any() and not v.any():
                continue
            v *= self.momentum
            v += g + self.l2 * t.data
            t.data -= lr * v

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None


@dataclass
class SurgeryReport:
    loaded: list[str]
    replaced: list[str]
    missing: list[str]


def load_pretrained(checkpoint_path, model: O2RNet,
                    replace_heads: bool = True, seed: int = 0) -> SurgeryReport:
    """Copy matching weights from a checkpoint; optionally reinitialize the
    detection heads (transfer-learning surgery)."""
    _, arrays = O2RNet.load_checkpoint_arrays(checkpoint_path)
    head_names = set(model.head_param_names())
    loaded, replaced, missing = [], [], []
    if replace_heads:
        model.reinit_heads(seed=seed)
    for name, t in model.params.items():
        if replace_heads and name in head_names:
            replaced.append(name)
            continue
        if name not in arrays:
            missing.append(name)
            continue
        if arrays[name].shape != t.data.shape:
            raise ValueError(f"shape mismatch for parameter {name}: "
                             f"{arrays[name].shape} vs {t.data.shape}")
        model.params[name] = Tensor(arrays[name].astype(np.float64))
        loaded.append(name)
    return SurgeryReport(loaded, replaced, missing)


# ---------------------------------------------------------------------------
# RPN training targets

def assign_rpn_targets(anchors: np.ndarray, gt_boxes: np.ndarray,
                       fg_iou: float = 0.6, bg_iou: float = 0.3,
                       batch: int = 64, seed: int = 0):
    """Standard anchor labeling: 1 fg / 0 bg / -1 ignore, with the best
    anchor per ground truth forced foreground. Returns (labels, delta
    targets, sampled index array)."""
    n = len(anchors)
    labels = np.full(n, -1, dtype=np.int64)
    deltas = np.zeros((n, 4))
    rng = np.random.default_rng(seed)
    if len(gt_boxes) == 0:
        labels[:] = 0
    else:
        ious = kernels.iou_matrix(anchors, gt_boxes)
        best = ious.argmax(axis=1)
        best_iou = ious[np.arange(n), best]
        labels[best_iou < bg_iou] = 0
        labels[best_iou >= fg_iou] = 1
        # ensure every gt owns its best anchor
        per_gt_best = ious.argmax(axis=0)
        labels[per_gt_best] = 1
        best[per_gt_best] = np.arange(len(gt_boxes))
        fg = labels == 1
        deltas[fg] = encode_deltas_batch(anchors[fg], gt_boxes[best[fg]])
    fg_idx = np.nonzero(labels == 1)[0]
    bg_idx = np.nonzero(labels == 0)[0]
    n_fg = min(len(fg_idx), batch // 2)
    take_fg = rng.permutation(fg_idx)[:n_fg]
    take_bg = rng.permutation(bg_idx)[:batch - n_fg]
    return labels, deltas, np.sort(np.concatenate([take_fg, take_bg]))


def rpn_loss(score_logits: Tensor, deltas: Tensor, labels: np.ndarray,
             delta_targets: np.ndarray, sample_idx: np.ndarray) -> tuple[Tensor, Tensor]:
    """Objectness BCE over the sampled anchors + smooth-L1 on foreground."""
    n = score_logits.data.shape[0]
    w = np.zeros(n)
    if len(sample_idx):
        w[sample_idx] = 1.0 / len(sample_idx)
    cls = nn.bce_with_logits(score_logits, np.maximum(labels, 0), w)
    fg = sample_idx[labels[sample_idx] == 1] if len(sample_idx) else sample_idx
    wb = np.zeros(n)
    if len(fg):
        wb[fg] = 1.0 / len(fg)
        bbox = nn.smooth_l1(deltas, delta_targets, wb)
    else:
        bbox = Tensor(0.0, requires_grad=False)
    return cls, bbox
