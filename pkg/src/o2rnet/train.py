"""End-to-end training loop: forward graph assembly, per-iteration logging,
checkpoints, and deterministic epoch shuffling."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, nn
from .augment import AugmentSpec, augment_pipeline
from .data import ImageRecord
from .geometry import fes_expand_batch
from .learning import (
    LossWeights,
    ScheduleSpec,
    SGDMomentum,
    TargetAssignment,
    assign_rpn_targets,
    assign_targets,
    lr_at,
    occludee_loss,
    occluder_loss,
    rpn_loss,
    sample_balanced,
    total_loss,
)
from .model import O2RNet, ProposalSet
from .nn import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    schedule: ScheduleSpec = ScheduleSpec()
    weights: LossWeights = LossWeights(0.5, 0.5)
    roi_batch: int = 32
    occlusion_ratio: float = 0.5
    rpn_batch: int = 64
    proposal_score_threshold: float = 0.0
    proposal_pre_nms: int = 600
    proposal_nms: float = 0.7
    proposal_post_nms: int = 48
    add_gt_proposals: bool = True
    augment: AugmentSpec | None = None
    augment_prob: float = 0.5  # chance per iteration; models a half-augmented dataset
    seed: int = 0
    checkpoint_every: int = 0  # 0 -> final only
    log_every: int = 1


def _with_gt_proposals(props: ProposalSet, gt: np.ndarray, model: O2RNet,
                       image_size) -> ProposalSet:
    """Append ground-truth boxes as extra proposals so the heads always see
    well-placed RoIs during training."""
    if len(gt) == 0:
        return props
    ok = (gt[:, 2] - gt[:, 0] > 1.0) & (gt[:, 3] - gt[:, 1] > 1.0)
    gt = gt[ok]
    if len(gt) == 0:
        return props
    exps = fes_expand_batch(gt, model.config.fes, image_size)
    return ProposalSet(
        np.concatenate([props.proposals, gt]) if len(props) else gt,
        np.concatenate([props.objectness, np.ones(len(gt))]) if len(props) else np.ones(len(gt)),
        np.concatenate([props.expansions, exps]) if len(props) else exps,
    )


def build_detection_loss(model: O2RNet, features: Tensor, props: ProposalSet,
                         assignment: TargetAssignment, sample_idx: np.ndarray,
                         gt_boxes: np.ndarray, weights: LossWeights):
    """Heads + context forward over sampled RoIs and the weighted
    two-branch loss. Proposal boxes are treated as fixed inputs."""
    k = model.config.fes.k
    if len(sample_idx) == 0:
        zero = Tensor(0.0, requires_grad=False)
        return total_loss((zero, zero), [(zero, zero)] * (k + 1), weights)
    boxes = props.proposals[sample_idx]
    roi = model.extract_roi_features(features, boxes)
    occluder_out = model.occluder_forward(roi)
    context = model.occlusion_context(roi)
    exp_boxes = props.expansions[sample_idx].reshape(-1, 4)
    exp_roi = model.extract_roi_features(features, exp_boxes)
    occludee_out = model.occludee_forward(roi, context, exp_roi)
    # occludee_loss indexes expansions/matched by original proposal index
    occ_terms = occludee_loss(occludee_out, assignment, sample_idx,
                              props.expansions, gt_boxes)
    return total_loss(occluder_loss(occluder_out, assignment, sample_idx),
                      occ_terms, weights)


def compute_iteration_loss(model: O2RNet, record: ImageRecord,
                           config: TrainConfig, iteration: int):
    """Full single-image training loss (RPN + both branches).

    Returns (loss Tensor, LossBreakdown, rpn_cls, rpn_bbox floats).
    """
    w, h = record.image_size
    features = model.backbone_forward(record.pixels)
    score_logits, rpn_deltas = model.rpn_forward(features)
    anchors = model.anchors_for(features)
    gt = record.annotation.boxes_array()
    labels, delta_targets, rpn_idx = assign_rpn_targets(
        anchors, gt, batch=config.rpn_batch,
        seed=_mix(config.seed, iteration, 1))
    rpn_cls, rpn_bbox = rpn_loss(score_logits, rpn_deltas, labels,
                                 delta_targets, rpn_idx)

    props = model.rpn_propose(
        features, (float(w), float(h)),
        score_threshold=config.proposal_score_threshold,
        pre_nms_top_n=config.proposal_pre_nms,
        nms_threshold=config.proposal_nms,
        post_nms_top_n=config.proposal_post_nms,
        rpn_out=(score_logits, rpn_deltas))
    if config.add_gt_proposals:
        props = _with_gt_proposals(props, gt, model, (float(w), float(h)))
    assignment = assign_targets(props, record.annotation)
    sample_idx = sample_balanced(assignment, config.roi_batch,
                                 config.occlusion_ratio,
                                 seed=_mix(config.seed, iteration, 2))
    det_total, breakdown = build_detection_loss(
        model, features, props, assignment, sample_idx, gt, config.weights)
    loss = nn.add(det_total, nn.add(rpn_cls, rpn_bbox))
    return loss, breakdown, float(rpn_cls.data), float(rpn_bbox.data)


def _mix(*parts) -> int:
    return int.from_bytes(
        hashlib.blake2s(np.array(parts, dtype=np.int64).tobytes(),
                        digest_size=4).digest(), "little")


class Trainer:
    def __init__(self, model: O2RNet, config: TrainConfig, run_dir: str | Path):
        self.model = model
        self.config = config
        self.run_dir = Path(run_dir)
        self.optimizer = SGDMomentum(model.params,
                                     momentum=config.schedule.momentum,
                                     l2=config.schedule.l2,
                                     clip_norm=config.schedule.clip_norm)
        self.history: list[dict] = []

    def train(self, records: Sequence[ImageRecord],
              mixup_pool: Sequence[ImageRecord] | None = None) -> Path:
        """Run the schedule over `records`; returns the final checkpoint path."""
        cfg = self.config
        if not records:
            raise ValueError("no training records")
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self._write_metadata()
        order_rng = np.random.default_rng(_mix(cfg.seed, 0xE9))
        order = order_rng.permutation(len(records))
        pool = list(mixup_pool if mixup_pool is not None else records)
        start = time.time()
        loss_rows = []
        for it in range(cfg.schedule.total_iters):
            pos = it % len(records)
            if pos == 0 and it > 0:
                order = order_rng.permutation(len(records))
            record = records[order[pos]]
            if (cfg.augment is not None and cfg.augment.families
                    and np.random.default_rng(_mix(cfg.seed, it, 4)).uniform()
                    < cfg.augment_prob):
                record = augment_pipeline(record, cfg.augment, it, pool)
            loss, breakdown, rpn_cls, rpn_bbox = compute_iteration_loss(
                self.model, record, cfg, it)
            self.optimizer.zero_grad()
            loss.backward()
            lr = lr_at(it, cfg.schedule)
            self.optimizer.step(lr)
            row = {
                "iter": it, "lr": lr,
                "rpn_cls": rpn_cls, "rpn_bbox": rpn_bbox,
                "occluder_cls": breakdown.occluder_cls,
                "occluder_bbox": breakdown.occluder_bbox,
                "occludee": breakdown.occludee,
                "total": breakdown.total,
                "combined": float(loss.data),
            }
            loss_rows.append(row)
            self.history.append(row)
            if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                self.model.save_checkpoint(self.run_dir / f"checkpoint_{it + 1:06d}.npz")
        self._write_loss_csv(loss_rows)
        final = self.run_dir / "checkpoint_final.npz"
        self.model.save_checkpoint(final)
        log.info("training finished in %.1fs (%d iterations)",
                 time.time() - start, cfg.schedule.total_iters)
        return final

    def _write_loss_csv(self, rows):
        path = self.run_dir / "loss.csv"
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)

    def _write_metadata(self):
        cfg = self.config
        payload = {
            "version": __version__,
            "seed": cfg.seed,
            "schedule": {
                "base_lr": cfg.schedule.base_lr,
                "warmup_iters": cfg.schedule.warmup_iters,
                "total_iters": cfg.schedule.total_iters,
                "momentum": cfg.schedule.momentum,
                "decay": cfg.schedule.decay,
                "decay_kind": cfg.schedule.decay_kind,
                "batch_size": cfg.schedule.batch_size,
            },
            "weights": {"lambda1": cfg.weights.lambda1,
                        "lambda2": cfg.weights.lambda2},
            "fes_t": self.model.config.fes.t,
            "occlusion_ratio": cfg.occlusion_ratio,
        }
        blob = json.dumps(payload, sort_keys=True)
        payload["config_hash"] = hashlib.sha256(blob.encode()).hexdigest()[:16]
        (self.run_dir / "run.json").write_text(json.dumps(payload, indent=2))
