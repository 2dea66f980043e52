"""Detection-time pipeline: run both branches, pick the best expansion per
proposal, merge branch outputs with per-class NMS, and (de)serialize results."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .data import ImageRecord
from .geometry import apply_deltas_batch, clip_boxes_batch
from .model import O2RNet, OccludeeOutput, ProposalSet


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: tuple[float, float, float, float]  # x1, y1, x2, y2
    score: float
    label: int
    branch: str  # "occluder" or "occludee"
    expansion_index: int = -1  # which expansion won; -1 for the occluder branch
    proposal_index: int = -1  # originating proposal, -1 when unknown


def select_best(out: OccludeeOutput, expansions: np.ndarray,
                image_size: tuple[float, float]):
    """Reduce the k+1 expansion predictions of each proposal to one detection.

    The winner is the expansion with the highest foreground probability; ties
    go to the smallest expansion index (the unexpanded box first). Returns
    (boxes, scores, labels, expansion_indices) arrays of length N.
    """
    k = out.k
    n = expansions.shape[0]
    probs = out.class_probs.reshape(n, k + 1, -1)
    fg = probs[:, :, 1:]
    best_exp = fg.max(axis=2).argmax(axis=1)  # argmax keeps the first maximum
    rows = np.arange(n)
    labels = fg[rows, best_exp].argmax(axis=1) + 1
    scores = fg[rows, best_exp, labels - 1]
    deltas = out.box_deltas.data.reshape(n, k + 1, 4)[rows, best_exp]
    boxes = apply_deltas_batch(expansions[rows, best_exp], deltas)
    boxes = clip_boxes_batch(boxes, image_size)
    return boxes, scores, labels, best_exp


def per_class_nms(detections: Sequence[Detection], nms_threshold: float,
                  max_detections: int = 100) -> list[Detection]:
    """Greedy suppression within each class label; score-descending output."""
    if not detections:
        return []
    boxes = np.array([d.box for d in detections])
    scores = np.array([d.score for d in detections])
    labels = np.array([d.label for d in detections])
    keep: list[int] = []
    for label in np.unique(labels):
        idx = np.nonzero(labels == label)[0]
        kept = kernels.nms_indices(boxes[idx], scores[idx], nms_threshold)
        keep.extend(idx[kept])
    keep.sort(key=lambda i: (-scores[i], i))
    return [detections[i] for i in keep[:max_detections]]


def merge_branches(occluder_dets: Sequence[Detection],
                   occludee_dets: Sequence[Detection],
                   merge_nms_threshold: float = 0.5,
                   max_detections: int = 100) -> list[Detection]:
    """Union of both branches deduplicated by per-class NMS; the higher-scored
    copy of a cross-branch duplicate survives."""
    return per_class_nms(list(occluder_dets) + list(occludee_dets),
                         merge_nms_threshold, max_detections)


def detect(model: O2RNet, record: ImageRecord, score_threshold: float = 0.5,
           nms_threshold: float = 0.3, merge_nms_threshold: float = 0.5,
           occludee_score_threshold: float = 0.95, occluder_only: bool = False,
           proposal_post_nms: int = 100,
           max_detections: int = 100) -> list[Detection]:
    """Full inference on one image; returns merged, score-sorted detections.

    `nms_threshold` deduplicates within the occluder branch; the occludee
    branch and the cross-branch merge both use `merge_nms_threshold` so that
    heavily overlapping pairs suppressed in the occluder branch can still be
    recovered by the occludee branch. Occludee candidates additionally pass a
    second-look duplicate check (see `_occludee_detections`) and a stricter
    score bar, since that branch exists only to recover objects the occluder
    branch missed.
    """
    w, h = record.image_size
    size = (float(w), float(h))
    features = model.backbone_forward(record.pixels)
    props = model.rpn_propose(features, size, post_nms_top_n=proposal_post_nms)
    if len(props) == 0:
        return []
    roi = model.extract_roi_features(features, props.proposals)
    occluder_out = model.occluder_forward(roi)
    occluder_dets = per_class_nms(
        _occluder_detections(occluder_out, props, record.image_id, size,
                             score_threshold), nms_threshold)
    occludee_dets = [] if occluder_only else per_class_nms(
        _occludee_detections(model, features, roi, props, occluder_out,
                             occluder_dets, record.image_id, size,
                             max(score_threshold, occludee_score_threshold),
                             merge_nms_threshold),
        merge_nms_threshold)
    return merge_branches(occluder_dets, occludee_dets, merge_nms_threshold,
                          max_detections)


def _occluder_detections(out, props: ProposalSet, image_id, size,
                         score_threshold) -> list[Detection]:
    probs = out.class_probs
    labels = probs[:, 1:].argmax(axis=1) + 1
    scores = probs[np.arange(len(labels)), labels]
    boxes = apply_deltas_batch(props.proposals, out.box_deltas.data)
    boxes = clip_boxes_batch(boxes, size)
    return _collect(image_id, boxes, scores, labels,
                    np.full(len(labels), -1), "occluder", score_threshold)


def _occludee_detections(model, features, roi, props: ProposalSet,
                         occluder_out, occluder_dets: Sequence[Detection],
                         image_id, size, score_threshold,
                         merge_nms_threshold) -> list[Detection]:
    context = model.occlusion_context(roi)
    exp_roi = model.extract_roi_features(features,
                                         props.expansions.reshape(-1, 4))
    out = model.occludee_forward(roi, context, exp_roi)
    boxes, scores, labels, exp_idx = select_best(out, props.expansions, size)
    # the occludee head only ever trains on foreground RoIs, so its raw
    # scores are uncalibrated on background; weight by the occluder branch's
    # foreground probability to keep the branch to high-score proposals
    fg_prob = occluder_out.class_probs[:, 1:].max(axis=1)
    scores = scores * fg_prob
    keep = scores >= score_threshold
    if keep.any() and occluder_dets:
        keep[keep] &= ~_second_look_duplicate(
            model, features, boxes[keep], labels[keep], occluder_dets,
            size, merge_nms_threshold)
    return _collect(image_id, boxes[keep], scores[keep], labels[keep],
                    exp_idx[keep], "occludee", score_threshold,
                    np.nonzero(keep)[0])


def _second_look_duplicate(model, features, boxes, labels,
                           occluder_dets: Sequence[Detection], size,
                           iou_threshold) -> np.ndarray:
    """Flag occludee boxes that are really re-detections of an occluder box.

    A sloppily regressed duplicate of an already-detected object can sit just
    under the merge IoU and survive suppression. Refining each candidate once
    through the occluder head snaps such duplicates back onto the object they
    re-detect, so a refined box colliding with a kept same-class occluder
    detection marks the candidate as redundant. The kept occluder boxes are
    refined the same way before the comparison: a detection straddling an
    overlapping pair snaps onto one member, so a candidate recovering the
    other member no longer collides with it. Genuinely occluded objects
    refine onto their own extent and pass.
    """
    kept_boxes = np.array([d.box for d in occluder_dets])
    kept_labels = np.array([d.label for d in occluder_dets])
    stacked = np.concatenate([boxes, kept_boxes])
    refined_roi = model.extract_roi_features(features, stacked)
    refined_out = model.occluder_forward(refined_roi)
    refined_all = clip_boxes_batch(
        apply_deltas_batch(stacked, refined_out.box_deltas.data), size)
    refined, kept_refined = refined_all[:len(boxes)], refined_all[len(boxes):]
    overlap = kernels.iou_matrix(refined, kept_refined)
    overlap[labels[:, None] != kept_labels[None, :]] = 0.0
    return overlap.max(axis=1) > iou_threshold


def _collect(image_id, boxes, scores, labels, exp_idx, branch,
             score_threshold, proposal_idx=None) -> list[Detection]:
    if proposal_idx is None:
        proposal_idx = np.arange(len(scores))
    out = []
    for b, s, l, e, p in zip(boxes, scores, labels, exp_idx, proposal_idx):
        if s < score_threshold or b[2] - b[0] <= 0 or b[3] - b[1] <= 0:
            continue
        out.append(Detection(image_id, tuple(float(v) for v in b),
                             float(s), int(l), branch, int(e), int(p)))
    return out


def write_detections(path: str | Path, detections: Iterable[Detection]):
    """One JSON object per line, in input order."""
    with Path(path).open("w") as fh:
        for det in detections:
            fh.write(json.dumps(asdict(det)) + "\n")


def read_detections(path: str | Path) -> list[Detection]:
    out = []
    with Path(path).open() as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                out.append(Detection(row["image_id"], tuple(row["box"]),
                                     row["score"], row["label"], row["branch"],
                                     row.get("expansion_index", -1),
                                     row.get("proposal_index", -1)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"bad detection record at line {line_no}: {exc}")
    return out
