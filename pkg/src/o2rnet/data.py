"""Dataset ingestion, occlusion-case labeling, synthetic scenes, and splits.

Source annotations come from VGG Image Annotator JSON exports (rect regions
only). Datasets are carried around as ImageRecord lists and persisted as a
JSONL manifest (one record per line) next to the image files.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from .geometry import Box

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"


@dataclass
class Annotation:
    image_id: str
    boxes: list[Box] = field(default_factory=list)
    labels: list[int] = field(default_factory=list)
    occluded: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.boxes) == len(self.labels) == len(self.occluded)):
            raise ValueError("boxes, labels, occluded must have equal length")

    def boxes_array(self) -> np.ndarray:
        if not self.boxes:
            return np.zeros((0, 4), dtype=np.float64)
        return np.array([b.as_tuple() for b in self.boxes], dtype=np.float64)


@dataclass
class ImageRecord:
    image_id: str
    pixels: np.ndarray  # HxWx3 uint8
    annotation: Annotation

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError("pixels must be HxWx3")
        if self.pixels.dtype != np.uint8:
            raise ValueError("pixels must be uint8")

    @property
    def image_size(self) -> tuple[int, int]:
        """(W, H)"""
        return (self.pixels.shape[1], self.pixels.shape[0])


@dataclass(frozen=True)
class SynthConfig:
    image_size: tuple[int, int] = (256, 256)  # (W, H)
    objects_per_image: tuple[int, int] = (2, 6)
    radius_range: tuple[float, float] = (14.0, 30.0)
    overlap_target: float = 0.3
    overlap_spread: float = 0.2  # per-pair overlap ~ U(target-spread, target+spread)
    cluster_fraction: float = 0.5
    seed: int = 0
    tau_occ: float = 0.05
    palette: str = "red"  # object hue family; "green" for the transfer task

    def __post_init__(self):
        if not 0.0 <= self.overlap_target < 1.0:
            raise ValueError("overlap_target must be in [0,1)")
        if self.overlap_spread < 0.0:
            raise ValueError("overlap_spread must be non-negative")
        if not 0.0 <= self.cluster_fraction <= 1.0:
            raise ValueError("cluster_fraction must be in [0,1]")
        if self.objects_per_image[0] > self.objects_per_image[1]:
            raise ValueError("objects_per_image range is empty")
        if self.radius_range[0] > self.radius_range[1]:
            raise ValueError("radius_range is empty")


def label_occlusion_cases(boxes: Sequence[Box], tau_occ: float = 0.05) -> list[bool]:
    """Flag box i when some other box covers >= tau_occ of its own area."""
    if not 0.0 < tau_occ < 1.0:
        raise ValueError("tau_occ must be in (0,1)")
    flags = []
    for i, a in enumerate(boxes):
        covered = False
        if a.area > 0:
            for j, b in enumerate(boxes):
                if i == j:
                    continue
                iw = min(a.x2, b.x2) - max(a.x1, b.x1)
                ih = min(a.y2, b.y2) - max(a.y1, b.y1)
                if iw > 0 and ih > 0 and iw * ih / a.area >= tau_occ:
                    covered = True
                    break
        flags.append(covered)
    return flags


# ---------------------------------------------------------------------------
# VGG Image Annotator JSON

def load_vgg_annotations(path: str | Path, images_dir: str | Path | None = None,
                         tau_occ: float = 0.05) -> list[ImageRecord]:
    """Load a VGG Image Annotator JSON export into ImageRecords.

    Image files are looked up next to the JSON (or in `images_dir`); entries
    whose image file is missing get a blank canvas sized to the annotation
    extent so box-only workflows still function. Zero-area rects are dropped
    and counted; non-rect regions are skipped with a warning.
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed VGG JSON in {path}: {exc}") from exc
    # tolerate the "_via_img_metadata" wrapper newer exports use
    if "_via_img_metadata" in payload:
        payload = payload["_via_img_metadata"]

    images_dir = Path(images_dir) if images_dir is not None else path.parent
    records = []
    dropped = 0
    for key, entry in payload.items():
        if not isinstance(entry, dict) or "filename" not in entry:
            raise ValueError(f"malformed VGG entry {key!r} in {path}")
        filename = entry["filename"]
        regions = entry.get("regions", [])
        if isinstance(regions, dict):  # old exports keyed regions by index
            regions = [regions[k] for k in sorted(regions, key=str)]
        boxes = []
        for region in regions:
            shape = region.get("shape_attributes", {})
            if shape.get("name") != "rect":
                log.warning("skipping non-rect region in %s", filename)
                continue
            w, h = float(shape["width"]), float(shape["height"])
            if w <= 0 or h <= 0:
                dropped += 1
                continue
            x, y = float(shape["x"]), float(shape["y"])
            boxes.append(Box(x, y, x + w, y + h))

        img_path = images_dir / filename
        if img_path.exists():
            pixels = cv2.imread(str(img_path), cv2.IMREAD_COLOR)[:, :, ::-1].copy()
        else:
            ext_w = max([b.x2 for b in boxes], default=32.0)
            ext_h = max([b.y2 for b in boxes], default=32.0)
            pixels = np.zeros((max(32, int(np.ceil(ext_h))),
                               max(32, int(np.ceil(ext_w))), 3), dtype=np.uint8)
        wlim, hlim = pixels.shape[1], pixels.shape[0]
        boxes = [b.clip((wlim, hlim)) for b in boxes]
        ann = Annotation(image_id=filename, boxes=boxes, labels=[1] * len(boxes),
                         occluded=label_occlusion_cases(boxes, tau_occ))
        records.append(ImageRecord(image_id=filename, pixels=pixels, annotation=ann))
    if dropped:
        log.warning("dropped %d zero-area regions from %s", dropped, path)
    return records


def save_vgg_annotations(records: Sequence[ImageRecord], path: str | Path) -> None:
    """Write annotations back out as a VGG-style JSON export."""
    payload = {}
    for rec in records:
        regions = [
            {
                "shape_attributes": {
                    "name": "rect",
                    "x": b.x1, "y": b.y1,
                    "width": b.width, "height": b.height,
                },
                "region_attributes": {},
            }
            for b in rec.annotation.boxes
        ]
        payload[rec.image_id] = {"filename": rec.image_id, "size": -1,
                                 "regions": regions, "file_attributes": {}}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# Synthetic clustered scenes

def _scene_rng(config: SynthConfig, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((config.seed, index)))


def _textured_background(rng: np.random.Generator, w: int, h: int,
                         palette: str) -> np.ndarray:
    coarse = rng.uniform(40, 110, size=(h // 16 + 1, w // 16 + 1, 3))
    bg = cv2.resize(coarse, (w, h), interpolation=cv2.INTER_LINEAR)
    if palette == "red":
        bg[:, :, 1] += 30  # greenish foliage behind red objects
    else:
        bg[:, :, 2] += 30
    bg += rng.normal(0, 6, size=bg.shape)
    return np.clip(bg, 0, 255).astype(np.uint8)


def _object_color(rng: np.random.Generator, palette: str) -> tuple[int, int, int]:
    if palette == "red":
        return (int(rng.integers(170, 240)), int(rng.integers(30, 80)),
                int(rng.integers(30, 70)))
    return (int(rng.integers(30, 70)), int(rng.integers(150, 230)),
            int(rng.integers(40, 90)))


def _cluster_offset(a1, b1, a2, b2, ios_target, rng):
    """Center offset along one axis so box intersection-over-smaller-area
    hits ios_target, with small perpendicular jitter."""
    smaller = min(4 * a1 * b1, 4 * a2 * b2)
    horizontal = bool(rng.integers(0, 2))
    if horizontal:
        dx = (a1 + a2) - ios_target * smaller / (2 * min(b1, b2))
        dy = rng.uniform(-0.15, 0.15) * min(b1, b2)
    else:
        dy = (b1 + b2) - ios_target * smaller / (2 * min(a1, a2))
        dx = rng.uniform(-0.15, 0.15) * min(a1, a2)
    sign = -1.0 if rng.integers(0, 2) else 1.0
    return sign * dx if horizontal else dx, dy if horizontal else sign * dy


def generate_synthetic_scene(config: SynthConfig, index: int) -> ImageRecord:
    """Render one clustered-disc scene; deterministic in (config.seed, index).

    Ground-truth boxes are amodal (full ellipse extent even when covered by a
    later-drawn occluder), clipped to the image.
    """
    rng = _scene_rng(config, index)
    w, h = config.image_size
    canvas = _textured_background(rng, w, h, config.palette)

    n_objects = int(rng.integers(config.objects_per_image[0],
                                 config.objects_per_image[1] + 1))
    n_pairs = int(np.floor(config.cluster_fraction * n_objects / 2))

    ellipses = []  # (cx, cy, a, b)

    def sample_axes():
        r = rng.uniform(*config.radius_range)
        ecc = rng.uniform(0.9, 1.1)
        return r * ecc, r / ecc

    def box_of(cx, cy, a, b):
        return (cx - a, cy - b, cx + a, cy + b)

    def too_crowded(cand, allow=0.02):
        x1, y1, x2, y2 = box_of(*cand)
        area = (x2 - x1) * (y2 - y1)
        for e in ellipses:
            ox1, oy1, ox2, oy2 = box_of(*e)
            iw = min(x2, ox2) - max(x1, ox1)
            ih = min(y2, oy2) - max(y1, oy1)
            if iw > 0 and ih > 0:
                smaller = min(area, (ox2 - ox1) * (oy2 - oy1))
                if iw * ih / smaller > allow:
                    return True
        return False

    placed_warning = False
    for _ in range(n_pairs):
        ok = False
        for _attempt in range(40):
            a1, b1 = sample_axes()
            a2, b2 = sample_axes()
            cx1 = rng.uniform(a1 + a2 + 2, w - a1 - a2 - 2) if w > 2 * (a1 + a2 + 2) else w / 2
            cy1 = rng.uniform(b1 + b2 + 2, h - b1 - b2 - 2) if h > 2 * (b1 + b2 + 2) else h / 2
            ios = float(np.clip(rng.uniform(config.overlap_target - config.overlap_spread,
                                            config.overlap_target + config.overlap_spread),
                                0.05, 0.9))
            dx, dy = _cluster_offset(a1, b1, a2, b2, ios, rng)
            cx2, cy2 = cx1 + dx, cy1 + dy
            first = (cx1, cy1, a1, b1)
            second = (cx2, cy2, a2, b2)
            # pair overlap is intended; both must stay clear of earlier objects
            if too_crowded(first) or too_crowded(second):
                continue
            if not (a2 <= cx2 <= w - a2 and b2 <= cy2 <= h - b2):
                continue
            ellipses.append(first)
            ellipses.append(second)
            ok = True
            break
        if not ok:
            placed_warning = True

    n_singles = n_objects - 2 * n_pairs
    for _ in range(max(0, n_singles)):
        ok = False
        for _attempt in range(40):
            a, b = sample_axes()
            cx = rng.uniform(a, w - a) if w > 2 * a else w / 2
            cy = rng.uniform(b, h - b) if h > 2 * b else h / 2
            if too_crowded((cx, cy, a, b)):
                continue
            ellipses.append((cx, cy, a, b))
            ok = True
            break
        if not ok:
            placed_warning = True
    if placed_warning:
        log.warning("scene %d: placement retries exhausted, emitted %d/%d objects",
                    index, len(ellipses), n_objects)

    # later-drawn objects occlude earlier ones
    for cx, cy, a, b in ellipses:
        color = _object_color(rng, config.palette)
        cv2.ellipse(canvas, (int(round(cx)), int(round(cy))),
                    (max(1, int(round(a))), max(1, int(round(b)))),
                    0, 0, 360, color, thickness=-1)
        shade = tuple(int(c * 0.7) for c in color)
        cv2.ellipse(canvas, (int(round(cx)), int(round(cy))),
                    (max(1, int(round(a))), max(1, int(round(b)))),
                    0, 110, 250, shade, thickness=2)

    boxes = [Box(*box_of(*e)).clip((float(w), float(h))) for e in ellipses]
    ann = Annotation(image_id=f"synth-{config.seed}-{index:05d}",
                     boxes=boxes, labels=[1] * len(boxes),
                     occluded=label_occlusion_cases(boxes, config.tau_occ))
    return ImageRecord(image_id=ann.image_id, pixels=canvas, annotation=ann)


def generate_synthetic_dataset(config: SynthConfig, count: int) -> list[ImageRecord]:
    return [generate_synthetic_scene(config, i) for i in range(count)]


# ---------------------------------------------------------------------------
# Splits

def split_dataset(records: Sequence[ImageRecord],
                  fractions: tuple[float, float, float],
                  seed: int):
    """Deterministic disjoint train/val/test split over whole images."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    if len(records) < len(fractions):
        raise ValueError("fewer records than splits")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    n = len(records)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_val = min(n_val, n - n_train)
    parts = (order[:n_train], order[n_train:n_train + n_val],
             order[n_train + n_val:])
    return tuple([records[i] for i in part] for part in parts)


# ---------------------------------------------------------------------------
# Manifest (JSONL) + image files

def write_dataset(records: Sequence[ImageRecord], out_dir: str | Path) -> Path:
    """Write images as PNG plus a JSONL manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / MANIFEST_NAME
    with manifest.open("w") as fh:
        for rec in records:
            img_name = f"{rec.image_id}.png"
            cv2.imwrite(str(out_dir / img_name), rec.pixels[:, :, ::-1])
            row = {
                "image_id": rec.image_id,
                "image_path": img_name,
                "width": rec.image_size[0],
                "height": rec.image_size[1],
                "boxes": [list(b.as_tuple()) for b in rec.annotation.boxes],
                "labels": rec.annotation.labels,
                "occluded": rec.annotation.occluded,
            }
            fh.write(json.dumps(row) + "\n")
    return manifest


def read_dataset(manifest_path: str | Path, load_pixels: bool = True) -> list[ImageRecord]:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    records = []
    for line_no, line in enumerate(manifest_path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed manifest line {line_no}: {exc}") from exc
        boxes = [Box(*b) for b in row["boxes"]]
        ann = Annotation(image_id=row["image_id"], boxes=boxes,
                         labels=list(row["labels"]),
                         occluded=list(row["occluded"]))
        if load_pixels:
            img = cv2.imread(str(base / row["image_path"]), cv2.IMREAD_COLOR)
            if img is None:
                raise FileNotFoundError(base / row["image_path"])
            pixels = img[:, :, ::-1].copy()
        else:
            pixels = np.zeros((row["height"], row["width"], 3), dtype=np.uint8)
        records.append(ImageRecord(image_id=row["image_id"], pixels=pixels,
                                   annotation=ann))
    return records
