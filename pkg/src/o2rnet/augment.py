"""Box-consistent image augmentation: geometric, color, noise/sharpen, mixup.

Five families, applied in the fixed order mixup -> geometric -> color ->
pixel filters. All stochasticity is derived from (spec.seed, draw_index) so
pipelines are reproducible per record.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import cv2
import numpy as np

from .data import Annotation, ImageRecord, label_occlusion_cases
from .geometry import Box

FAMILIES = ("geometric", "color", "gaussian_noise", "mixup", "sharpen")


@dataclass(frozen=True)
class AugmentSpec:
    families: frozenset[str] = frozenset()
    rotation_deg: tuple[float, float] = (-15.0, 15.0)
    scale: tuple[float, float] = (0.9, 1.1)
    translate_frac: tuple[float, float] = (-0.1, 0.1)
    shear_deg: tuple[float, float] = (-8.0, 8.0)
    reflect_axes: tuple[str, ...] = ("horizontal",)
    reflect_prob: float = 0.5
    brightness: tuple[float, float] = (-30.0, 30.0)
    contrast: tuple[float, float] = (0.8, 1.2)
    noise_sigma: tuple[float, float] = (0.0, 10.0)
    sharpen_strength: tuple[float, float] = (0.0, 0.5)
    mixup_alpha: tuple[float, float] = (0.8, 0.95)  # weight of the primary scene
    mixup_prob: float = 0.3  # fraction of augmented draws that blend a partner
    seed: int = 0

    def __post_init__(self):
        unknown = self.families - set(FAMILIES)
        if unknown:
            raise ValueError(f"unknown augmentation families: {sorted(unknown)}")
        for name in ("rotation_deg", "scale", "translate_frac", "shear_deg",
                     "brightness", "contrast", "noise_sigma",
                     "sharpen_strength", "mixup_alpha"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is empty")
        if not 0.0 <= self.reflect_prob <= 1.0:
            raise ValueError("reflect_prob must be in [0,1]")
        if not 0.0 <= self.mixup_prob <= 1.0:
            raise ValueError("mixup_prob must be in [0,1]")


def preset(name: str, seed: int = 0) -> AugmentSpec:
    """Named family combinations used in the experiments."""
    combos = {
        "base": frozenset(),
        "geometric": frozenset({"geometric"}),
        "color": frozenset({"color"}),
        "gaussian_noise": frozenset({"gaussian_noise"}),
        "mixup": frozenset({"mixup"}),
        "sharpen": frozenset({"sharpen"}),
        # best-performing triple: geometric + color + mixup
        "gts-csts-mixup": frozenset({"geometric", "color", "mixup"}),
        "all": frozenset(FAMILIES),
    }
    if name not in combos:
        raise ValueError(f"unknown augmentation preset {name!r}; "
                         f"one of {sorted(combos)}")
    return AugmentSpec(families=combos[name], seed=seed)


@dataclass(frozen=True)
class GeometricParams:
    rotation_deg: float = 0.0
    scale: float = 1.0
    translate: tuple[float, float] = (0.0, 0.0)  # pixels
    shear_deg: float = 0.0
    reflect_h: bool = False
    reflect_v: bool = False

    def matrix(self, image_size: tuple[int, int]) -> np.ndarray:
        """2x3 affine matrix about the image center, reflection first."""
        w, h = image_size
        cx, cy = w / 2.0, h / 2.0
        th = math.radians(self.rotation_deg)
        sh = math.tan(math.radians(self.shear_deg))
        rot = np.array([[math.cos(th), -math.sin(th)],
                        [math.sin(th), math.cos(th)]])
        shear = np.array([[1.0, sh], [0.0, 1.0]])
        refl = np.diag([-1.0 if self.reflect_h else 1.0,
                        -1.0 if self.reflect_v else 1.0])
        lin = self.scale * (rot @ shear @ refl)
        center = np.array([cx, cy])
        offset = center + np.asarray(self.translate) - lin @ center
        return np.concatenate([lin, offset[:, None]], axis=1)


def _warp_annotation(ann: Annotation, m: np.ndarray,
                     image_size: tuple[int, int]) -> Annotation:
    w, h = image_size
    boxes, labels, occluded = [], [], []
    for box, label, occ in zip(ann.boxes, ann.labels, ann.occluded):
        corners = np.array([[box.x1, box.y1], [box.x2, box.y1],
                            [box.x1, box.y2], [box.x2, box.y2]])
        warped = corners @ m[:, :2].T + m[:, 2]
        new = Box(warped[:, 0].min(), warped[:, 1].min(),
                  warped[:, 0].max(), warped[:, 1].max()).clip((float(w), float(h)))
        if new.area > 0:
            boxes.append(new)
            labels.append(label)
            # occlusion relations survive an affine warp; recomputing them on
            # the warped boxes would overwrite upstream label policy (mixup
            # clears the flags because blending corrupts occlusion evidence)
            occluded.append(occ)
    return Annotation(image_id=ann.image_id, boxes=boxes, labels=labels,
                      occluded=occluded)


def apply_geometric(record: ImageRecord, params: GeometricParams) -> ImageRecord:
    """Affine-warp pixels and replace boxes by their warped corners' AABB."""
    w, h = record.image_size
    m = params.matrix((w, h))
    # constant fill at the image's mean color: reflected borders would clone
    # objects into the frame without labels, sabotaging detection targets
    fill = tuple(float(c) for c in record.pixels.reshape(-1, 3).mean(axis=0))
    pixels = cv2.warpAffine(record.pixels, m, (w, h),
                            flags=cv2.INTER_LINEAR,
                            borderMode=cv2.BORDER_CONSTANT,
                            borderValue=fill)
    return ImageRecord(record.image_id, pixels,
                       _warp_annotation(record.annotation, m, (w, h)))


def apply_color(record: ImageRecord, gain: float = 1.0,
                offset: float = 0.0) -> ImageRecord:
    """Contrast about mid-gray plus brightness offset; boxes untouched."""
    px = record.pixels.astype(np.float64)
    out = np.clip(gain * (px - 128.0) + 128.0 + offset, 0, 255)
    return ImageRecord(record.image_id, np.rint(out).astype(np.uint8),
                       record.annotation)


def apply_pixel_filters(record: ImageRecord, noise_sigma: float = 0.0,
                        sharpen_strength: float = 0.0,
                        rng: np.random.Generator | None = None) -> ImageRecord:
    """Gaussian pixel noise then unsharp-mask sharpening; boxes untouched."""
    if noise_sigma < 0 or sharpen_strength < 0:
        raise ValueError("noise sigma and sharpen strength must be >= 0")
    px = record.pixels.astype(np.float64)
    if noise_sigma > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        px = px + rng.normal(0.0, noise_sigma, size=px.shape)
    if sharpen_strength > 0:
        blurred = cv2.blur(px, (3, 3), borderType=cv2.BORDER_REFLECT_101)
        px = px + sharpen_strength * (px - blurred)
    out = np.clip(px, 0, 255)
    return ImageRecord(record.image_id, np.rint(out).astype(np.uint8),
                       record.annotation)


def _overlap_area(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    return max(0.0, iw) * max(0.0, ih)


def mixup(a: ImageRecord, b: ImageRecord, alpha: float,
          partner_overlap_limit: float = 0.25,
          min_partner_weight: float = 0.3) -> ImageRecord:
    """Blend two scenes; labeling follows the partner's actual visibility.

    Partner boxes are labeled only when the partner's blend weight (1-alpha)
    reaches `min_partner_weight` -- a barely-visible object labeled as a
    full positive teaches the detector to fire on smudges. Even then,
    partner boxes whose overlap with any primary box exceeds
    `partner_overlap_limit` of their own area are dropped: labeling both
    sides of a double exposure trains the detector to hallucinate a phantom
    partner behind every solid object. When partner objects are labeled the
    occlusion flags are cleared (a strong overlay corrupts the pixel
    evidence occlusion labels describe); a faint unlabeled overlay leaves
    the primary scene's flags valid.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0,1]")
    if b.image_size != a.image_size:
        b = _resize_record(b, a.image_size)
    px = alpha * a.pixels.astype(np.float64) + (1 - alpha) * b.pixels.astype(np.float64)
    boxes = list(a.annotation.boxes)
    labels = list(a.annotation.labels)
    if 1.0 - alpha >= min_partner_weight:
        keep = [
            not any(_overlap_area(box, pa) > partner_overlap_limit * box.area
                    for pa in a.annotation.boxes)
            for box in b.annotation.boxes
        ]
        boxes += [box for box, ok in zip(b.annotation.boxes, keep) if ok]
        labels += [lab for lab, ok in zip(b.annotation.labels, keep) if ok]
        occluded = [False] * len(boxes)
    else:
        occluded = list(a.annotation.occluded)
    ann = Annotation(image_id=a.image_id, boxes=boxes, labels=labels,
                     occluded=occluded)
    return ImageRecord(a.image_id, np.rint(np.clip(px, 0, 255)).astype(np.uint8), ann)


def _resize_record(rec: ImageRecord, size: tuple[int, int]) -> ImageRecord:
    w, h = size
    ow, oh = rec.image_size
    px = cv2.resize(rec.pixels, (w, h), interpolation=cv2.INTER_LINEAR)
    sx, sy = w / ow, h / oh
    boxes = [Box(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy)
             for b in rec.annotation.boxes]
    ann = Annotation(image_id=rec.image_id, boxes=boxes,
                     labels=list(rec.annotation.labels),
                     occluded=label_occlusion_cases(boxes) if boxes else [])
    return ImageRecord(rec.image_id, px, ann)


def sample_geometric(spec: AugmentSpec, rng: np.random.Generator,
                     image_size: tuple[int, int]) -> GeometricParams:
    w, h = image_size
    reflect_h = ("horizontal" in spec.reflect_axes
                 and rng.uniform() < spec.reflect_prob)
    reflect_v = ("vertical" in spec.reflect_axes
                 and rng.uniform() < spec.reflect_prob)
    return GeometricParams(
        rotation_deg=float(rng.uniform(*spec.rotation_deg)),
        scale=float(rng.uniform(*spec.scale)),
        translate=(float(rng.uniform(*spec.translate_frac)) * w,
                   float(rng.uniform(*spec.translate_frac)) * h),
        shear_deg=float(rng.uniform(*spec.shear_deg)),
        reflect_h=reflect_h,
        reflect_v=reflect_v,
    )


def augment_pipeline(record: ImageRecord, spec: AugmentSpec, draw_index: int,
                     partner_pool: list[ImageRecord] | None = None) -> ImageRecord:
    """Apply enabled families in fixed order, seeded by (spec.seed, draw_index).

    Mixup needs a partner; it draws one from `partner_pool` and is skipped
    when the pool is absent or empty. It also only fires on a `mixup_prob`
    fraction of draws -- blending is a strong perturbation, and mixing every
    draw trains mostly on double exposures instead of extending the data.
    """
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, draw_index)))
    out = record
    if ("mixup" in spec.families and partner_pool
            and rng.uniform() < spec.mixup_prob):
        partner = partner_pool[int(rng.integers(len(partner_pool)))]
        out = mixup(out, partner, float(rng.uniform(*spec.mixup_alpha)))
    if "geometric" in spec.families:
        out = apply_geometric(out, sample_geometric(spec, rng, out.image_size))
    if "color" in spec.families:
        out = apply_color(out, gain=float(rng.uniform(*spec.contrast)),
                          offset=float(rng.uniform(*spec.brightness)))
    sigma = (float(rng.uniform(*spec.noise_sigma))
             if "gaussian_noise" in spec.families else 0.0)
    strength = (float(rng.uniform(*spec.sharpen_strength))
                if "sharpen" in spec.families else 0.0)
    if sigma > 0 or strength > 0:
        out = apply_pixel_filters(out, noise_sigma=sigma,
                                  sharpen_strength=strength, rng=rng)
    return out
