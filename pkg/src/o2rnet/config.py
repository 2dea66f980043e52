"""YAML run configuration: schema validation, environment overrides, and
builders that turn validated sections into the typed configs used elsewhere."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .augment import AugmentSpec, preset
from .data import SynthConfig
from .geometry import AnchorConfig, FESConfig
from .learning import LossWeights, SCHEDULE_PRESETS, ScheduleSpec
from .model import BackboneSpec, ModelConfig
from .train import TrainConfig

ENV_PREFIX = "O2RNET_CFG_"

# Allowed keys per section; None means the value is a scalar/list leaf.
_SCHEMA: dict[str, Any] = {
    "seed": None,
    "device": None,
    "synth": {
        "count": None, "image_size": None, "objects_per_image": None,
        "radius_range": None, "overlap_target": None, "overlap_spread": None,
        "cluster_fraction": None, "tau_occ": None, "palette": None,
    },
    "augment": {
        "preset": None, "families": None, "rotation_deg": None, "scale": None,
        "translate_frac": None, "shear_deg": None, "reflect_axes": None,
        "reflect_prob": None, "brightness": None, "contrast": None,
        "noise_sigma": None, "sharpen_strength": None, "mixup_alpha": None,
        "mixup_prob": None,
    },
    "model": {
        "backbone": {"variant": None, "channels": None, "stride": None,
                     "blocks_per_stage": None},
        "anchors": {"strides": None, "scales": None, "aspect_ratios": None},
        "fes": {"t": None, "k": None, "step_frac": None, "mode": None},
        "num_classes": None, "pool_size": None, "head_dim": None,
        "context_grid": None, "context_mode": None,
    },
    "train": {
        "preset": None, "base_lr": None, "warmup_iters": None,
        "total_iters": None, "momentum": None, "decay": None,
        "decay_kind": None, "milestones": None, "warmup_factor": None,
        "batch_size": None, "clip_norm": None, "lambda1": None, "roi_batch": None,
        "occlusion_ratio": None, "rpn_batch": None, "checkpoint_every": None,
        "pretrained": None, "replace_heads": None, "proposal_post_nms": None,
        "augment_prob": None,
    },
    "infer": {
        "score_threshold": None, "nms_threshold": None,
        "merge_nms_threshold": None, "occludee_score_threshold": None,
        "occluder_only": None,
        "proposal_post_nms": None, "max_detections": None,
    },
    "eval": {"score_threshold": None},
}


@dataclass
class RunConfig:
    """Validated run configuration; sections are plain dicts, realized into
    typed configs on demand."""
    seed: int = 0
    device: str = "cpu"
    synth: dict = field(default_factory=dict)
    augment: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    infer: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)


def _validate(node: Mapping, schema: Mapping, path: str = ""):
    for key, value in node.items():
        where = f"{path}.{key}" if path else key
        if key not in schema:
            raise ValueError(f"unknown config key: {where}")
        sub = schema[key]
        if isinstance(sub, dict):
            if not isinstance(value, Mapping):
                raise ValueError(f"config section {where} must be a mapping")
            _validate(value, sub, where)


def apply_env_overrides(raw: dict, environ: Mapping[str, str] | None = None) -> dict:
    """Overlay O2RNET_CFG_SECTION__KEY=value entries (YAML-parsed) onto raw."""
    environ = os.environ if environ is None else environ
    for name, text in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in name[len(ENV_PREFIX):].split("__") if p]
        node = raw
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = yaml.safe_load(text)
    return raw


def load_run_config(path: str | Path | None = None,
                    overrides: Mapping | None = None,
                    environ: Mapping[str, str] | None = None) -> RunConfig:
    """Parse + validate a YAML config, then env vars, then explicit overrides."""
    raw: dict = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text())
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ValueError("config root must be a mapping")
        raw = loaded
    raw = apply_env_overrides(raw, environ)
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value
    _validate(raw, _SCHEMA)
    cfg = RunConfig()
    cfg.seed = int(raw.get("seed", 0))
    cfg.device = str(raw.get("device", "cpu"))
    if cfg.device != "cpu":
        raise ValueError(f"unsupported device {cfg.device!r}; only 'cpu'")
    for section in ("synth", "augment", "model", "train", "infer", "eval"):
        setattr(cfg, section, dict(raw.get(section, {})))
    return cfg


def build_synth_config(cfg: RunConfig) -> tuple[SynthConfig, int]:
    """Returns (SynthConfig, scene count)."""
    raw = dict(cfg.synth)
    count = int(raw.pop("count", 10))
    for key in ("image_size", "objects_per_image", "radius_range"):
        if key in raw:
            raw[key] = tuple(raw[key])
    return SynthConfig(seed=cfg.seed, **raw), count


def build_augment_spec(cfg: RunConfig) -> AugmentSpec:
    raw = dict(cfg.augment)
    name = raw.pop("preset", "base")
    spec = preset(name, seed=cfg.seed)
    if "families" in raw:
        raw["families"] = frozenset(raw["families"])
    for key in ("rotation_deg", "scale", "translate_frac", "shear_deg",
                "brightness", "contrast", "noise_sigma", "sharpen_strength",
                "mixup_alpha", "reflect_axes"):
        if key in raw:
            raw[key] = tuple(raw[key])
    if raw:
        from dataclasses import replace

        spec = replace(spec, **raw)
    return spec


def build_model_config(cfg: RunConfig) -> ModelConfig:
    raw = dict(cfg.model)
    kwargs: dict[str, Any] = {}
    if "backbone" in raw:
        kwargs["backbone"] = BackboneSpec(**raw.pop("backbone"))
    if "anchors" in raw:
        a = raw.pop("anchors")
        kwargs["anchors"] = AnchorConfig(
            strides=tuple(a.get("strides", (8,))),
            scales=tuple(float(s) for s in a.get("scales", (24.0, 40.0, 56.0))),
            aspect_ratios=tuple(float(r) for r in a.get("aspect_ratios", (1.0,))))
    if "fes" in raw:
        kwargs["fes"] = FESConfig(**raw.pop("fes"))
    kwargs.update(raw)
    return ModelConfig(**kwargs)


def build_train_config(cfg: RunConfig) -> TrainConfig:
    raw = dict(cfg.train)
    name = raw.pop("preset", "desk")
    if name not in SCHEDULE_PRESETS:
        raise ValueError(f"unknown schedule preset {name!r}; "
                         f"one of {sorted(SCHEDULE_PRESETS)}")
    schedule = SCHEDULE_PRESETS[name]
    sched_keys = ("base_lr", "warmup_iters", "total_iters", "momentum",
                  "decay", "decay_kind", "milestones", "warmup_factor",
                  "batch_size", "clip_norm")
    sched_over = {k: raw.pop(k) for k in sched_keys if k in raw}
    if "milestones" in sched_over:
        sched_over["milestones"] = tuple(sched_over["milestones"])
    if sched_over:
        from dataclasses import replace

        schedule = replace(schedule, **sched_over)
    weights = LossWeights.from_lambda1(float(raw.pop("lambda1", 0.5)))
    raw.pop("pretrained", None)  # consumed by the train command, not here
    raw.pop("replace_heads", None)
    families = build_augment_spec(cfg)
    return TrainConfig(schedule=schedule, weights=weights, seed=cfg.seed,
                       augment=families if families.families else None, **raw)
