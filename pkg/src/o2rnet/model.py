"""Forward computation: backbone, RPN, RoI pooling, and the two detection
heads with the directional feature-expansion path for occluded instances.

All learnable state lives in a flat name -> Tensor dict so checkpointing,
weight surgery, and the optimizer stay trivial. Forward methods build an
autodiff graph; inference-only callers just read ``.data``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .geometry import (
    AnchorConfig,
    Branch,
    FESConfig,
    apply_deltas_batch,
    clip_boxes_batch,
    fes_expand_batch,
    generate_anchors,
)
from .nn import Tensor

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class BackboneSpec:
    variant: str = "tiny"  # "tiny" (desk scale) or "fpn_resnet" (full scale)
    channels: int = 32
    stride: int = 8
    # fpn_resnet only: residual blocks per stage
    blocks_per_stage: int = 2

    def __post_init__(self):
        if self.variant not in ("tiny", "fpn_resnet"):
            raise ValueError(f"unknown backbone variant {self.variant!r}")
        if self.stride not in (8, 16):
            raise ValueError("stride must be 8 or 16")


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneSpec = BackboneSpec()
    anchors: AnchorConfig = AnchorConfig(strides=(8,), scales=(24.0, 40.0, 56.0),
                                         aspect_ratios=(1.0,))
    fes: FESConfig = FESConfig(t=1)
    num_classes: int = 2  # background + one foreground class
    pool_size: int = 7
    head_dim: int = 64
    context_grid: int = 0  # 0 -> pool_size // 2
    context_mode: str = "fc"  # "fc" (bottleneck+upsample) or "conv" (fully conv)

    def __post_init__(self):
        if self.context_mode not in ("fc", "conv"):
            raise ValueError(f"unknown context_mode {self.context_mode!r}")
        if self.num_classes < 2:
            raise ValueError("need at least background + 1 class")

    @property
    def context_grid_size(self) -> int:
        return self.context_grid or max(1, self.pool_size // 2)


@dataclass
class ProposalSet:
    proposals: np.ndarray  # (N,4)
    objectness: np.ndarray  # (N,)
    expansions: np.ndarray  # (N, k+1, 4)

    def __post_init__(self):
        if len(self.objectness) != len(self.proposals):
            raise ValueError("objectness and proposals must align")
        if len(self.proposals) and self.expansions.shape[0] != len(self.proposals):
            raise ValueError("expansions and proposals must align")

    def __len__(self):
        return len(self.proposals)

    @classmethod
    def empty(cls, k: int) -> "ProposalSet":
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros((0, k + 1, 4)))


@dataclass
class BranchOutput:
    cls_logits: Tensor  # (N, num_classes)
    box_deltas: Tensor  # (N, 4)
    branch: Branch

    @property
    def class_probs(self) -> np.ndarray:
        """Per-proposal class distribution (rows sum to 1)."""
        return nn.softmax(self.cls_logits.data)


@dataclass
class OccludeeOutput:
    """Occludee head applied to all k+1 expansions of each proposal.

    Rows are proposal-major: row n*(k+1)+i is expansion i of proposal n.
    """
    cls_logits: Tensor  # (N*(k+1), num_classes)
    box_deltas: Tensor  # (N*(k+1), 4)
    k: int

    @property
    def class_probs(self) -> np.ndarray:
        return nn.softmax(self.cls_logits.data)

    def per_expansion(self) -> list[BranchOutput]:
        """Split into k+1 BranchOutputs (detached views for inspection)."""
        outs = []
        for i in range(self.k + 1):
            sel = slice(i, None, self.k + 1)
            outs.append(BranchOutput(
                Tensor(self.cls_logits.data[sel], requires_grad=False),
                Tensor(self.box_deltas.data[sel], requires_grad=False),
                Branch.OCCLUDEE))
        return outs


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class O2RNet:
    """Two-branch occlusion-aware detector over a pluggable conv backbone."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    # -- parameters ---------------------------------------------------------

    def _add(self, name, array):
        self.params[name] = Tensor(np.asarray(array, dtype=np.float64))

    def _init_params(self, rng):
        cfg = self.config
        c = cfg.backbone.channels
        if cfg.backbone.variant == "tiny":
            widths = [max(8, c // 2), max(8, c // 2), c]
            # patchify stem then two 3x3 stages; total stride 8 (or 16)
            self._add("backbone.stem.w", _he(rng, (4, 4, 3, widths[0]), 48))
            self._add("backbone.stem.b", np.zeros(widths[0]))
            self._add("backbone.conv1.w", _he(rng, (3, 3, widths[0], widths[1]),
                                              9 * widths[0]))
            self._add("backbone.conv1.b", np.zeros(widths[1]))
            self._add("backbone.conv2.w", _he(rng, (3, 3, widths[1], widths[2]),
                                              9 * widths[1]))
            self._add("backbone.conv2.b", np.zeros(widths[2]))
        else:
            self._add("backbone.stem.w", _he(rng, (4, 4, 3, c), 48))
            self._add("backbone.stem.b", np.zeros(c))
            for stage in range(2):
                for blk in range(cfg.backbone.blocks_per_stage):
                    for conv in ("a", "b"):
                        self._add(f"backbone.s{stage}.b{blk}.{conv}.w",
                                  _he(rng, (3, 3, c, c), 9 * c))
                        self._add(f"backbone.s{stage}.b{blk}.{conv}.b", np.zeros(c))

        a = cfg.anchors.anchors_per_cell
        self._add("rpn.conv.w", _he(rng, (3, 3, c, c), 9 * c))
        self._add("rpn.conv.b", np.zeros(c))
        self._add("rpn.score.w", _he(rng, (1, 1, c, a), c))
        self._add("rpn.score.b", np.zeros(a))
        self._add("rpn.delta.w", rng.normal(0, 0.01, size=(1, 1, c, 4 * a)))
        self._add("rpn.delta.b", np.zeros(4 * a))

        p, d, k = cfg.pool_size, cfg.head_dim, cfg.num_classes
        flat = p * p * c
        for branch in ("occluder", "occludee"):
            self._add(f"{branch}.fc1.w", _he(rng, (flat, d), flat))
            self._add(f"{branch}.fc1.b", np.zeros(d))
            self._add(f"{branch}.fc2.w", _he(rng, (d, d), d))
            self._add(f"{branch}.fc2.b", np.zeros(d))
            self._add(f"{branch}.cls.w", rng.normal(0, 0.01, size=(d, k)))
            self._add(f"{branch}.cls.b", np.zeros(k))
            self._add(f"{branch}.bbox.w", rng.normal(0, 0.001, size=(d, 4)))
            self._add(f"{branch}.bbox.b", np.zeros(4))

        g = cfg.context_grid_size
        self._add("context.conv.w", _he(rng, (3, 3, c, c), 9 * c))
        self._add("context.conv.b", np.zeros(c))
        if cfg.context_mode == "fc":
            self._add("context.fc.w", rng.normal(0, 0.01, size=(flat, g * g)))
            self._add("context.fc.b", np.zeros(g * g))
        self._add("context.out.w", rng.normal(0, 0.01, size=(1, 1, 1, 1)))
        self._add("context.out.b", np.zeros(1))

    def head_param_names(self) -> list[str]:
        """Final-layer parameters replaced during transfer-learning surgery."""
        return [n for n in self.params
                if n.startswith(("occluder.", "occludee.", "context.", "rpn."))]

    def reinit_heads(self, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0DE)))
        saved = {n: t.data.copy() for n, t in self.params.items()
                 if not n.startswith(("occluder.", "occludee.", "context.", "rpn."))}
        self._init_params(rng)
        for n, arr in saved.items():
            self.params[n] = Tensor(arr)

    # -- forward pieces -----------------------------------------------------

    def backbone_forward(self, pixels: np.ndarray) -> Tensor:
        """(H,W,3) uint8/float image -> (H/stride, W/stride, C) feature map."""
        pixels = np.asarray(pixels, dtype=np.float64)
        if not np.isfinite(pixels).all():
            raise ValueError("non-finite pixel input")
        x = pixels / 255.0 - 0.5
        s = self.config.backbone.stride
        h, w = x.shape[:2]
        pad_h = (-h) % s
        pad_w = (-w) % s
        if pad_h or pad_w:
            x = np.pad(x, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
        t = Tensor(x, requires_grad=False)
        p = self.params
        if self.config.backbone.variant == "tiny":
            t = nn.relu(nn.conv2d(t, p["backbone.stem.w"], p["backbone.stem.b"],
                                  stride=4, pad=0))
            t = nn.relu(nn.conv2d(t, p["backbone.conv1.w"], p["backbone.conv1.b"],
                                  stride=2, pad=1))
            last_stride = 2 if self.config.backbone.stride == 16 else 1
            t = nn.relu(nn.conv2d(t, p["backbone.conv2.w"], p["backbone.conv2.b"],
                                  stride=last_stride, pad=1))
        else:
            t = nn.relu(nn.conv2d(t, p["backbone.stem.w"], p["backbone.stem.b"],
                                  stride=4, pad=0))
            for stage in range(2):
                stage_stride = 2 if (stage == 0 or self.config.backbone.stride == 16) else 1
                for blk in range(self.config.backbone.blocks_per_stage):
                    stride = stage_stride if blk == 0 else 1
                    y = nn.relu(nn.conv2d(t, p[f"backbone.s{stage}.b{blk}.a.w"],
                                          p[f"backbone.s{stage}.b{blk}.a.b"],
                                          stride=stride, pad=1))
                    y = nn.conv2d(y, p[f"backbone.s{stage}.b{blk}.b.w"],
                                  p[f"backbone.s{stage}.b{blk}.b.b"], stride=1, pad=1)
                    if stride == 1:
                        y = nn.add(y, t)  # residual skip when shapes match
                    t = nn.relu(y)
        return t

    def rpn_forward(self, features: Tensor) -> tuple[Tensor, Tensor]:
        """Feature map -> per-anchor objectness logits (A,) and deltas (A,4)."""
        p = self.params
        a = self.config.anchors.anchors_per_cell
        mid = nn.relu(nn.conv2d(features, p["rpn.conv.w"], p["rpn.conv.b"],
                                stride=1, pad=1))
        scores = nn.conv2d(mid, p["rpn.score.w"], p["rpn.score.b"], stride=1, pad=0)
        deltas = nn.conv2d(mid, p["rpn.delta.w"], p["rpn.delta.b"], stride=1, pad=0)
        rows, cols = scores.data.shape[:2]
        scores = nn.reshape(scores, (rows * cols * a,))
        deltas = nn.reshape(deltas, (rows * cols * a, 4))
        return scores, deltas

    def anchors_for(self, features: Tensor) -> np.ndarray:
        rows, cols = features.data.shape[:2]
        return generate_anchors((rows, cols), self.config.anchors,
                                self.config.anchors.strides[0])

    def rpn_propose(self, features: Tensor, image_size: tuple[float, float],
                    score_threshold: float = 0.0, pre_nms_top_n: int = 600,
                    nms_threshold: float = 0.7,
                    post_nms_top_n: int = 300,
                    rpn_out: tuple[Tensor, Tensor] | None = None) -> ProposalSet:
        """Decode, filter, and NMS the RPN outputs into scored proposals.

        Pass precomputed `rpn_out` to avoid running the RPN twice.
        """
        from . import kernels

        score_logits, deltas = rpn_out if rpn_out is not None else self.rpn_forward(features)
        scores = nn.sigmoid(score_logits.data)
        anchors = self.anchors_for(features)
        keep = scores >= score_threshold
        if not keep.any():
            return ProposalSet.empty(self.config.fes.k)
        idx = np.nonzero(keep)[0]
        order = idx[np.argsort(-scores[idx], kind="stable")][:pre_nms_top_n]
        boxes = apply_deltas_batch(anchors[order], deltas.data[order])
        boxes = clip_boxes_batch(boxes, image_size)
        # drop degenerate boxes before NMS/pooling
        ok = (boxes[:, 2] - boxes[:, 0] > 1.0) & (boxes[:, 3] - boxes[:, 1] > 1.0)
        boxes, kept_scores = boxes[ok], scores[order][ok]
        if len(boxes) == 0:
            return ProposalSet.empty(self.config.fes.k)
        keep_idx = kernels.nms_indices(boxes, kept_scores, nms_threshold)[:post_nms_top_n]
        boxes = boxes[keep_idx]
        kept_scores = kept_scores[keep_idx]
        expansions = fes_expand_batch(boxes, self.config.fes, image_size)
        return ProposalSet(boxes, kept_scores, expansions)

    def extract_roi_features(self, features: Tensor, boxes: np.ndarray) -> Tensor:
        """(N,4) boxes -> (N,P,P,C) pooled features, differentiable in features."""
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        if len(boxes) and (np.any(boxes[:, 2] <= boxes[:, 0])
                           or np.any(boxes[:, 3] <= boxes[:, 1])):
            raise ValueError("zero-area RoI box; clip/filter upstream")
        return nn.roi_align(features, boxes, self.config.pool_size,
                            float(self.config.backbone.stride))

    def _head(self, branch: str, roi: Tensor) -> tuple[Tensor, Tensor]:
        p = self.params
        n = roi.data.shape[0]
        flat = nn.reshape(roi, (n, int(np.prod(roi.data.shape[1:]))))
        h = nn.relu(nn.add(nn.matmul(flat, p[f"{branch}.fc1.w"]), p[f"{branch}.fc1.b"]))
        h = nn.relu(nn.add(nn.matmul(h, p[f"{branch}.fc2.w"]), p[f"{branch}.fc2.b"]))
        cls = nn.add(nn.matmul(h, p[f"{branch}.cls.w"]), p[f"{branch}.cls.b"])
        deltas = nn.add(nn.matmul(h, p[f"{branch}.bbox.w"]), p[f"{branch}.bbox.b"])
        return cls, deltas

    def occluder_forward(self, roi: Tensor) -> BranchOutput:
        cls, deltas = self._head("occluder", roi)
        return BranchOutput(cls, deltas, Branch.OCCLUDER)

    def occlusion_context(self, roi: Tensor) -> Tensor:
        """(N,P,P,C) index-0 RoI features -> (N,P,P,1) occlusion-context maps."""
        p = self.params
        cfg = self.config
        n = roi.data.shape[0]
        if n == 0:
            return Tensor(np.zeros((0, cfg.pool_size, cfg.pool_size, 1)),
                          requires_grad=False)
        # conv2d works on one map at a time; RoIs are few, loop is fine
        outs = []
        for i in range(n):
            x = _slice_rows(roi, i)
            x = nn.relu(nn.conv2d(x, p["context.conv.w"], p["context.conv.b"],
                                  stride=1, pad=1))
            if cfg.context_mode == "fc":
                g = cfg.context_grid_size
                flat = nn.reshape(x, (1, int(np.prod(x.data.shape))))
                grid = nn.add(nn.matmul(flat, p["context.fc.w"]), p["context.fc.b"])
                grid = nn.reshape(grid, (g, g, 1))
                up = nn.bilinear_upsample(grid, (cfg.pool_size, cfg.pool_size))
            else:
                # fully convolutional reading: stay at P x P, collapse channels
                up = _channel_mean(x)
            out = nn.conv2d(up, p["context.out.w"], p["context.out.b"],
                            stride=1, pad=0)
            outs.append(out)
        return _stack(outs)

    def occludee_forward(self, roi: Tensor, context: Tensor,
                         expansion_features: Tensor) -> OccludeeOutput:
        """Apply the occludee head to context-augmented expansion features.

        `expansion_features` is (N*(k+1),P,P,C), proposal-major; `context` is
        (N,P,P,1) and is broadcast-added across channels and expansions.
        """
        k = self.config.fes.k
        n_ctx = context.data.shape[0]
        m = expansion_features.data.shape[0]
        if m != n_ctx * (k + 1):
            raise ValueError(f"expected {n_ctx}*(k+1) expansion rows, got {m}")
        tiled = nn.repeat_rows(context, k + 1)  # (M,P,P,1)
        augmented = nn.add(expansion_features, tiled)
        cls, deltas = self._head("occludee", augmented)
        return OccludeeOutput(cls, deltas, k)

    # -- checkpoints --------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def save_checkpoint(self, path: str | Path):
        meta = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "config": _config_to_dict(self.config),
            "params": {name: list(t.data.shape) for name, t in self.params.items()},
        }
        arrays = {f"param/{name}": t.data for name, t in self.params.items()}
        np.savez_compressed(path, __meta__=np.frombuffer(
            json.dumps(meta).encode(), dtype=np.uint8), **arrays)

    @staticmethod
    def load_checkpoint_arrays(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
        with np.load(path) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
                raise ValueError(f"unsupported checkpoint format: "
                                 f"{meta.get('format_version')}")
            arrays = {k[len("param/"):]: z[k] for k in z.files
                      if k.startswith("param/")}
        return meta, arrays

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "O2RNet":
        meta, arrays = cls.load_checkpoint_arrays(path)
        model = cls(_config_from_dict(meta["config"]))
        for name, arr in arrays.items():
            if name not in model.params:
                raise ValueError(f"unknown parameter in checkpoint: {name}")
            if model.params[name].data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}")
            model.params[name] = Tensor(arr.astype(np.float64))
        return model


# -- helpers ----------------------------------------------------------------

def _slice_rows(t: Tensor, i: int) -> Tensor:
    """Differentiable row-select t[i] for an (N,...) tensor."""
    from .nn.autograd import _accum

    def backward(g):
        full = np.zeros_like(t.data)
        full[i] = g
        _accum(t, full)

    return Tensor(t.data[i], (t,), backward)


def _channel_mean(t: Tensor) -> Tensor:
    from .nn.autograd import _accum

    c = t.data.shape[-1]

    def backward(g):
        _accum(t, np.repeat(g, c, axis=-1) / c)

    return Tensor(t.data.mean(axis=-1, keepdims=True), (t,), backward)


def _stack(tensors: Sequence[Tensor]) -> Tensor:
    from .nn.autograd import _accum

    data = np.stack([t.data for t in tensors])

    def backward(g):
        for i, t in enumerate(tensors):
            _accum(t, g[i])

    return Tensor(data, tuple(tensors), backward)


def _config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "backbone": {"variant": cfg.backbone.variant,
                     "channels": cfg.backbone.channels,
                     "stride": cfg.backbone.stride,
                     "blocks_per_stage": cfg.backbone.blocks_per_stage},
        "anchors": {"strides": list(cfg.anchors.strides),
                    "scales": list(cfg.anchors.scales),
                    "aspect_ratios": list(cfg.anchors.aspect_ratios)},
        "fes": {"t": cfg.fes.t, "k": cfg.fes.k,
                "step_frac": cfg.fes.step_frac, "mode": cfg.fes.mode},
        "num_classes": cfg.num_classes,
        "pool_size": cfg.pool_size,
        "head_dim": cfg.head_dim,
        "context_grid": cfg.context_grid,
        "context_mode": cfg.context_mode,
    }


def _config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(
        backbone=BackboneSpec(**d["backbone"]),
        anchors=AnchorConfig(strides=tuple(d["anchors"]["strides"]),
                             scales=tuple(d["anchors"]["scales"]),
                             aspect_ratios=tuple(d["anchors"]["aspect_ratios"])),
        fes=FESConfig(**d["fes"]),
        num_classes=d["num_classes"],
        pool_size=d["pool_size"],
        head_dim=d["head_dim"],
        context_grid=d["context_grid"],
        context_mode=d["context_mode"],
    )
