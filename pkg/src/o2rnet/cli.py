"""Command-line entry point: dataset synthesis/ingestion, augmentation,
training, inference, evaluation, and report emission."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .augment import augment_pipeline
from .config import (
    RunConfig,
    build_augment_spec,
    build_model_config,
    build_synth_config,
    build_train_config,
    load_run_config,
)
from .data import (
    MANIFEST_NAME,
    generate_synthetic_dataset,
    load_vgg_annotations,
    read_dataset,
    write_dataset,
)
from .evaluation import coco_summary, pr_curve, summary_table, write_summary_csv
from .inference import detect, read_detections, write_detections
from .learning import load_pretrained
from .model import O2RNet
from .train import TrainConfig, Trainer

log = logging.getLogger("o2rnet")


def _common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path, default=None,
                        help="YAML run configuration")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--device", default=None,
                        help="compute device (only 'cpu' is supported)")


def _load_config(args) -> RunConfig:
    overrides = {"seed": args.seed, "device": args.device}
    return load_run_config(args.config, overrides=overrides)


def _manifest_path(data: Path) -> Path:
    path = data / MANIFEST_NAME if data.is_dir() else data
    if not path.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    return path


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    synth_cfg, count = build_synth_config(cfg)
    if args.count is not None:
        count = args.count
    records = generate_synthetic_dataset(synth_cfg, count)
    manifest = write_dataset(records, args.out)
    print(f"wrote {len(records)} scenes to {manifest}")
    return 0


def cmd_ingest(args) -> int:
    cfg = _load_config(args)
    tau_occ = cfg.synth.get("tau_occ", 0.05)
    records = load_vgg_annotations(args.annotations, args.images, tau_occ=tau_occ)
    manifest = write_dataset(records, args.out)
    print(f"ingested {len(records)} images to {manifest}")
    return 0


def cmd_augment(args) -> int:
    cfg = _load_config(args)
    if args.preset is not None:
        cfg.augment["preset"] = args.preset
    spec = build_augment_spec(cfg)
    records = read_dataset(_manifest_path(args.data))
    out = []
    for draw in range(args.copies):
        for rec in records:
            out.append(augment_pipeline(rec, spec, draw * len(records) + len(out),
                                        records))
    manifest = write_dataset(out, args.out)
    print(f"materialized {len(out)} augmented images to {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.preset is not None:
        cfg.train["preset"] = args.preset
    if args.lambda1 is not None:
        cfg.train["lambda1"] = args.lambda1
    if args.fes_t is not None:
        cfg.model.setdefault("fes", {})["t"] = args.fes_t
    records = read_dataset(_manifest_path(args.data))
    train_cfg = build_train_config(cfg)
    model = O2RNet(build_model_config(cfg), seed=cfg.seed)
    pretrained = args.pretrained or cfg.train.get("pretrained")
    if pretrained:
        replace = cfg.train.get("replace_heads", True) and not args.no_replace_heads
        report = load_pretrained(pretrained, model, replace_heads=replace,
                                 seed=cfg.seed)
        log.info("loaded %d params, reinitialized %d", len(report.loaded),
                 len(report.replaced))
    trainer = Trainer(model, train_cfg, args.out)
    ckpt = trainer.train(records)
    print(f"final checkpoint: {ckpt}")
    return 0


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    params = dict(cfg.infer)
    if args.score_threshold is not None:
        params["score_threshold"] = args.score_threshold
    if args.occluder_only:
        params["occluder_only"] = True
    records = read_dataset(_manifest_path(args.data))
    model = O2RNet.from_checkpoint(args.checkpoint)
    detections = []
    for rec in records:
        detections.extend(detect(model, rec, **params))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_detections(args.out, detections)
    print(f"wrote {len(detections)} detections for {len(records)} images "
          f"to {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    score_threshold = args.score_threshold
    if score_threshold is None:
        score_threshold = cfg.eval.get("score_threshold", 0.5)
    detections = read_detections(args.dump)
    records = read_dataset(_manifest_path(args.data), load_pixels=False)
    annotations = [r.annotation for r in records]
    summary = coco_summary(detections, annotations,
                           score_threshold=score_threshold)
    args.out.mkdir(parents=True, exist_ok=True)
    write_summary_csv(args.out / "summary.csv", {args.name: summary})
    table = summary_table(summary, title=f"{args.name} (recall is AR@100)")
    (args.out / "summary.txt").write_text(table + "\n")
    recall, precision = pr_curve(detections, annotations)
    with (args.out / "pr_curve.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("recall", "precision"))
        writer.writerows(zip(recall, precision))
    print(table)
    return 0


def cmd_report(args) -> int:
    rows = []
    curves = {}
    losses = {}
    for run_dir in args.runs:
        name = run_dir.name
        meta_path = run_dir / "run.json"
        meta = json.loads(meta_path.read_text()) if meta_path.is_file() else {}
        summary_path = run_dir / "eval" / "summary.csv"
        if not summary_path.is_file():
            summary_path = run_dir / "summary.csv"
        if summary_path.is_file():
            with summary_path.open() as fh:
                for record in csv.DictReader(fh):
                    rows.append({"model": name,
                                 "step": meta.get("fes_t", "-"), **record})
        curve_path = summary_path.parent / "pr_curve.csv"
        if curve_path.is_file():
            data = np.genfromtxt(curve_path, delimiter=",", skip_header=1)
            if data.size:
                curves[name] = np.atleast_2d(data)
        loss_path = run_dir / "loss.csv"
        if loss_path.is_file():
            with loss_path.open() as fh:
                losses[name] = [float(r["combined"]) for r in csv.DictReader(fh)]
    args.out.mkdir(parents=True, exist_ok=True)
    _write_comparison(args.out / "comparison.csv", args.out / "comparison.txt",
                      rows)
    _plot_curves(args.out, curves, losses)
    print((args.out / "comparison.txt").read_text())
    return 0


_REPORT_COLUMNS = ("model", "step", "ap", "ap50", "ap75", "ar", "ar50",
                   "ar75", "f1")


def _write_comparison(csv_path: Path, txt_path: Path, rows: list[dict]):
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_REPORT_COLUMNS,
                                extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    header = ("model", "step", "AP", "AP50", "AP75", "AR", "AR50", "AR75",
              "F1-Score")
    lines = ["model comparison (AR columns are AR@100)",
             "  ".join(f"{h:>10}" for h in header)]
    for row in rows:
        cells = [str(row.get("model", "-")), str(row.get("step", "-"))]
        cells += [f"{float(row[k]):.3f}" if row.get(k) not in (None, "") else "-"
                  for k in _REPORT_COLUMNS[2:]]
        lines.append("  ".join(f"{c:>10}" for c in cells))
    txt_path.write_text("\n".join(lines) + "\n")


def _plot_curves(out_dir: Path, curves: dict, losses: dict):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if losses:
        fig, ax = plt.subplots(figsize=(6, 4))
        for name, values in losses.items():
            ax.plot(values, label=name)
        ax.set_xlabel("iteration")
        ax.set_ylabel("training loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / "loss_curves.png", dpi=120)
        plt.close(fig)
    if curves:
        fig, ax = plt.subplots(figsize=(5, 5))
        for name, data in curves.items():
            ax.plot(data[:, 0], data[:, 1], label=name)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.05)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / "pr_curves.png", dpi=120)
        plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="o2rnet",
        description="occlusion-aware two-branch object detection pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="convert VGG-annotator JSON to a manifest")
    _common(p)
    p.add_argument("--annotations", type=Path, required=True)
    p.add_argument("--images", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("augment", help="materialize augmented dataset copies")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--copies", type=int, default=1)
    p.add_argument("--preset", default=None)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train a detector")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--preset", default=None, help="schedule preset name")
    p.add_argument("--lambda1", type=float, default=None)
    p.add_argument("--fes-t", type=int, default=None)
    p.add_argument("--pretrained", type=Path, default=None)
    p.add_argument("--no-replace-heads", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run detection over a dataset")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--score-threshold", type=float, default=None)
    p.add_argument("--occluder-only", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a detection dump against a manifest")
    _common(p)
    p.add_argument("--dump", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--name", default="run")
    p.add_argument("--score-threshold", type=float, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="compare runs: table + loss/PR plots")
    _common(p)
    p.add_argument("--runs", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
