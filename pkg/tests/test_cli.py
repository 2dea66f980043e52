"""End-to-end command-line pipeline tests on a miniature dataset."""

import json

import pytest

from o2rnet.cli import main
from o2rnet.data import MANIFEST_NAME
from o2rnet.inference import read_detections

TINY_YAML = """\
seed: 5
synth:
  count: 4
  image_size: [64, 64]
  objects_per_image: [2, 3]
  radius_range: [8, 12]
model:
  backbone: {variant: tiny, channels: 8, stride: 8}
  anchors: {strides: [8], scales: [16.0], aspect_ratios: [1.0]}
  fes: {t: 1}
  pool_size: 4
  head_dim: 8
train:
  total_iters: 3
  warmup_iters: 1
  base_lr: 0.002
  roi_batch: 8
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.yaml"
    cfg.write_text(TINY_YAML)
    data = root / "data"
    assert main(["synth", "--config", str(cfg), "--out", str(data)]) == 0
    return root, cfg, data


class TestSynth:
    def test_writes_manifest_and_images(self, workspace):
        root, cfg, data = workspace
        manifest = data / MANIFEST_NAME
        lines = manifest.read_text().strip().splitlines()
        assert len(lines) == 4
        for line in lines:
            row = json.loads(line)
            assert (data / row["image_path"]).is_file()

    def test_deterministic(self, workspace, tmp_path):
        root, cfg, data = workspace
        again = tmp_path / "again"
        assert main(["synth", "--config", str(cfg), "--out", str(again)]) == 0
        assert (again / MANIFEST_NAME).read_bytes() == \
            (data / MANIFEST_NAME).read_bytes()

    def test_unknown_config_key_fails(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("sinth:\n  count: 2\n")
        assert main(["synth", "--config", str(bad),
                     "--out", str(tmp_path / "x")]) == 1
        assert "sinth" in capsys.readouterr().err
        assert not (tmp_path / "x").exists()  # no side effects on bad config


class TestIngest:
    def test_vgg_round_trip(self, tmp_path):
        via = {"img1.png": {"filename": "img1.png", "regions": [
            {"shape_attributes": {"name": "rect", "x": 4, "y": 6,
                                  "width": 20, "height": 10}}]}}
        ann = tmp_path / "via.json"
        ann.write_text(json.dumps(via))
        out = tmp_path / "ingested"
        assert main(["ingest", "--annotations", str(ann),
                     "--out", str(out)]) == 0
        row = json.loads((out / MANIFEST_NAME).read_text().splitlines()[0])
        assert row["boxes"] == [[4.0, 6.0, 24.0, 16.0]]


class TestAugment:
    def test_materializes_copies(self, workspace, tmp_path):
        root, cfg, data = workspace
        out = tmp_path / "aug"
        assert main(["augment", "--config", str(cfg), "--data", str(data),
                     "--out", str(out), "--copies", "2",
                     "--preset", "gts-csts-mixup"]) == 0
        lines = (out / MANIFEST_NAME).read_text().strip().splitlines()
        assert len(lines) == 8


@pytest.fixture(scope="module")
def trained(workspace, tmp_path_factory):
    root, cfg, data = workspace
    run_dir = tmp_path_factory.mktemp("run")
    assert main(["train", "--config", str(cfg), "--data", str(data),
                 "--out", str(run_dir)]) == 0
    return run_dir


class TestTrain:
    def test_run_artifacts(self, trained):
        assert (trained / "checkpoint_final.npz").is_file()
        loss_lines = (trained / "loss.csv").read_text().strip().splitlines()
        assert len(loss_lines) == 4  # header + 3 iterations
        meta = json.loads((trained / "run.json").read_text())
        assert meta["seed"] == 5
        assert "config_hash" in meta
        assert meta["schedule"]["base_lr"] == 0.002

    def test_missing_dataset_fails(self, workspace, tmp_path):
        root, cfg, data = workspace
        assert main(["train", "--config", str(cfg),
                     "--data", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "run")]) == 1

    def test_preset_recorded_in_metadata(self, workspace, tmp_path):
        root, base_cfg, data = workspace
        # strip the explicit base_lr so the preset's value shows through
        cfg = tmp_path / "preset.yaml"
        cfg.write_text(base_cfg.read_text().replace("  base_lr: 0.002\n", ""))
        out = tmp_path / "preset_run"
        assert main(["train", "--config", str(cfg), "--data", str(data),
                     "--out", str(out), "--preset", "full-l2"]) == 0
        meta = json.loads((out / "run.json").read_text())
        assert meta["schedule"]["momentum"] == 0.9
        assert meta["schedule"]["base_lr"] == 0.001

    def test_lambda1_one_logs_occludee_column(self, workspace, tmp_path):
        root, cfg, data = workspace
        out = tmp_path / "baseline"
        assert main(["train", "--config", str(cfg), "--data", str(data),
                     "--out", str(out), "--lambda1", "1.0"]) == 0
        header = (out / "loss.csv").read_text().splitlines()[0]
        assert "occludee" in header
        meta = json.loads((out / "run.json").read_text())
        assert meta["weights"]["lambda1"] == 1.0


class TestInferEvalReport:
    def test_full_chain(self, workspace, trained, tmp_path):
        root, cfg, data = workspace
        dump = tmp_path / "dets.jsonl"
        assert main(["infer", "--config", str(cfg),
                     "--checkpoint", str(trained / "checkpoint_final.npz"),
                     "--data", str(data), "--out", str(dump),
                     "--score-threshold", "0.0"]) == 0
        dets = read_detections(dump)
        assert len(dump.read_text().strip().splitlines() if dets else []) == len(dets)

        eval_dir = trained / "eval"
        assert main(["eval", "--config", str(cfg), "--dump", str(dump),
                     "--data", str(data), "--out", str(eval_dir),
                     "--name", "smoke"]) == 0
        assert (eval_dir / "summary.csv").is_file()
        assert "AR@100" in (eval_dir / "summary.txt").read_text()
        assert (eval_dir / "pr_curve.csv").is_file()

        report_dir = tmp_path / "report"
        assert main(["report", "--runs", str(trained),
                     "--out", str(report_dir)]) == 0
        table = (report_dir / "comparison.txt").read_text()
        assert "AP50" in table and "F1-Score" in table
        assert (report_dir / "comparison.csv").is_file()
        assert (report_dir / "loss_curves.png").is_file()

    def test_infer_deterministic(self, workspace, trained, tmp_path):
        root, cfg, data = workspace
        dumps = []
        for tag in ("a", "b"):
            path = tmp_path / f"{tag}.jsonl"
            assert main(["infer", "--config", str(cfg),
                         "--checkpoint", str(trained / "checkpoint_final.npz"),
                         "--data", str(data), "--out", str(path),
                         "--score-threshold", "0.0"]) == 0
            dumps.append(path.read_bytes())
        assert dumps[0] == dumps[1]
