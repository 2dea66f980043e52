import pytest

from o2rnet.config import (
    build_augment_spec,
    build_model_config,
    build_synth_config,
    build_train_config,
    load_run_config,
)


def write(tmp_path, text):
    path = tmp_path / "run.yaml"
    path.write_text(text)
    return path


class TestLoading:
    def test_empty_config_defaults(self, tmp_path):
        cfg = load_run_config(write(tmp_path, ""))
        assert cfg.seed == 0 and cfg.device == "cpu"

    def test_unknown_top_level_key(self, tmp_path):
        with pytest.raises(ValueError, match="bogus"):
            load_run_config(write(tmp_path, "bogus: 1\n"))

    def test_unknown_nested_key_named(self, tmp_path):
        with pytest.raises(ValueError, match="train.lerning_rate"):
            load_run_config(write(tmp_path, "train:\n  lerning_rate: 0.1\n"))

    def test_non_mapping_root(self, tmp_path):
        with pytest.raises(ValueError, match="mapping"):
            load_run_config(write(tmp_path, "- a\n- b\n"))

    def test_device_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="device"):
            load_run_config(write(tmp_path, "device: cuda\n"))

    def test_overrides_win(self, tmp_path):
        path = write(tmp_path, "seed: 3\n")
        assert load_run_config(path, overrides={"seed": 9}).seed == 9
        assert load_run_config(path, overrides={"seed": None}).seed == 3

    def test_env_overrides(self, tmp_path):
        path = write(tmp_path, "train:\n  lambda1: 0.5\n")
        cfg = load_run_config(path, environ={
            "O2RNET_CFG_TRAIN__LAMBDA1": "0.75",
            "O2RNET_CFG_SEED": "4",
            "UNRELATED": "x",
        })
        assert cfg.train["lambda1"] == 0.75
        assert cfg.seed == 4

    def test_env_override_bad_key_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="nope"):
            load_run_config(write(tmp_path, ""),
                            environ={"O2RNET_CFG_TRAIN__NOPE": "1"})


class TestBuilders:
    def test_synth(self, tmp_path):
        cfg = load_run_config(write(tmp_path, (
            "seed: 7\nsynth:\n  count: 25\n  image_size: [128, 96]\n"
            "  overlap_target: 0.4\n")))
        synth, count = build_synth_config(cfg)
        assert count == 25
        assert synth.image_size == (128, 96)
        assert synth.overlap_target == 0.4
        assert synth.seed == 7

    def test_augment_preset_with_tweaks(self, tmp_path):
        cfg = load_run_config(write(tmp_path, (
            "augment:\n  preset: gts-csts-mixup\n  rotation_deg: [-5, 5]\n")))
        spec = build_augment_spec(cfg)
        assert spec.families == frozenset({"geometric", "color", "mixup"})
        assert spec.rotation_deg == (-5, 5)

    def test_model(self, tmp_path):
        cfg = load_run_config(write(tmp_path, (
            "model:\n  backbone: {variant: tiny, channels: 8, stride: 8}\n"
            "  fes: {t: 2}\n  pool_size: 4\n  head_dim: 8\n")))
        mc = build_model_config(cfg)
        assert mc.backbone.channels == 8
        assert mc.fes.t == 2
        assert mc.pool_size == 4

    def test_train_preset_and_overrides(self, tmp_path):
        cfg = load_run_config(write(tmp_path, (
            "train:\n  preset: full-l2\n  total_iters: 20\n"
            "  warmup_iters: 5\n  lambda1: 0.25\n")))
        tc = build_train_config(cfg)
        assert tc.schedule.base_lr == 0.001
        assert tc.schedule.total_iters == 20
        assert tc.weights.lambda1 == 0.25
        assert tc.augment is None  # base preset has no families

    def test_train_augment_prob(self, tmp_path):
        cfg = load_run_config(write(tmp_path, "train:\n  augment_prob: 0.25\n"))
        assert build_train_config(cfg).augment_prob == 0.25

    def test_infer_occludee_threshold_accepted(self, tmp_path):
        cfg = load_run_config(write(
            tmp_path, "infer:\n  occludee_score_threshold: 0.9\n"))
        assert cfg.infer["occludee_score_threshold"] == 0.9

    def test_unknown_schedule_preset(self, tmp_path):
        cfg = load_run_config(write(tmp_path, "train:\n  preset: warp9\n"))
        with pytest.raises(ValueError, match="warp9"):
            build_train_config(cfg)
