import json

import pytest

from ptclearn.config import ConfigError, ExperimentConfig, LayerSpec, ModelConfig, SLConfig


def custom():
    return ExperimentConfig.from_dict(
        {
            "seed": 3,
            "model": {
                "preset": "custom",
                "input_shape": [6],
                "num_classes": 3,
                "k": 3,
                "layers": [{"kind": "linear", "in_features": 6, "out_features": 3}],
            },
            "dataset": {"kind": "blobs", "train_classes": [0, 1]},
            "sampling": {"feedback_mode": "uniform", "alpha_w": 0.5},
        }
    )


class TestRoundTrip:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg

    def test_yaml_and_json(self):
        cfg = custom()
        assert ExperimentConfig.from_text(cfg.to_yaml()) == cfg
        assert ExperimentConfig.from_text(cfg.to_json()) == cfg
        assert json.loads(cfg.to_json())["model"]["input_shape"] == [6]

    def test_file(self, tmp_path):
        cfg = custom()
        cfg.save(tmp_path / "c.yaml")
        assert ExperimentConfig.load(str(tmp_path / "c.yaml")) == cfg

    def test_empty_document(self):
        assert ExperimentConfig.from_text("") == ExperimentConfig()


class TestValidation:
    @pytest.mark.parametrize(
        "doc",
        [
            {"colour": 1},
            {"noise": {"gamma": 0.1}},
            {"model": {"preset": "resnet"}},
            {"model": {"k": 1}},
            {"model": {"preset": "custom"}},
            {"dataset": {"kind": "idx"}},
            {"ic": {"optimizer": "sgd"}},
            {"sl": {"lr": -1}},
            {"sampling": {"alpha_w": 0}},
            {"workers": 0},
            [1, 2],
        ],
    )
    def test_rejects(self, doc):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(doc)

    def test_bad_yaml(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_text("a: [1,")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ExperimentConfig.load(str(tmp_path / "none.yaml"))

    def test_layer_geometry(self):
        with pytest.raises(ConfigError):
            LayerSpec("conv2d", 1, 4, kernel=3, stride=0)

    def test_bad_bitwidth_schedule(self):
        with pytest.raises(ConfigError):
            ExperimentConfig().ic.schedule(0)


class TestOverrides:
    def test_flags(self):
        cfg = ExperimentConfig().with_overrides(alpha_w=0.3, alpha_c=0.5, alpha_d=0.7, bitwidth=6, gamma_std=0.01, crosstalk=0.02, workers=2, seed=9)
        assert (cfg.sampling.alpha_w, cfg.sampling.column_alpha_c, cfg.sampling.data_alpha_d) == (0.3, 0.5, 0.7)
        assert (cfg.noise.bitwidth_unitary, cfg.noise.gamma_std, cfg.noise.crosstalk_factor) == (6, 0.01, 0.02)
        assert (cfg.workers, cfg.seed) == (2, 9)

    def test_none_ignored(self):
        assert ExperimentConfig().with_overrides(alpha_w=None, set=None) == ExperimentConfig()

    def test_invalid_flag_value(self):
        with pytest.raises(ConfigError):
            ExperimentConfig().with_overrides(alpha_w=2.0)

    def test_set(self):
        cfg = ExperimentConfig().with_overrides(set=["sl.epochs=5", "pm.ideal_osp=true", "sl.lr=1e-3"])
        assert cfg.sl.epochs == 5 and cfg.pm.ideal_osp is True and cfg.sl.lr == 1e-3

    @pytest.mark.parametrize("item", ["sl.epochs", "sl.nope=1", "nope.epochs=1", "seed.x=1"])
    def test_set_rejects(self, item):
        with pytest.raises(ConfigError):
            ExperimentConfig().with_setting(item)


class TestResolvedDefaults:
    def test_sl(self):
        assert SLConfig().resolved(True) == (20, 2e-4)
        assert SLConfig().resolved(False) == (100, 2e-3)
        assert SLConfig(epochs=3, lr=0.1).resolved(True) == (3, 0.1)

    def test_presets(self):
        assert ModelConfig("cnn-s").shape == (1, 28, 28) and ModelConfig("cnn-s").classes == 10
        kinds = [s.kind for s in ModelConfig("cnn-s").layer_specs()]
        assert kinds == ["conv2d", "relu", "conv2d", "relu", "flatten", "linear"]
