import json
import os

import numpy as np
import pytest

from ptclearn import oracle
from ptclearn.blocked import from_blocks
from ptclearn.config import ConfigError, ExperimentConfig
from ptclearn.pipeline import StageError, build_model, checkpoint_dict, load_checkpoint, read_checkpoint, run_pipeline

IDEAL = {"bitwidth_unitary": 32, "bitwidth_sigma": 32, "gamma_std": 0.0, "crosstalk_factor": 0.0, "phase_bias_enabled": False}


def small(tmp_path, name="run", **sections):
    d = {
        "seed": 1,
        "output_dir": str(tmp_path / name),
        "model": {"k": 4},
        "twin": {"epochs": 3},
        "ic": {"epochs": 3},
        "pm": {"epochs": 3},
        "sl": {"epochs": 2},
    }
    for key, value in sections.items():
        d[key] = {**d.get(key, {}), **value} if isinstance(value, dict) else value
    return ExperimentConfig.from_dict(d)


class TestPipeline:
    def test_artifacts(self, tmp_path):
        cfg = small(tmp_path)
        state = run_pipeline(cfg)
        out = cfg.output_dir
        for name in [
            "config.yaml",
            "twin_metrics.csv",
            "ic_report.json",
            "pm_report.json",
            "mapping_0.csv",
            "checkpoint_ic.json",
            "checkpoint_pm.json",
            "checkpoint_sl.json",
            "metrics.csv",
            "cost.json",
            "cost.csv",
            "plot_ic.csv",
            "plot_pm.csv",
            "plot_sl.csv",
        ]:
            assert os.path.exists(os.path.join(out, name)), name
        assert ExperimentConfig.load(os.path.join(out, "config.yaml")) == cfg
        assert len(state.metrics) == 2 and state.mapped
        cost = json.load(open(os.path.join(out, "cost.json")))
        assert set(cost["stages"]) == {"IC", "PM", "SL"}
        assert cost["stages"]["IC"]["ptc_calls"] == 4 * cost["stages"]["IC"]["objective_calls"]

    def test_rerun_identical(self, tmp_path):
        a = run_pipeline(small(tmp_path, "a"))
        b = run_pipeline(small(tmp_path, "b"))
        for name in ("metrics.csv", "mapping_1.csv", "checkpoint_sl.json"):
            assert open(os.path.join(a.cfg.output_dir, name)).read() == open(os.path.join(b.cfg.output_dir, name)).read()

    def test_noise_free_mapping_is_exact(self, tmp_path):
        cfg = small(tmp_path, noise=IDEAL, ic={"enabled": False}, pm={"epochs": 0}, sl={"enabled": False})
        state = run_pipeline(cfg)
        twin_weights = [l.weight.value for l in state.twin.layers if hasattr(l, "weight")]
        for layer, w, rep in zip(state.model.photonic_layers, twin_weights, state.reports["PM"]):
            assert rep.dist_after.max() <= 1e-6
            np.testing.assert_allclose(from_blocks(oracle.realized_weight(layer.ptc), *w.shape), w, atol=1e-6)

    def test_scratch_ignores_disk(self, tmp_path):
        run_pipeline(small(tmp_path, "first"))
        cfg = small(tmp_path, "first", ic={"enabled": False}, pm={"enabled": False}, seed=5)
        state = run_pipeline(cfg)
        assert not state.mapped and state.twin is None
        fresh = small(tmp_path, "other", ic={"enabled": False}, pm={"enabled": False}, seed=5)
        other = run_pipeline(fresh)
        assert [m.loss for m in state.metrics] == [m.loss for m in other.metrics]

    def test_stage_subset(self, tmp_path):
        state = run_pipeline(small(tmp_path), stages=["ic"])
        assert list(state.reports) == ["IC"] and not state.metrics
        with pytest.raises(ConfigError):
            run_pipeline(small(tmp_path), stages=["XX"])


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = small(tmp_path)
        state = run_pipeline(cfg, stages=["IC", "PM"])
        d = read_checkpoint(os.path.join(cfg.output_dir, "checkpoint_pm.json"))
        assert d["stage"] == "PM"
        fresh = build_model(cfg)
        load_checkpoint(fresh, d)
        x = np.random.default_rng(0).standard_normal((5, 8))
        np.testing.assert_array_equal(fresh.forward(x), state.model.forward(x))
        assert checkpoint_dict(fresh, "PM", cfg.seed) == d

    def test_mismatch(self, tmp_path):
        cfg = small(tmp_path)
        d = checkpoint_dict(build_model(cfg), "IC", 0)
        d["layers"] = d["layers"][:1]
        with pytest.raises(ConfigError):
            load_checkpoint(build_model(cfg), d)

    def test_unreadable(self, tmp_path):
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(ConfigError):
            read_checkpoint(str(tmp_path / "bad.json"))

    def test_mapped_flag_from_checkpoint(self, tmp_path):
        cfg = small(tmp_path, ic={"enabled": False}, pm={"enabled": False}, sl={"epochs": None, "max_steps_per_epoch": 1})
        d = checkpoint_dict(build_model(cfg), "PM", 1)
        state = run_pipeline(cfg, checkpoint=d)
        assert state.mapped and len(state.metrics) == 20


class TestStageError:
    def test_non_finite_target(self, tmp_path, monkeypatch):
        import ptclearn.pipeline as pipeline

        real = pipeline.train_twin

        def broken(cfg, data):
            twin, rows = real(cfg, data)
            twin.layers[0].weight.value[0, 0] = np.nan
            return twin, rows

        monkeypatch.setattr(pipeline, "train_twin", broken)
        with pytest.raises(StageError, match="PM failed on photonic layer 0"):
            run_pipeline(small(tmp_path, ic={"enabled": False}))

    def test_message_lists_blocks(self):
        e = StageError("IC", 2, "diverged", blocks=[(0, 1)])
        assert "layer 2" in str(e) and "(0, 1)" in str(e)

    def test_model_shape_mismatch(self, tmp_path):
        with pytest.raises(ConfigError):
            build_model(small(tmp_path, model={"preset": "mlp", "input_shape": [9]}))


class TestResetClassifier:
    def test_head_zeroed_bases_kept(self, tmp_path):
        from ptclearn.pipeline import reset_classifier

        model = build_model(small(tmp_path))
        head = model.photonic_layers[-1]
        head.init_random(np.random.default_rng(0), 16)
        head.bias.value[...] = 1.0
        u = oracle.realized_u(head.ptc)
        reset_classifier(model)
        # 16-bit attenuator quantization leaves a tiny residual
        np.testing.assert_allclose(model.forward(np.ones((2, 8))), 0.0, atol=1e-4)
        np.testing.assert_array_equal(oracle.realized_u(head.ptc), u)
