import json
import os
import subprocess
import sys

import pytest

from ptclearn.cli import build_parser, main

FAST = ["--seed", "1", "--set", "model.k=4", "--set", "twin.epochs=2", "--set", "ic.epochs=2", "--set", "pm.epochs=2", "--set", "sl.epochs=1", "--quiet"]


class TestExitCodes:
    def test_pipeline_ok(self, tmp_path, capsys):
        out = str(tmp_path / "run")
        assert main(["pipeline", "--output", out, *FAST]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["stages"] == ["IC", "PM", "SL"]
        assert os.path.exists(os.path.join(out, "metrics.csv"))

    @pytest.mark.parametrize(
        "extra",
        [["--alpha-w", "2"], ["--bitwidth", "0"], ["--set", "sl.nope=1"], ["--config", "/nonexistent.yaml"]],
    )
    def test_config_error(self, tmp_path, extra, capsys):
        assert main(["pipeline", "--output", str(tmp_path), *FAST, *extra]) == 2
        assert "config error" in capsys.readouterr().err

    def test_bad_checkpoint(self, tmp_path):
        (tmp_path / "c.json").write_text("[]")
        assert main(["eval", "--output", str(tmp_path), "--checkpoint", str(tmp_path / "c.json"), "--quiet"]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numerical_abort(self, tmp_path, capsys):
        out = str(tmp_path / "nan")
        code = main(["train", "--output", out, *FAST, "--set", "sl.lr=1e300", "--set", "sl.epochs=2"])
        assert code == 3
        assert "numerical abort" in capsys.readouterr().err
        assert os.path.exists(os.path.join(out, "abort_state.json"))

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as e:
            build_parser().parse_args(["fly"])
        assert e.value.code == 2


class TestCommands:
    def test_stage_commands_chain(self, tmp_path, capsys):
        out = str(tmp_path)
        assert main(["calibrate", "--output", out, *FAST]) == 0
        assert json.loads(capsys.readouterr().out)["stages"] == ["IC"]
        assert main(["map", "--output", out, "--checkpoint", os.path.join(out, "checkpoint_ic.json"), *FAST]) == 0
        assert json.loads(capsys.readouterr().out)["stages"] == ["PM"]
        assert main(["train", "--output", out, "--checkpoint", os.path.join(out, "checkpoint_pm.json"), *FAST]) == 0
        assert "final_test_acc" in json.loads(capsys.readouterr().out)

    def test_profile(self, tmp_path, capsys):
        out = str(tmp_path)
        assert main(["profile", "--output", out, "--alpha-w", "0.5", *FAST]) == 0
        ratios = json.loads(capsys.readouterr().out)
        assert ratios["energy_ratio"] > 1
        report = json.load(open(os.path.join(out, "cost.json")))
        assert set(report["projected"]) == {"IC", "PM"}
        assert open(os.path.join(out, "cost.csv")).readline().startswith("phase,")

    def test_eval(self, tmp_path, capsys):
        out = str(tmp_path)
        main(["pipeline", "--output", out, *FAST])
        capsys.readouterr()
        assert main(["eval", "--output", out, "--checkpoint", os.path.join(out, "checkpoint_sl.json"), *FAST]) == 0
        result = json.load(open(os.path.join(out, "eval.json")))
        assert result["stage"] == "SL" and 0 <= result["test"]["acc"] <= 1

    def test_config_file(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("seed: 2\nsl: {epochs: 1}\nic: {epochs: 1}\npm: {enabled: false}\n")
        assert main(["pipeline", "--config", str(cfg), "--output", str(tmp_path / "o"), "--quiet"]) == 0
        assert "seed: 2" in open(tmp_path / "o" / "config.yaml").read()

    def test_module_entry_point(self, tmp_path):
        r = subprocess.run([sys.executable, "-m", "ptclearn", "profile", "--output", str(tmp_path), "--quiet"], capture_output=True, text=True)
        assert r.returncode == 0, r.stderr
