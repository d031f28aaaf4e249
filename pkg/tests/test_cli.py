"""End-to-end tests of the lakf command line."""
import json

import pandas as pd
import pytest
import yaml

from lakf.cli import build_parser, flag_overrides, main
from lakf.errors import TrainingDivergedError

SMALL = ["--set", "data.synthetic_tracks=6", "--set", "data.synthetic_length=20"]


@pytest.fixture
def workspace(tmp_path, monkeypatch, clean_logging):
    """Empty working directory without LAKF_* variables"""
    for name in ("LAKF_LOG_LEVEL", "LAKF_LOG_DIR", "LAKF_NUM_THREADS", "LAKF_RUN_DIR"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.chdir(tmp_path)
    return tmp_path


def run(workspace, *argv):
    return main([argv[0], "--run-dir", str(workspace / "run"), "--log-level", "WARNING", *argv[1:]])


def generate(workspace, name="data.jsonl"):
    assert run(workspace, "gen", *SMALL, "--out", str(workspace / name)) == 0
    return workspace / name


class TestParser:
    """Test argument parsing."""

    def test_flag_overrides(self):
        args = build_parser().parse_args(["gen", "--alpha-p", "0.2", "--seed", "3", "--synthetic", "5"])
        items = flag_overrides(args)
        assert "data.alpha_p=0.2" in items
        assert "data.seed=3" in items and "train.seed=3" in items
        assert "data.synthetic_tracks=5" in items

    def test_alpha_targets_model_outside_gen(self):
        args = build_parser().parse_args(["eval", "--alpha-p", "0.1"])
        assert flag_overrides(args) == ["model.alpha_p=0.1"]

    def test_bad_flag(self, workspace):
        assert main(["eval", "--no-such-flag"]) == 2

    def test_no_command(self, workspace, capsys):
        assert main([]) == 2
        assert "usage" in capsys.readouterr().out


class TestGen:
    """Test dataset generation."""

    def test_deterministic(self, workspace):
        first = generate(workspace, "a.jsonl")
        second = generate(workspace, "b.jsonl")
        assert first.read_bytes() == second.read_bytes()
        lines = first.read_text(encoding="utf-8").splitlines()
        assert json.loads(lines[0]) == {"schema_version": json.loads(lines[0])["schema_version"]}
        assert len(lines) == 1 + 6 + 6

    def test_effective_config_written(self, workspace):
        out = workspace / "data.jsonl"
        assert main(["gen", "--run-dir", str(workspace / "run"), "--log-level", "INFO", *SMALL, "--out", str(out)]) == 0
        cfg = yaml.safe_load((workspace / "run" / "effective_config.yaml").read_text(encoding="utf-8"))
        assert cfg["data"]["synthetic_tracks"] == 6
        assert cfg["data"]["synthetic_length"] == 20
        records = [json.loads(line) for line in
                   (workspace / "run" / "logs" / "lakf.log").read_text(encoding="utf-8").splitlines()]
        assert records
        assert all(r["run"]["command"] == "gen" for r in records)
        assert all(r["run"]["run_dir"] == str(workspace / "run") for r in records)

    def test_unknown_override(self, workspace):
        assert run(workspace, "gen", "--set", "data.colour=red") == 2


class TestEval:
    """Test evaluation commands."""

    def test_eval_kf(self, workspace):
        data = generate(workspace)
        assert run(workspace, "eval", "--dataset", str(data), "--model", "kf") == 0
        report = pd.read_csv(workspace / "run" / "report.csv")
        assert {"re_50", "re_95", "ar"} <= set(report.columns)
        assert set(report["model"]) == {"KF(alpha_p=0.05)", "Observation"}
        summary = pd.read_csv(workspace / "run" / "summary.csv")
        assert {"mre_50", "mre_75", "mar"} <= set(summary.columns)

    def test_missing_dataset(self, workspace):
        assert run(workspace, "eval", "--dataset", str(workspace / "absent.jsonl"), "--model", "kf") == 2

    def test_learned_variant_needs_checkpoint(self, workspace):
        data = generate(workspace)
        assert run(workspace, "eval", "--dataset", str(data)) == 2

    def test_grid(self, workspace):
        assert run(workspace, "grid", *SMALL, "--model", "kf@0.05", "--model", "kf@0.4") == 0
        grid = pd.read_csv(workspace / "run" / "grid.csv", index_col=0)
        assert grid.shape == (2, 4)
        assert [float(c) for c in grid.columns] == [0.05, 0.1, 0.2, 0.4]
        assert grid.notna().all().all()

    def test_grid_bad_test_spec(self, workspace):
        assert run(workspace, "grid", "--model", "kf", "--test", "0.1") == 2

    def test_grid_bad_model_alpha(self, workspace, capsys):
        assert run(workspace, "grid", "--model", "kf@abc") == 2
        assert "bad alpha in 'kf@abc'" in capsys.readouterr().err

    def test_grid_bad_test_alpha(self, workspace, capsys):
        assert run(workspace, "grid", "--model", "kf", "--test", "abc=data.jsonl") == 2
        assert "bad alpha in 'abc=data.jsonl'" in capsys.readouterr().err

    def test_eval_bad_model_alpha(self, workspace):
        data = generate(workspace)
        assert run(workspace, "eval", "--dataset", str(data), "--model", "kf@") == 2


class TestTrainEvalTrack:
    """Test train, checkpoint evaluation, tracking and plotting."""

    def test_pipeline(self, workspace):
        data = generate(workspace)
        tiny = ["--set", "model.hidden_dim=8", "--set", "model.sie_channels=2",
                "--set", "train.batch_size=4", "--epochs", "1", "--variant", "KNET"]
        assert run(workspace, "train", "--dataset", str(data), *tiny) == 0
        checkpoint = workspace / "run" / "model.pt"
        assert checkpoint.exists()
        log = (workspace / "run" / "train_log.jsonl").read_text(encoding="utf-8").splitlines()
        assert len(log) == 1

        assert run(workspace, "eval", "--dataset", str(data), "--model", str(checkpoint)) == 0
        report = pd.read_csv(workspace / "run" / "report.csv")
        assert "KNET(model)" in set(report["model"])

        assert run(workspace, "eval", "--dataset", str(data), "--model", str(checkpoint), "--mode", "XYWH") == 1

        assert run(workspace, "track", *SMALL, "--model", str(checkpoint)) == 0
        assert (workspace / "run" / "results" / "synthetic-dance.txt").exists()

        assert run(workspace, "plot", "recall", str(workspace / "run" / "report.csv"),
                   "--out", str(workspace / "recall.png")) == 0
        assert (workspace / "recall.png").stat().st_size > 0

    def test_track_kf_detections(self, workspace):
        dets = workspace / "dets.txt"
        dets.write_text("1,-1,10,20,40,80,0.9\n2,-1,12,21,40,80,0.9\n", encoding="utf-8")
        assert run(workspace, "track", "--model", "kf", "--detections", str(dets)) == 0
        lines = (workspace / "run" / "results" / "dets.txt").read_text(encoding="utf-8").splitlines()
        assert [line.split(",")[:2] for line in lines] == [["1", "1"], ["2", "1"]]

    def test_aiou_and_plot(self, workspace):
        assert run(workspace, "aiou", *SMALL) == 0
        report = pd.read_csv(workspace / "run" / "aiou.csv")
        assert set(report["category"]) == {"Dancer"}
        assert run(workspace, "plot", "aiou", str(workspace / "run" / "aiou.csv")) == 0
        assert (workspace / "run" / "aiou.png").exists()


class TestExitCodes:
    """Test runtime failures map to exit code 1."""

    def test_diverged_training(self, workspace, mocker, capsys):
        data = generate(workspace)
        mocker.patch("lakf.cli.train", side_effect=TrainingDivergedError(2, 17, float("nan")))
        assert run(workspace, "train", "--dataset", str(data), "--variant", "KNET") == 1
        err = capsys.readouterr().err
        assert "lakf.errors: TrainingDivergedError" in err
        assert "epoch 2" in err

    def test_corrupt_dataset(self, workspace, capsys):
        data = workspace / "bad.jsonl"
        data.write_text('{"schema_version": "0"}\n', encoding="utf-8")
        assert run(workspace, "eval", "--dataset", str(data), "--model", "kf") == 1
        assert "FormatError" in capsys.readouterr().err
