"""Command-line surface: flows, artifacts, exit codes, determinism."""

import numpy as np
import pytest

from hsmtl.cli import main
from hsmtl.data import SplitPlan, read_cube


TINY_TOML = """\
[data]
schema = "benchmark"
size = [32, 32]

[split]
tile = 4
buffer = 1
fractions = [0.7, 0.15, 0.15]

[train]
patch = 16
patches_per_epoch = 8
val_every = 2
jitter = 0.2

[model]
base_channels = 8

[optimizer]
batch_size = 4
epochs = 2
"""


@pytest.fixture()
def tiny_toml(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text(TINY_TOML)
    return p


class TestGenerateStats:
    def test_generate_then_stats(self, tmp_path, capsys):
        cube = tmp_path / "s.hsc"
        assert main(["generate", "--seed", "7", "--out", str(cube)]) == 0
        assert cube.exists()
        assert main(["stats", str(cube)]) == 0
        out = capsys.readouterr().out
        assert "fractions sum to 1.000000" in out

    def test_generate_deterministic(self, tmp_path):
        a, b = tmp_path / "a.hsc", tmp_path / "b.hsc"
        assert main(["generate", "--seed", "3", "--out", str(a)]) == 0
        assert main(["generate", "--seed", "3", "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_stats_writes_artifacts(self, tmp_path, capsys):
        cube = tmp_path / "s.hsc"
        main(["generate", "--seed", "1", "--out", str(cube)])
        st = tmp_path / "st"
        assert main(["stats", str(cube), "--out", str(st)]) == 0
        for name in ("class_distribution.csv", "separability.csv",
                     "class_distribution.png", "separability.png"):
            assert (st / name).exists()

    def test_custom_size_and_bands(self, tmp_path):
        cube = tmp_path / "s.hsc"
        rc = main(["generate", "--seed", "0", "--size", "32x48",
                   "--bands", "6", "--out", str(cube)])
        assert rc == 0
        scene = read_cube(cube)
        assert scene.bands == 6
        assert scene.size == (32, 48)


class TestSplit:
    def test_split_round_trip(self, tmp_path):
        plan_path = tmp_path / "plan.csv"
        assert main(["split", "--out", str(plan_path), "--seed", "2"]) == 0
        plan = SplitPlan.from_csv(plan_path)
        assert plan.shape == (64, 64)
        assert set(np.unique(plan.assignment)) <= {0, 1, 2}


class TestTrainEvaluate:
    def test_train_writes_artifacts(self, tiny_toml, tmp_path, capsys):
        out = tmp_path / "run"
        rc = main(["train", "--config", str(tiny_toml), "--out", str(out)])
        assert rc == 0
        for name in ("log.csv", "timing.csv", "checkpoint.ckpt", "curves.png"):
            assert (out / name).exists()
        head = (out / "log.csv").read_text().splitlines()[0]
        assert head == "format,log,v1"

    def test_train_twice_identical_logs(self, tiny_toml, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["train", "--config", str(tiny_toml), "--out", str(a)]) == 0
        assert main(["train", "--config", str(tiny_toml), "--out", str(b)]) == 0
        assert (a / "log.csv").read_bytes() == (b / "log.csv").read_bytes()
        assert (a / "checkpoint.ckpt").read_bytes() == \
            (b / "checkpoint.ckpt").read_bytes()

    def test_evaluate_checkpoint(self, tiny_toml, tmp_path, capsys):
        run = tmp_path / "run"
        main(["train", "--config", str(tiny_toml), "--out", str(run)])
        rep = tmp_path / "rep"
        rc = main(["evaluate", str(run / "checkpoint.ckpt"),
                   "--config", str(tiny_toml), "--out", str(rep)])
        assert rc == 0
        assert (rep / "metrics.csv").exists()
        assert "micro" in capsys.readouterr().out

    def test_evaluate_other_split(self, tiny_toml, tmp_path):
        run = tmp_path / "run"
        main(["train", "--config", str(tiny_toml), "--out", str(run)])
        rc = main(["evaluate", str(run / "checkpoint.ckpt"),
                   "--config", str(tiny_toml), "--split", "val",
                   "--out", str(tmp_path / "rep")])
        assert rc == 0

    def test_freeze_encoder_flag(self, tiny_toml, tmp_path):
        rc = main(["train", "--config", str(tiny_toml),
                   "--out", str(tmp_path / "run"), "--freeze-encoder"])
        assert rc == 0


class TestSweeps:
    def test_ablate_row_set(self, tiny_toml, tmp_path, capsys):
        out = tmp_path / "sweep"
        rc = main(["ablate", "--config", str(tiny_toml), "--out", str(out),
                   "--seeds", "0"])
        assert rc == 0
        lines = (out / "ablation.csv").read_text().splitlines()
        assert lines[0] == "format,sweep,v1"
        methods = {ln.split(",")[0] for ln in lines[2:]}
        assert methods == {"baseline", "baseline_r", "baseline_rd",
                           "baseline_rda", "baseline_rdam", "baseline_dac",
                           "full"}
        # per-seed row plus mean/min/max summary rows for each method
        assert len(lines) - 2 == 7 * 4

    def test_losses_row_set(self, tiny_toml, tmp_path, capsys):
        out = tmp_path / "sweep"
        rc = main(["losses", "--config", str(tiny_toml), "--out", str(out),
                   "--seeds", "0"])
        assert rc == 0
        lines = (out / "losses.csv").read_text().splitlines()
        methods = {ln.split(",")[0] for ln in lines[2:]}
        assert methods == {"cost_sensitive_ce", "focal", "focal_with_weights"}


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        assert main(["nope"]) == 1

    def test_no_subcommand(self, capsys):
        assert main([]) == 1

    def test_missing_out(self, capsys):
        assert main(["generate"]) == 1
        assert "--out" in capsys.readouterr().err

    def test_bad_flag_value(self, capsys):
        assert main(["generate", "--size", "64", "--out", "x.hsc"]) == 1

    def test_runtime_failure(self, tmp_path, capsys):
        assert main(["stats", str(tmp_path / "missing.hsc")]) == 2
        assert main(["evaluate", str(tmp_path / "missing.ckpt")]) == 2

    def test_bad_config_file(self, tmp_path, capsys):
        p = tmp_path / "bad.toml"
        p.write_text("[optimizer]\nlerning_rate = 1\n")
        assert main(["train", "--config", str(p)]) == 2

    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
