"""Training loop: determinism, cadence, window sampling, balancer logging."""

import numpy as np
import pytest

import hsmtl.train as tr
from hsmtl.autodiff import Tensor
from hsmtl.config import run_config_from_dict
from hsmtl.optim import OptimizerConfig, lr_at
from hsmtl.train import (build_run_model, predict_scene, prepare_run,
                         train_run, _random_corners, _valid_window,
                         _window_corners)


def tiny_cfg(**over):
    doc = {
        "data": {"schema": "benchmark", "size": [32, 32]},
        "split": {"tile": 4, "buffer": 1, "fractions": [0.7, 0.15, 0.15]},
        "train": {"patch": 16, "patches_per_epoch": 8, "val_every": 100,
                  "jitter": 0.2},
        "optimizer": {"batch_size": 4, "epochs": 2},
        "model": {"base_channels": 8},
    }
    for key, section in over.items():
        doc.setdefault(key, {}).update(section)
    return run_config_from_dict(doc)


@pytest.fixture(scope="module")
def bundle():
    return prepare_run(tiny_cfg())


class TestWindows:
    def test_grid_corners_valid_and_cover(self, bundle):
        patch = 16
        corners = _window_corners(bundle, patch)
        assert corners
        h, w = bundle.scene.size
        covered = np.zeros((h, w), dtype=bool)
        for r, c in corners:
            assert _valid_window(bundle, r, c, patch)
            covered[r:r + patch, c:c + patch] = True
        for name, labels in bundle.loss_labels.items():
            assert covered[labels != 255].all()
        for name, mask in bundle.loss_masks.items():
            assert covered[mask].all()

    def test_random_corners_deterministic(self, bundle):
        fallback = _window_corners(bundle, 16)
        a = _random_corners(bundle, 16, np.random.default_rng(5), 12, fallback)
        b = _random_corners(bundle, 16, np.random.default_rng(5), 12, fallback)
        assert a == b
        assert len(a) == 12
        for r, c in a:
            assert _valid_window(bundle, r, c, 16)

    def test_random_corners_vary_with_rng(self, bundle):
        fallback = _window_corners(bundle, 16)
        a = _random_corners(bundle, 16, np.random.default_rng(5), 12, fallback)
        b = _random_corners(bundle, 16, np.random.default_rng(6), 12, fallback)
        assert a != b


class TestSchedule:
    def test_warmup_values(self):
        cfg = OptimizerConfig()
        assert [lr_at(e, cfg) for e in range(1, 6)] == pytest.approx(
            [0.0002, 0.0004, 0.0006, 0.0008, 0.001])
        assert lr_at(150, cfg) == pytest.approx(0.001)

    def test_logged_lr_follows_schedule(self):
        cfg = tiny_cfg(optimizer={"epochs": 3})
        _, _, _, rows = train_run(cfg)
        for row in rows:
            assert row["lr"] == pytest.approx(lr_at(row["epoch"], cfg.optimizer))


class TestDeterminism:
    def test_repeated_runs_bit_identical(self, tmp_path):
        cfg = tiny_cfg()
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        _, _, _, rows_a = train_run(cfg, out_dir=str(out_a))
        _, _, _, rows_b = train_run(cfg, out_dir=str(out_b))
        assert rows_a == rows_b
        assert (out_a / "log.csv").read_bytes() == (out_b / "log.csv").read_bytes()
        assert (out_a / "checkpoint.ckpt").read_bytes() == \
            (out_b / "checkpoint.ckpt").read_bytes()

    def test_seed_changes_the_run(self):
        base = tiny_cfg()
        other = run_config_from_dict({
            "seed": 1,
            "data": {"schema": "benchmark", "size": [32, 32]},
            "split": {"tile": 4, "buffer": 1, "fractions": [0.7, 0.15, 0.15]},
            "train": {"patch": 16, "patches_per_epoch": 8, "val_every": 100,
                      "jitter": 0.2},
            "optimizer": {"batch_size": 4, "epochs": 2},
            "model": {"base_channels": 8},
        })
        _, _, _, rows_a = train_run(base)
        _, _, _, rows_b = train_run(other)
        assert rows_a != rows_b

    def test_checkpoint_round_trip(self, tmp_path):
        from hsmtl.checkpoint import load_checkpoint
        cfg = tiny_cfg()
        model, balancer, bundle, _ = train_run(cfg, out_dir=str(tmp_path))
        before = predict_scene(model, bundle)
        fresh = build_run_model(bundle, cfg.seed)
        load_checkpoint(tmp_path / "checkpoint.ckpt", fresh)
        after = predict_scene(fresh, bundle)
        for key in before:
            assert np.array_equal(before[key], after[key])


class TestLoop:
    def test_loss_decreases(self):
        cfg = tiny_cfg(train={"patches_per_epoch": 16},
                       optimizer={"epochs": 5, "base_lr": 0.005,
                                  "batch_size": 8})
        _, _, _, rows = train_run(cfg)
        assert rows[-1]["loss_total"] < rows[0]["loss_total"]

    def test_validation_cadence(self):
        cfg = tiny_cfg(train={"val_every": 2}, optimizer={"epochs": 5})
        _, _, bundle, rows = train_run(cfg)
        val_keys = [k for k in rows[-1] if k.startswith("val_")]
        cat = sum(t.kind == "categorical" for t in bundle.tasks)
        cont = sum(t.kind == "continuous" for t in bundle.tasks)
        for row in rows:
            present = [k for k in row if k.startswith("val_")]
            if row["epoch"] % 2 == 0:
                assert len(present) == cat + cont
            else:
                assert not present

    def test_gradnorm_weights_sum_to_task_count(self):
        cfg = tiny_cfg(losses={"mode": "gradnorm"})
        _, _, bundle, rows = train_run(cfg)
        n = len(bundle.tasks)
        for row in rows:
            total = sum(v for k, v in row.items() if k.startswith("w_"))
            assert total == pytest.approx(n, abs=1e-9)

    def test_uncertainty_logs_s_values(self):
        cfg = tiny_cfg()
        _, _, bundle, rows = train_run(cfg)
        for row in rows:
            assert sum(1 for k in row if k.startswith("s_")) == len(bundle.tasks)

    def test_nonfinite_loss_aborts_with_context(self, monkeypatch):
        def bad_total(maps, targets, defs, **kw):
            t = Tensor(np.array(float("inf")))
            return t, {d.name: t for d in defs}
        monkeypatch.setattr(tr, "total_loss", bad_total)
        with pytest.raises(FloatingPointError, match="epoch 1"):
            train_run(tiny_cfg())

    def test_freeze_encoder_keeps_trunk(self):
        cfg = tiny_cfg()
        model, _, bundle, _ = train_run(cfg, freeze_encoder=True)
        fresh = build_run_model(bundle, cfg.seed)
        ref = {n: t.data.copy() for _, n, t in fresh.component_params()}
        changed = []
        for comp, name, tensor in model.component_params():
            same = np.array_equal(tensor.data, ref[name])
            if comp == "encoder":
                assert same, f"frozen parameter {name} moved"
            elif not same:
                changed.append(name)
        assert changed


class TestEvalPurity:
    def test_predict_scene_leaves_model_untouched(self, bundle):
        model = build_run_model(bundle, 0)
        before = {n: t.data.copy() for n, t in model.named_params()}
        states = {n: (s.mean.copy(), s.var.copy()) for n, s in model.named_states()}
        preds_a = predict_scene(model, bundle)
        preds_b = predict_scene(model, bundle)
        for n, t in model.named_params():
            assert np.array_equal(t.data, before[n])
        for n, s in model.named_states():
            assert np.array_equal(s.mean, states[n][0])
            assert np.array_equal(s.var, states[n][1])
        for key in preds_a:
            assert np.array_equal(preds_a[key], preds_b[key])
