"""Configuration parsing: defaults, overrides, and rejection of bad input."""

import pytest

from hsmtl.config import (ConfigError, RunConfig, benchmark_config,
                          load_config, run_config_from_dict)


class TestDefaults:
    def test_plain_construction(self):
        cfg = RunConfig()
        assert cfg.seed == 0
        assert cfg.model.flags == "RDAMC"
        assert cfg.losses.mode == "uncertainty"
        assert cfg.losses.categorical == "focal_with_weights"
        assert cfg.optimizer.base_lr == 0.001
        assert cfg.optimizer.beta1 == 0.7
        assert cfg.optimizer.weight_decay == 1e-4
        assert cfg.optimizer.warmup_epochs == 5

    def test_empty_dict_equals_defaults(self):
        assert run_config_from_dict({}) == RunConfig()

    def test_benchmark_config(self):
        cfg = benchmark_config()
        assert cfg.data.schema == "benchmark"
        assert cfg.data.size == (64, 64)
        assert cfg.data.bands == 8
        assert cfg.optimizer.epochs == 40
        assert cfg.split.tile == 4
        assert sum(cfg.split.fractions) == pytest.approx(1.0)


class TestSections:
    def test_override_nested(self):
        cfg = run_config_from_dict({"model": {"base_channels": 8, "flags": "R"}})
        assert cfg.model.base_channels == 8
        assert cfg.model.flags == "R"
        assert cfg.model.depth == RunConfig().model.depth

    def test_priors_sorted_tuple(self):
        cfg = run_config_from_dict(
            {"data": {"priors": {"b": [0.5, 0.5], "a": [0.2, 0.8]}}})
        assert cfg.data.priors[0][0] == "a"
        assert tuple(cfg.data.priors[1][1]) == (0.5, 0.5)

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="unknown top-level"):
            run_config_from_dict({"trainer": {}})

    def test_unknown_section_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            run_config_from_dict({"model": {"channels": 8}})

    def test_section_must_be_table(self):
        with pytest.raises(ConfigError, match="section"):
            run_config_from_dict({"model": 3})


class TestValidation:
    def test_bad_flags(self):
        with pytest.raises(ConfigError):
            run_config_from_dict({"model": {"flags": "RX"}})
        with pytest.raises(ConfigError):
            run_config_from_dict({"model": {"flags": "RR"}})

    def test_bad_loss_names(self):
        with pytest.raises(ConfigError):
            run_config_from_dict({"losses": {"mode": "equalish"}})
        with pytest.raises(ConfigError):
            run_config_from_dict({"losses": {"categorical": "hinge"}})

    def test_bad_train_values(self):
        with pytest.raises(ConfigError):
            run_config_from_dict({"train": {"patch": 2}})
        with pytest.raises(ConfigError):
            run_config_from_dict({"train": {"jitter": -0.1}})
        with pytest.raises(ConfigError):
            run_config_from_dict({"train": {"val_every": 0}})


class TestFile:
    def test_toml_round_trip(self, tmp_path):
        p = tmp_path / "run.toml"
        p.write_text(
            'seed = 3\nout_dir = "x"\n'
            "[model]\nbase_channels = 8\n"
            "[optimizer]\nepochs = 2\n"
            "[split]\ntile = 8\n")
        cfg = load_config(p)
        assert cfg.seed == 3
        assert cfg.out_dir == "x"
        assert cfg.model.base_channels == 8
        assert cfg.optimizer.epochs == 2
        assert cfg.split.tile == 8

    def test_parse_error(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("seed = = 3\n")
        with pytest.raises(ConfigError, match="cannot parse"):
            load_config(p)

    def test_unknown_key_in_file(self, tmp_path):
        p = tmp_path / "typo.toml"
        p.write_text("[optimizer]\nlerning_rate = 0.1\n")
        with pytest.raises(ConfigError):
            load_config(p)
