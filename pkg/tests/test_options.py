from dataclasses import asdict

import pytest

from vidadapt.errors import ConfigError
from vidadapt.options import (
    CONFIG_FILENAME,
    RunConfig,
    dump_config,
    load_config_file,
    merge_options,
    parse_config_text,
    parse_set_flags,
    write_config_echo,
)


class TestMergeOptions:
    """Overlaying user options on the defaults."""

    def test_defaults_follow_published_settings(self):
        config = merge_options()
        assert config.lambda_sa == 1.0
        assert config.lambda_wd == 1.0
        assert config.lambda_u == 0.001
        assert config.lr0 == 1e-4
        assert config.momentum == 0.9
        assert config.weight_decay == 1e-4
        assert config.poly_power == 0.9

    def test_later_overrides_win(self):
        config = merge_options({"mode": "sa", "seed": 3}, {"mode": "jt"})
        assert config.mode == "jt"
        assert config.seed == 3

    def test_int_is_accepted_for_float_key(self):
        config = merge_options({"lambda_u": 0})
        assert config.lambda_u == 0.0
        assert isinstance(config.lambda_u, float)

    def test_unknown_key_is_named(self):
        with pytest.raises(ConfigError, match="lamda_u"):
            merge_options({"lamda_u": 0.1})

    def test_wrong_type_rejected(self):
        with pytest.raises(ConfigError, match="total_steps"):
            merge_options({"total_steps": "many"})

    def test_bool_not_accepted_as_int(self):
        with pytest.raises(ConfigError):
            merge_options({"seed": True})

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigError, match="mode"):
            merge_options({"mode": "adversarial"})

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError, match="lambda_wd"):
            merge_options({"lambda_wd": -1.0})

    def test_overlapping_seed_ranges_rejected(self):
        with pytest.raises(ConfigError, match="overlap"):
            merge_options({"source_seed": 0, "target_seed": 10, "num_source_clips": 20})

    def test_frame_gap_needs_enough_frames(self):
        with pytest.raises(ConfigError, match="num_frames"):
            merge_options({"num_frames": 4, "frame_gap": 2})


class TestConfigText:
    """Flat key = value files."""

    def test_dump_then_parse_is_lossless(self):
        config = merge_options({"mode": "itcr", "lambda_u": 0.0123, "share_branches": False})
        assert merge_options(parse_config_text(dump_config(config))) == config

    def test_every_key_is_written(self):
        text = dump_config(RunConfig())
        keys = {line.split(" = ")[0] for line in text.splitlines()}
        assert keys == set(asdict(RunConfig()))

    def test_tables_rejected(self):
        with pytest.raises(ConfigError, match="nested"):
            parse_config_text("[train]\nseed = 1\n")

    def test_syntax_error_names_source(self):
        with pytest.raises(ConfigError, match="my.toml"):
            parse_config_text("seed = = 1", "my.toml")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config_file(tmp_path / "absent.toml")

    def test_config_echo_reloads(self, tmp_path):
        config = merge_options({"mode": "ctcr", "output_dir": str(tmp_path)})
        path = write_config_echo(config, tmp_path)
        assert path.name == CONFIG_FILENAME
        assert merge_options(load_config_file(path)) == config


class TestSetFlags:
    """``--set key=value`` parsing."""

    def test_scalars_are_typed(self):
        flags = parse_set_flags(["seed=4", "lambda_u=0.5", "share_branches=false"])
        assert flags == {"seed": 4, "lambda_u": 0.5, "share_branches": False}

    def test_bare_words_stay_strings(self):
        assert parse_set_flags(["mode=davsn"]) == {"mode": "davsn"}

    def test_quoted_strings(self):
        assert parse_set_flags(['output_dir="runs/a b"']) == {"output_dir": "runs/a b"}

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError, match="key=value"):
            parse_set_flags(["seed"])

    def test_flags_override_file(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text('mode = "sa"\nseed = 2\n')
        config = merge_options(load_config_file(path), parse_set_flags(["mode=sta"]))
        assert config.mode == "sta"
        assert config.seed == 2
