"""
Tests for settings, profiles and key=value run configuration.
"""

import pytest

from src import config
from src.config import (
    PROFILES,
    Settings,
    build_run_config,
    load_run_config,
    parse_key_values,
)
from src.errors import ConfigError


@pytest.fixture(autouse=True)
def fresh_settings(monkeypatch):
    monkeypatch.setattr(config, "settings", None)
    for var in ("SCSN_PROFILE", "SCSN_LOG_LEVEL", "SCSN_AUDIT_WORKERS"):
        monkeypatch.delenv(var, raising=False)


class TestParseKeyValues:
    """Test cases for the key=value parser."""

    def test_comments_and_blank_lines(self):
        text = "# run\n\ncr = 16   # compression\nt_steps=4\n"
        assert parse_key_values(text) == {"cr": "16", "t_steps": "4"}

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="Line 2"):
            parse_key_values("cr = 8\nt_steps 4\n")

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key 'n_carriers'"):
            parse_key_values("n_carriers = 1024")

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_key_values("cr = 8\ncr = 16")

    def test_empty_value(self):
        with pytest.raises(ConfigError):
            parse_key_values("cr =")


class TestBuildRunConfig:
    """Test cases for profile layering and validation."""

    def test_desk_profile(self):
        run = build_run_config({}, profile="desk")
        assert run.system.cr == 16 and run.system.t_steps == 4
        assert run.model.hidden_width == 1024
        assert run.train.epochs == 150
        assert run.data.sample_count == 4000

    def test_paper_profile(self):
        run = build_run_config({}, profile="paper")
        assert (run.system.n_t, run.system.n_c, run.system.n_s) == (32, 1024, 32)
        assert run.system.cr == 8 and run.system.t_steps == 6
        assert run.system.codeword_width * run.system.t_steps == 1536
        assert run.model.hidden_width == 4096

    def test_values_override_profile(self):
        run = build_run_config({"cr": "32", "progressive": "false", "tau": "4.0"}, profile="desk")
        assert run.system.cr == 32
        assert run.model.progressive is False
        assert run.model.lif.tau == 4.0

    def test_seed_override_wins(self):
        assert build_run_config({"seed": "1"}, profile="desk", seed=99).train.seed == 99

    def test_defaults_are_logged(self, caplog):
        with caplog.at_level("INFO", logger="src.config"):
            build_run_config({"cr": "16"}, profile="desk")
        assert "key t_steps not set" in caplog.text
        assert "key cr not set" not in caplog.text

    def test_invalid_value_becomes_config_error(self):
        with pytest.raises(ConfigError) as info:
            build_run_config({"n_s": "64"}, profile="desk")
        assert info.value.exit_code == 2

    def test_non_dividing_cr(self):
        with pytest.raises(ConfigError):
            build_run_config({"cr": "3"}, profile="desk")

    def test_unknown_profile(self):
        with pytest.raises(ConfigError):
            build_run_config({}, profile="lab")

    def test_profile_from_environment(self, monkeypatch):
        monkeypatch.setenv("SCSN_PROFILE", "paper")
        assert build_run_config({}).profile == "paper"

    def test_every_profile_key_is_known(self):
        for values in PROFILES.values():
            assert set(values) == set(config.KNOWN_KEYS) - {"profile"}


class TestLoadRunConfig:
    """Test cases for reading config files."""

    def test_file_profile_and_cli_override(self, tmp_path):
        path = tmp_path / "run.conf"
        path.write_text("profile = paper\nepochs = 5\n")
        assert load_run_config(path).profile == "paper"
        run = load_run_config(path, profile="desk")
        assert run.profile == "desk" and run.train.epochs == 5

    def test_written_config_reloads_identically(self, tmp_path):
        run = build_run_config({"cr": "32", "seed": "3"}, profile="desk")
        path = tmp_path / "resolved.conf"
        path.write_text(run.to_key_values())
        assert load_run_config(path) == run

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "absent.conf")


class TestSettings:
    """Test cases for environment settings."""

    def test_defaults(self):
        settings = Settings()
        assert settings.log_level == "INFO"
        assert settings.audit_workers == 1

    def test_environment(self, monkeypatch):
        monkeypatch.setenv("SCSN_AUDIT_WORKERS", "4")
        monkeypatch.setenv("SCSN_LOG_LEVEL", "DEBUG")
        settings = Settings()
        assert settings.audit_workers == 4 and settings.log_level == "DEBUG"

    def test_bad_profile(self, monkeypatch):
        monkeypatch.setenv("SCSN_PROFILE", "lab")
        with pytest.raises(ValueError):
            Settings()

    def test_global_instance_is_cached(self):
        assert config.get_app_settings() is config.get_app_settings()
