import os

import pytest

import settings
from errors import CcmfbmError, DomainError, FactorizationError, GridMismatchError, NumericalError, TruncationError


def test_worker_count_reads_environment(monkeypatch):
    monkeypatch.setenv(settings.WORKERS_ENV, "3")
    assert settings.worker_count() == 3


@pytest.mark.parametrize("raw", ["many", "0", "-2"])
def test_worker_count_falls_back_on_bad_values(monkeypatch, raw, log_messages):
    monkeypatch.setenv(settings.WORKERS_ENV, raw)
    assert settings.worker_count() == (os.cpu_count() or 1)
    assert any(settings.WORKERS_ENV in m for m in log_messages)


def test_explicit_config_must_exist(tmp_path):
    with pytest.raises(DomainError):
        settings.resolve_config_path(tmp_path / "missing.toml")


def test_config_resolution_order(tmp_path, monkeypatch):
    local = tmp_path / "ccmfbm.toml"
    local.write_text("seed = 1\n")
    from_env = tmp_path / "env.toml"
    from_env.write_text("seed = 2\n")
    monkeypatch.setattr(settings, "CANDIDATE_CONFIG_PATHS", (local,))

    monkeypatch.delenv(settings.CONFIG_ENV, raising=False)
    assert settings.resolve_config_path() == local

    monkeypatch.setenv(settings.CONFIG_ENV, str(from_env))
    assert settings.resolve_config_path() == from_env
    assert settings.resolve_config_path(local) == local


def test_no_config_found(tmp_path, monkeypatch):
    monkeypatch.delenv(settings.CONFIG_ENV, raising=False)
    monkeypatch.setattr(settings, "CANDIDATE_CONFIG_PATHS", (tmp_path / "nothing.toml",))
    assert settings.resolve_config_path() is None
    assert settings.load_config(None) == {}


def test_load_config_tolerates_bom(tmp_path):
    path = tmp_path / "cfg.toml"
    path.write_text("\ufeffhurst = 0.8\n[simulate]\ngrid-n = 64\n", encoding="utf-8")
    assert settings.load_config(path) == {"hurst": 0.8, "simulate": {"grid-n": 64}}


def test_load_config_rejects_bad_toml(tmp_path):
    path = tmp_path / "cfg.toml"
    path.write_text("hurst = = 0.8\n")
    with pytest.raises(DomainError):
        settings.load_config(path)


def test_command_defaults_merge_shared_and_sections():
    config = {"hurst": 0.9, "grid-n": 128, "simulate": {"grid-n": 64, "paths": 10}}
    defaults = settings.command_defaults(config, ["simulate", "kernel"])
    assert defaults["simulate"] == {"hurst": 0.9, "grid_n": 64, "paths": 10}
    assert defaults["kernel"] == {"hurst": 0.9, "grid_n": 128}


def test_command_defaults_rejects_scalar_section():
    with pytest.raises(DomainError):
        settings.command_defaults({"simulate": 3}, ["simulate"])


def test_error_hierarchy_and_exit_codes():
    assert issubclass(GridMismatchError, DomainError)
    assert issubclass(DomainError, ValueError)
    assert issubclass(TruncationError, NumericalError)
    assert issubclass(FactorizationError, ArithmeticError)
    assert DomainError("x").exit_code == 3
    assert TruncationError("x").exit_code == 4
    assert isinstance(GridMismatchError("x"), CcmfbmError)
