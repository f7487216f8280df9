import io
import json
import sys

import pandas as pd
import pytest
from click.testing import CliRunner
from loguru import logger

import cli
from settings import __version__

MODEL = ["--a", "1", "--b", "3", "--hurst", "0.75"]


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


@pytest.fixture(autouse=True)
def restore_logging():
    yield
    # the CLI rebinds loguru to the runner's captured stderr
    logger.remove()
    logger.add(sys.stderr, level="WARNING")


def invoke(runner, args):
    return runner.invoke(cli.main, args, catch_exceptions=False)


def test_simulate_is_byte_identical_on_rerun(runner, tmp_path):
    args = ["simulate", *MODEL, "--grid-n", "50", "--horizon", "1", "--paths", "1", "--seed", "7"]
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    assert invoke(runner, [*args, "--output", str(first)]).exit_code == 0
    assert invoke(runner, [*args, "--output", str(second)]).exit_code == 0
    assert first.read_bytes() == second.read_bytes()
    frame = pd.read_csv(first)
    assert list(frame.columns) == ["path_id", "t", "x", "w", "bh"]
    assert len(frame) == 51
    assert b"\r\n" not in first.read_bytes()


def test_simulate_json_carries_run_config(runner):
    result = invoke(runner, ["simulate", *MODEL, "--grid-n", "8", "--format", "json", "--scheme", "mg_approx"])
    document = json.loads(result.output)
    assert document["meta"]["version"] == __version__
    assert document["meta"]["scheme"] == "mg_approx"
    assert document["meta"]["grid_n"] == 8
    assert len(document["data"]) == 9


def test_observation_drift_leaves_components_empty(runner):
    result = invoke(runner, ["simulate", *MODEL, "--grid-n", "8", "--drift", "1", "--drift-model", "observation",
                             "--format", "json"])
    record = json.loads(result.output)["data"][3]
    assert record["w"] is None and record["bh"] is None


def test_validation_error_exits_with_3(runner):
    result = runner.invoke(cli.main, ["simulate", "--hurst", "0.4", "--grid-n", "8"])
    assert result.exit_code == 3
    assert "DomainError" in result.output


def test_usage_error_exits_with_2(runner):
    assert runner.invoke(cli.main, ["simulate", "--scheme", "euler"]).exit_code == 2
    assert runner.invoke(cli.main, ["bogus"]).exit_code == 2


def test_numerical_failure_exits_with_4(runner):
    result = runner.invoke(cli.main, ["kernel", "--hurst", "0.6", "--b", "3", "--curve", "l-inverse",
                                      "--max-terms", "2", "--grid-n", "10"])
    assert result.exit_code == 4
    assert "TruncationError" in result.output


def test_kernel_l_inverse_curve(runner):
    result = invoke(runner, ["kernel", "--hurst", "0.75", "--t", "1", "--curve", "l-inverse", "--grid-n", "20"])
    frame = pd.read_csv(io.StringIO(result.output))
    assert list(frame.columns) == ["s", "value"]
    assert len(frame) == 20
    assert frame["s"].iloc[-1] == pytest.approx(1.0)


def test_kernel_gamma_columns(runner):
    result = invoke(runner, ["kernel", "--curve", "gamma", "--k", "1", "--k", "10", "--grid-n", "10"])
    header = result.output.splitlines()[0]
    assert header == "s,gamma_1,gamma_10"


def test_cov_kinds(runner):
    table = invoke(runner, ["cov", "--grid-n", "4"])
    assert len(table.output.splitlines()) == 1 + 16
    increment = invoke(runner, ["cov", "--kind", "increment", "--t0", "1", "--delta", "0.05", "--t", "16"])
    assert increment.output.splitlines()[0] == "t0,delta,t,cov,asymptote"
    holder = invoke(runner, ["cov", "--kind", "holder", "--t0", "0.5"])
    assert len(holder.output.splitlines()) == 4


def test_invert_recovers_paths_from_file(runner, tmp_path):
    paths = tmp_path / "paths.csv"
    invoke(runner, ["simulate", *MODEL, "--grid-n", "16", "--paths", "2", "--scheme", "mg_approx",
                    "--output", str(paths)])
    out = tmp_path / "w.csv"
    invoke(runner, ["invert", *MODEL, "--input", str(paths), "--method", "triangular", "--output", str(out)])
    simulated = pd.read_csv(paths)
    recovered = pd.read_csv(out)
    # only the refitted first column separates the recovery from the driving noise
    shifts = []
    for path_id in (0, 1):
        sim = simulated[simulated["path_id"] == path_id]
        rec = recovered[recovered["path_id"] == path_id]
        shifts.append((rec["w"].to_numpy() - sim["w"].to_numpy()) / sim["x"].iloc[1])
    assert abs(shifts[0] - shifts[1]).max() < 1e-7


def test_invert_writes_operator_with_residual(runner):
    result = invoke(runner, ["invert", "--grid-n", "8", "--format", "json"])
    document = json.loads(result.output)
    meta = document["meta"]
    assert meta["identity_residual"] >= 0.0
    assert 0.0 < meta["kstar_norm_squared"] <= meta["kstar_norm_bound"]
    assert len(document["data"]) == 36


@pytest.mark.parametrize("args", [
    ["kernel", "--curve", "bound", "--a", "0"],
    ["kernel", "--curve", "l", "--b", "0"],
    ["cov", "--kind", "increment", "--a", "0"],
])
def test_degenerate_mixtures_exit_with_3(runner, args):
    result = runner.invoke(cli.main, [*args, "--grid-n", "8"])
    assert result.exit_code == 3
    assert "DomainError" in result.output


def test_estimate_drift_reports_inverse_kernel_mass(runner):
    result = runner.invoke(cli.main, ["estimate-drift", "--grid-n", "32", "--paths", "3", "--drift", "1"])
    assert result.exit_code == 0
    assert "L^-1" in result.output
    lines = [line for line in result.output.splitlines() if line.startswith(("path_id", "0", "1", "2"))]
    assert lines[0] == "path_id,theta_hat,log_likelihood"


def test_predict_writes_mean_and_cov_files(runner, tmp_path):
    out = tmp_path / "pred.csv"
    invoke(runner, ["predict", "--grid-n", "32", "--u", "0.5", "--targets", "0.75", "--targets", "1",
                    "--output", str(out)])
    mean = pd.read_csv(out)
    cov = pd.read_csv(tmp_path / "pred_cov.csv")
    assert list(mean.columns) == ["t", "mean"] and len(mean) == 2
    assert list(cov.columns) == ["t", "s", "cov"] and len(cov) == 4


def test_config_file_supplies_defaults(runner, tmp_path):
    config = tmp_path / "ccmfbm.toml"
    config.write_text('hurst = 0.8\nformat = "json"\n[simulate]\ngrid-n = 6\n')
    result = invoke(runner, ["--config", str(config), "simulate"])
    document = json.loads(result.output)
    assert document["meta"]["hurst"] == 0.8
    assert len(document["data"]) == 7
    explicit = invoke(runner, ["--config", str(config), "simulate", "--grid-n", "4"])
    assert len(json.loads(explicit.output)["data"]) == 5


def test_missing_config_file_is_a_validation_error(runner, tmp_path):
    assert runner.invoke(cli.main, ["--config", str(tmp_path / "none.toml"), "simulate"]).exit_code == 3


def test_verify_passes_on_resolvent_check(runner):
    result = invoke(runner, ["verify", "--level", "quick", "--only", "11"])
    assert result.exit_code == 0
    assert "resolvent" in result.output


def test_verify_exits_1_on_failure(runner, monkeypatch):
    failed = pd.DataFrame([{"criterion": 1, "check": "x", "value": 1.0, "threshold": "", "passed": False,
                            "seconds": 0.0, "detail": ""}])
    monkeypatch.setattr(cli, "run_suite", lambda level, only: failed)
    assert runner.invoke(cli.main, ["verify"]).exit_code == 1


@pytest.mark.slow
def test_demo_writes_all_files(runner, tmp_path):
    result = invoke(runner, ["demo", "--output-dir", str(tmp_path), "--grid-n", "40"])
    assert result.exit_code == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert {"paths_a0.4_b1.4_H0.6.csv", "paths_a1_b3_H0.75.csv", "paths_a4_b9_H0.9.csv",
            "gamma_k.csv", "kernel_l.csv", "kernel_l_inverse.csv"} <= names
