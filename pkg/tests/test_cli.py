"""Tests cli.py features."""

import json

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from hierfdr.cli import cli, read_manifest
from hierfdr.utils import read_json
from tests.test_pipeline import simulated_dataset

FAST = ["--lambda", "fixed:1.0", "--threads", "1"]


@pytest.fixture(scope="module")
def data_csv(tmp_path_factory):
    data = simulated_dataset(n=150, d=6, s_alpha=2)
    frame = pd.DataFrame(data.x, columns=list(data.x_names))
    for k, name in enumerate(data.z_names):
        frame[name] = data.z[:, k]
    frame["time"] = np.exp(data.y)
    frame["status"] = data.delta.astype(int)
    path = tmp_path_factory.mktemp("data") / "survival.csv"
    frame.to_csv(path, index=False)
    return path


def column_flags():
    """Utility function naming the columns of the test file."""
    z = ",".join(f"Z{k}" for k in range(1, 6))
    return ["--time", "time", "--status", "status", "--z", z, "--x", "*"]


def test_analyze_writes_reports(data_csv, tmp_path):
    out = tmp_path / "out"
    args = ["analyze", str(data_csv), *column_flags(), *FAST, "--seed", "3"]
    result = CliRunner().invoke(
        cli, [*args, "--methods", "bh,vs_lasso", "--dump-matrices", "--out", str(out)]
    )
    assert result.exit_code == 0, result.output
    assert "rejected; results in" in result.output
    report = read_json(out / "rejections.json")
    for key in ("R", "t0", "main_effects", "interactions", "env_estimates"):
        assert key in report
    assert (report["n"], report["d"], report["q"], report["p"]) == (150, 6, 5, 41)
    assert len(report["env_estimates"]) == 5
    table = pd.read_csv(out / "coefficients.csv")
    assert len(table) == 41
    summary = pd.read_csv(out / "methods_summary.csv")
    assert list(summary["method"]) == ["proposed", "bh", "vs_lasso"]
    manifest = read_manifest(str(out))
    assert manifest.command == "analyze"
    assert manifest.seed == 3
    assert manifest.outputs == [
        "coefficients.csv",
        "matrices.bin",
        "methods_summary.csv",
        "rejections.json",
    ]
    assert str(data_csv) in manifest.inputs
    assert manifest.finished is not None


def test_analyze_with_schema_file(data_csv, tmp_path):
    schema = tmp_path / "schema.json"
    schema.write_text(
        json.dumps(
            {
                "time": "time",
                "status": "status",
                "z": ["Z1", "Z2", "Z3", "Z4", "Z5"],
                "x": ["X1", "X2", "X3"],
            }
        )
    )
    out = tmp_path / "out"
    result = CliRunner().invoke(
        cli,
        ["analyze", str(data_csv), "--schema", str(schema), *FAST, "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    report = read_json(out / "rejections.json")
    assert report["d"] == 3
    assert isinstance(read_manifest(str(out)).seed, int)


def test_settings_errors_exit_with_usage_code(data_csv, tmp_path):
    out = tmp_path / "out"
    runner = CliRunner()
    base = ["analyze", str(data_csv), *column_flags(), *FAST, "--out", str(out)]
    result = runner.invoke(cli, [*base, "--alpha", "1.5"])
    assert result.exit_code == 2
    assert "Error:" in result.output
    assert not (out / "rejections.json").exists()
    result = runner.invoke(cli, [*base, "--methods", "knockoff"])
    assert result.exit_code == 2
    result = runner.invoke(
        cli, ["analyze", str(data_csv), "--time", "time", *FAST, "--out", str(out)]
    )
    assert result.exit_code == 2


def test_data_errors_exit_with_failure_code(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("time,status,Z1,X1\n1.0,1,0.5,0.1\n2.0,3,0.2,0.3\n")
    out = tmp_path / "out"
    result = CliRunner().invoke(
        cli,
        [
            "analyze",
            str(bad),
            *["--time", "time", "--status", "status", "--z", "Z1", "--x", "X1"],
            *FAST,
            "--out",
            str(out),
        ],
    )
    assert result.exit_code == 1
    assert "not 0 or 1" in result.output
    assert not out.exists() or not any(out.iterdir())


@pytest.mark.parametrize(
    "what, filename", [("weights", "weights.csv"), ("gram-diag", "gram_diag.csv")]
)
def test_inspect(data_csv, tmp_path, what, filename):
    out = tmp_path / "out"
    result = CliRunner().invoke(
        cli,
        ["inspect", str(data_csv), *column_flags(), "--what", what, "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    assert f"Wrote {what}" in result.output
    table = pd.read_csv(out / filename)
    if what == "weights":
        assert len(table) == 150
        assert np.all(np.diff(table["y"]) >= 0)
        assert table["weight"].sum() <= 1 + 1e-9
    else:
        assert len(table) == 41
        assert table["label"].iloc[-1] == "X6:Z5"
    assert read_manifest(str(out)).command == f"inspect {what}"


def test_inspect_ustats(data_csv, tmp_path):
    out = tmp_path / "out"
    args = ["inspect", str(data_csv), *column_flags(), *FAST, "--seed", "1"]
    result = CliRunner().invoke(cli, [*args, "--what", "ustats", "--out", str(out)])
    assert result.exit_code == 0, result.output
    table = pd.read_csv(out / "ustats.csv")
    assert "lambda_diag" in table.columns
    assert len(table) == 41


def test_simulate(tmp_path):
    config = tmp_path / "small.json"
    config.write_text(json.dumps({"n": 120, "d": 8, "s_alpha": 2}))
    out = tmp_path / "out"
    result = CliRunner().invoke(
        cli,
        [
            "simulate",
            "--config",
            str(config),
            "--replicates",
            "2",
            "--methods",
            "proposed,bh",
            "--seed",
            "4",
            *FAST,
            "--out",
            str(out),
        ],
    )
    assert result.exit_code == 0, result.output
    assert "proposed: FDR=" in result.output
    assert "(2 replicates)" in result.output
    rows = pd.read_csv(out / "replicates.csv")
    assert len(rows) == 4
    manifest = read_manifest(str(out))
    assert manifest.config["n"] == 120
    assert manifest.config["replicates"] == 2
    assert "runtime.json" in manifest.outputs
    assert str(config) in manifest.inputs


def test_simulate_sweep_without_runtime(tmp_path):
    config = tmp_path / "small.json"
    config.write_text(json.dumps({"d": 8, "s_alpha": 2, "replicates": 1}))
    out = tmp_path / "out"
    result = CliRunner().invoke(
        cli,
        [
            "simulate",
            "--config",
            str(config),
            "--sweep",
            "n=100,120",
            "--methods",
            "vs_lasso",
            "--no-runtime",
            *FAST,
            "--out",
            str(out),
        ],
    )
    assert result.exit_code == 0, result.output
    assert (out / "replicates_n=100.csv").exists()
    assert (out / "replicates_n=120.csv").exists()
    assert not (out / "runtime.json").exists()


def test_simulate_rejects_unknown_settings(tmp_path):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"samples": 10}))
    result = CliRunner().invoke(cli, ["simulate", "--config", str(config)])
    assert result.exit_code == 2
    assert "unknown setting 'samples'" in result.output
