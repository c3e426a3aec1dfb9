"""Tests simlab.py features."""

import math

import numpy as np
import pandas as pd
import pytest
from scipy.stats import kstest

from hierfdr import simlab
from hierfdr.exceptions import ConfigError, DataError, StudyAbortedError
from hierfdr.hfdr import RejectionResult
from hierfdr.pipeline import AnalysisSettings, run_analysis
from hierfdr.simlab import (
    REPLICATE_COLUMNS,
    SimConfig,
    SurvivalModel,
    calibrate_censoring,
    config_from_mapping,
    default_truth,
    evaluate_replicate,
    generate_design,
    generate_survival,
    parse_sweep,
    replicate_rng,
    run_study,
    run_sweep,
)
from hierfdr.utils import OutputDirectory, read_json

FAST = AnalysisSettings(lambda_mode="fixed:1.0")


def small_config(**overrides) -> SimConfig:
    """Utility function giving a quick simulation setting.

    Args:
        overrides: fields to change.

    Returns:
        The config.
    """
    values = dict(n=120, d=8, q=5, s_alpha=2, replicates=3, seed=5)
    values.update(overrides)
    return SimConfig(**values)


def test_default_truth_pattern():
    config = small_config(d=10, s_alpha=3)
    truth = default_truth(config)
    index_map = config.index_map
    assert truth.support.size == 3 + 2 + 3 * 2
    assert truth.theta0[index_map.main_index(2)] == 2.0
    assert truth.theta0[index_map.main_index(3)] == 0.0
    assert truth.theta0[index_map.env_index(1)] == 2.0
    assert truth.theta0[index_map.env_index(4)] == 2.0
    assert truth.theta0[index_map.env_index(0)] == 0.0
    assert truth.theta0[index_map.interaction_index(0, 4)] == 1.0
    assert truth.theta0[index_map.interaction_index(0, 2)] == 0.0
    assert default_truth(small_config(global_null=True)).support.size == 0


def test_config_validation():
    with pytest.raises(ConfigError, match="q >= 5"):
        small_config(q=3)
    assert small_config(q=1, global_null=True).p == 8 + 9
    with pytest.raises(ConfigError) as info:
        small_config(eta=1.0, r=-0.1)
    assert "eta" in str(info.value) and "r must" in str(info.value)
    assert small_config(model="loglogistic").model is SurvivalModel.LOGLOGISTIC


def test_ar1_correlation():
    config = SimConfig(n=20000, d=3, q=1, eta=0.5, global_null=True, s_alpha=0)
    covariates, design = generate_design(config, np.random.default_rng(0))
    corr = np.corrcoef(covariates.x, rowvar=False)
    assert corr[0, 1] == pytest.approx(0.5, abs=0.03)
    assert corr[0, 2] == pytest.approx(0.25, abs=0.03)
    assert design.p == config.p


@pytest.mark.parametrize(
    "model, median", [("exponential", math.log(2.0)), ("loglogistic", 1.0)]
)
def test_event_time_models(model, median):
    config = SimConfig(
        n=20000, d=1, q=1, r=0.0, s_alpha=0, global_null=True, model=model
    )
    rng = np.random.default_rng(1)
    covariates, design = generate_design(config, rng)
    data = generate_survival(covariates, design, default_truth(config), config, rng)
    assert np.all(data.delta == 1)
    assert np.median(np.exp(data.y)) == pytest.approx(median, rel=0.05)


@pytest.mark.parametrize("model", ["exponential", "loglogistic"])
def test_censoring_calibration(model):
    config = small_config(n=4000, r=0.3, model=model)
    rng = np.random.default_rng(2)
    covariates, design = generate_design(config, rng)
    truth = default_truth(config)
    rate = calibrate_censoring(design, truth, config, rng)
    assert rate > 0
    data = generate_survival(covariates, design, truth, config, rng, rate)
    assert 1 - data.delta.mean() == pytest.approx(0.3, abs=0.04)


def test_no_censoring_rate():
    config = small_config(r=0.0)
    rng = np.random.default_rng(3)
    _, design = generate_design(config, rng)
    assert calibrate_censoring(design, default_truth(config), config, rng) == 0.0


def test_evaluate_replicate_counts():
    config = small_config(d=10, s_alpha=3)
    index_map = config.index_map
    truth = default_truth(config)
    rejection = RejectionResult(t0=1.0, a1=(0, 1, 7), a2={0: (4,), 1: (), 7: ()})
    estimate = truth.theta0 + 0.1
    metrics = evaluate_replicate(truth, rejection, estimate, index_map)
    # 3 true hits (X1, X2, X1:Z5) and one false main out of 4 selections.
    assert metrics.selected == 4
    assert metrics.false_discoveries == 1
    assert metrics.fdp == pytest.approx(0.25)
    assert metrics.power == pytest.approx(3 / 11)
    assert metrics.mse == pytest.approx(0.01)


def test_environment_selections_are_not_discoveries():
    config = small_config()
    index_map = config.index_map
    truth = default_truth(config)
    chosen = [index_map.env_index(0), index_map.env_index(1)]
    metrics = evaluate_replicate(truth, chosen, truth.theta0, index_map)
    assert metrics.selected == 0
    assert metrics.fdp == 0.0
    # Z2 is a true effect out of 2 + 2 + 4 nonzero coefficients.
    assert metrics.power == pytest.approx(1 / 8)


def test_power_covers_the_whole_support():
    config = small_config(d=10)
    index_map = config.index_map
    truth = default_truth(config)
    assert truth.support.size == 8
    exact = evaluate_replicate(truth, truth.support, truth.theta0, index_map)
    assert exact.fdp == 0.0
    assert exact.power == 1.0
    env = {index_map.env_index(k) for k in range(config.q)}
    tested = [c for c in truth.support if c not in env]
    metrics = evaluate_replicate(truth, tested, truth.theta0, index_map)
    assert metrics.true_discoveries == 6
    assert metrics.power == pytest.approx(0.75)
    false_main = evaluate_replicate(truth, [5], truth.theta0, index_map)
    assert (false_main.fdp, false_main.power) == (1.0, 0.0)


def test_global_null_power_is_zero():
    config = small_config(global_null=True)
    truth = default_truth(config)
    metrics = evaluate_replicate(truth, [0, 1], truth.theta0, config.index_map)
    assert metrics.power == 0.0
    assert metrics.fdp == 1.0


def test_replicate_streams():
    a = replicate_rng(1, 4).standard_normal(3)
    b = replicate_rng(1, 4).standard_normal(3)
    c = replicate_rng(1, 5).standard_normal(3)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_parse_sweep():
    assert parse_sweep("n=300, 500") == ("n", [300, 500])
    assert parse_sweep("eta=0.1,0.5") == ("eta", [0.1, 0.5])
    assert parse_sweep("model=loglogistic") == ("model", [SurvivalModel.LOGLOGISTIC])
    for bad in ("n", "seed=1,2", "n=abc", "n="):
        with pytest.raises(ConfigError):
            parse_sweep(bad)


def test_config_from_mapping_ignores_other_keys():
    config = config_from_mapping({"n": 150, "lambda": "cv", "methods": ["bh"]})
    assert config.n == 150


def test_run_study_writes_reports(tmp_path):
    methods = ["proposed", "bh", "vs_lasso"]
    with OutputDirectory(tmp_path) as out:
        report = run_study(small_config(), methods, out=out, settings=FAST)
    assert list(report.rows.columns) == REPLICATE_COLUMNS
    assert len(report.rows) == 3 * len(methods)
    assert report.failures == 0
    assert [row["method"] for row in report.aggregate] == methods
    for row in report.aggregate:
        assert 0 <= row["fdr"] <= 1
        assert row["replicates"] == 3
    rows = pd.read_csv(tmp_path / "replicates.csv")
    assert set(rows["status"]) == {"ok"}
    study = read_json(tmp_path / "study.json")
    assert study["sweep_field"] is None
    assert study["config"]["n"] == 120
    assert "mean_s" in read_json(tmp_path / "runtime.json")["rows"][0]
    proposed = report.rows[report.rows["method"] == "proposed"]
    assert np.all(proposed["bias_inf"] >= 0)
    assert report.rows.loc[report.rows["method"] == "bh", "bias_inf"].isna().all()


def test_study_is_reproducible_across_threads():
    first = run_study(small_config(), ["proposed"], settings=FAST, n_jobs=1)
    second = run_study(small_config(), ["proposed"], settings=FAST, n_jobs=2)
    columns = ["replicate", "fdp", "power", "mse", "t0", "R", "censoring"]
    pd.testing.assert_frame_equal(first.rows[columns], second.rows[columns])
    assert first.aggregate == second.aggregate


def test_study_without_runtime(tmp_path):
    with OutputDirectory(tmp_path) as out:
        report = run_study(
            small_config(replicates=1),
            ["vs_lasso"],
            out=out,
            settings=FAST,
            record_runtime=False,
        )
    assert report.runtime == {}
    assert not (tmp_path / "runtime.json").exists()
    assert report.rows["runtime_s"].eq(0).all()


def test_failed_replicates_abort_the_study(monkeypatch):
    def broken(*args, **kwargs):
        raise DataError("synthetic failure")

    monkeypatch.setattr(simlab, "run_analysis", broken)
    with pytest.raises(StudyAbortedError):
        run_study(small_config(), ["proposed"], settings=FAST)


def test_sweep_writes_one_file_per_value(tmp_path):
    with OutputDirectory(tmp_path) as out:
        reports = run_sweep(
            small_config(replicates=1),
            "n",
            [100, 130],
            methods=["proposed"],
            out=out,
            settings=FAST,
        )
    assert [r.config.n for r in reports] == [100, 130]
    assert (tmp_path / "replicates_n=100.csv").exists()
    assert (tmp_path / "replicates_n=130.csv").exists()
    study = read_json(tmp_path / "study.json")
    assert study["sweep_field"] == "n"
    assert "n" not in study["config"]
    assert [row["value"] for row in study["rows"]] == [100, 130]
    with pytest.raises(ConfigError):
        run_sweep(small_config(), "seed", [1, 2])


@pytest.mark.slow
def test_global_null_statistics_are_standard_normal():
    config = SimConfig(n=400, d=100, q=5, s_alpha=0, global_null=True, replicates=1)
    truth = default_truth(config)
    pooled = []
    for seed in range(20):
        rng = replicate_rng(seed, 0)
        covariates, design = generate_design(config, rng)
        data = generate_survival(covariates, design, truth, config, rng)
        stats = run_analysis(data, AnalysisSettings(seed=seed)).statistics
        pooled.append(stats.u[stats.valid])
    assert kstest(np.concatenate(pooled), "norm").statistic < 0.1


@pytest.mark.slow
def test_desk_profile_controls_fdr_with_power():
    config = SimConfig(seed=2)
    report = run_study(config, ["proposed"], n_jobs=4)
    proposed = report.aggregate[0]
    assert report.rows["status"].eq("ok").all()
    assert proposed["fdr"] <= config.alpha + 2 * proposed["fdr_mcse"]
    assert proposed["power"] >= 0.6
    assert proposed["censoring_rate"] == pytest.approx(config.r, abs=0.01)


@pytest.mark.slow
@pytest.mark.parametrize("alpha", [0.1, 0.2])
def test_loglogistic_errors_control_fdr(alpha):
    config = SimConfig(model="loglogistic", replicates=100, alpha=alpha, seed=3)
    report = run_study(config, ["proposed"], n_jobs=4)
    proposed = report.aggregate[0]
    assert report.rows["status"].eq("ok").all()
    assert proposed["fdr"] <= alpha + 2 * proposed["fdr_mcse"]
