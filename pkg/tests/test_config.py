"""Tests config.py features."""

import json
from pathlib import Path

import pytest

from hierfdr.config import (
    ANALYSIS_SETTINGS,
    COLUMN_SCHEMA,
    PROFILES,
    SIMULATION_SETTINGS,
    load_settings,
    merge_settings,
    profile_settings,
    sim_config_from_settings,
    validate_settings,
)
from hierfdr.exceptions import ConfigError

SAMPLE_CONFIG = Path(__file__).parent.parent / "config.sample.json"


def test_defaults_are_filled():
    settings = validate_settings({"alpha": 0.05}, ANALYSIS_SETTINGS)
    assert settings["alpha"] == 0.05
    assert settings["lambda"] == "cv"
    assert settings["cv_folds"] == 10
    assert settings["bh_stage2"] == "pooled"
    assert "seed" not in settings
    assert "mu" not in settings


def test_none_counts_as_unset():
    settings = validate_settings({"alpha": None, "seed": None}, ANALYSIS_SETTINGS)
    assert settings["alpha"] == 0.1
    assert "seed" not in settings


def test_every_violation_is_reported():
    with pytest.raises(ConfigError) as info:
        validate_settings(
            {"alpha": "high", "colour": "red", "methods": ["bh", "knockoff"]},
            ANALYSIS_SETTINGS,
        )
    message = str(info.value)
    assert "unknown setting 'colour'" in message
    assert "alpha" in message
    assert "unknown method 'knockoff'" in message


def test_allowed_values_are_enforced():
    with pytest.raises(ConfigError, match="bh_stage2"):
        validate_settings({"bh_stage2": "grouped"}, ANALYSIS_SETTINGS)
    with pytest.raises(ConfigError, match="model"):
        validate_settings({"model": "weibull"}, SIMULATION_SETTINGS)


def test_simulation_settings_include_analysis_keys():
    for key in ANALYSIS_SETTINGS["properties"]:
        assert key in SIMULATION_SETTINGS["properties"]
    settings = validate_settings({"n": 150, "lambda": "fixed:1"}, SIMULATION_SETTINGS)
    assert settings["d"] == 100
    assert settings["record_runtime"] is True


def test_sample_config_is_valid():
    settings = load_settings(SAMPLE_CONFIG, SIMULATION_SETTINGS)
    config = sim_config_from_settings(settings)
    assert config.p == 100 + 5 + 100 * 5
    assert config.replicates == 200


def test_load_settings_errors(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        load_settings(tmp_path / "missing.json", ANALYSIS_SETTINGS)
    broken = tmp_path / "broken.json"
    broken.write_text("{alpha: 0.1")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_settings(broken, ANALYSIS_SETTINGS)
    listing = tmp_path / "list.json"
    listing.write_text(json.dumps([1, 2]))
    with pytest.raises(ConfigError, match="JSON object"):
        load_settings(listing, ANALYSIS_SETTINGS)


def test_merge_settings_layers():
    merged = merge_settings(
        {"alpha": 0.1, "seed": 1}, None, {"alpha": 0.2, "seed": None}
    )
    assert merged == {"alpha": 0.2, "seed": 1}


def test_profiles():
    desk = profile_settings("desk")
    assert desk["n"] == 400 and desk["d"] == 100
    desk["n"] = 1
    assert PROFILES["desk"]["n"] == 400
    assert profile_settings("full")["d"] == 200
    with pytest.raises(ConfigError, match="valid profiles"):
        profile_settings("huge")


def test_column_schema():
    schema = validate_settings(
        {"time": "t", "status": "s", "z": ["a"], "x": "*"}, COLUMN_SCHEMA
    )
    assert schema["time_scale"] == "raw"
    validate_settings(
        {"time": "t", "status": "s", "z": ["a"], "x": ["b", "c"]}, COLUMN_SCHEMA
    )
    with pytest.raises(ConfigError, match="status"):
        validate_settings({"time": "t", "z": ["a"], "x": "*"}, COLUMN_SCHEMA)
