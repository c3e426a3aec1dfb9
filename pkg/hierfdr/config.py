"""Settings schemas, profiles and validation."""

import copy
import json
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from jsonschema import Draft7Validator
from singer_sdk import typing as th

from hierfdr.exceptions import ConfigError
from hierfdr.pipeline import METHODS
from hierfdr.simlab import SimConfig, config_from_mapping

logger = logging.getLogger(__name__)

analysis_properties = th.PropertiesList(
    th.Property(
        "alpha",
        th.NumberType,
        default=0.1,
        required=False,
        description="Target FDR level in [0, 1). Zero rejects nothing.",
    ),
    th.Property(
        "lambda",
        th.StringType,
        default="cv",
        required=False,
        description="Lasso penalty rule: `cv` for cross-validation or "
        "`fixed:<c>` for c * sqrt(log p / n).",
    ),
    th.Property(
        "cv_folds",
        th.IntegerType,
        default=10,
        required=False,
        description="Number of cross-validation folds.",
    ),
    th.Property(
        "cv_grid_size",
        th.IntegerType,
        default=100,
        required=False,
        description="Number of penalty levels on the cross-validation path.",
    ),
    th.Property(
        "mu",
        th.NumberType,
        required=False,
        description="Explicit l_inf radius of the decorrelating programs. "
        "Overrides `mu_constant`.",
    ),
    th.Property(
        "mu_constant",
        th.NumberType,
        default=2.0,
        required=False,
        description="Constant c of the default radius mu = c * sqrt(log p / n).",
    ),
    th.Property(
        "c0",
        th.NumberType,
        default=0.45,
        required=False,
        description="Exponent of the design bound n^c0, in (1/4, 1/2).",
    ),
    th.Property(
        "tol",
        th.NumberType,
        default=1e-7,
        required=False,
        description="Tolerance of the penalized least-squares solver.",
    ),
    th.Property(
        "max_iter",
        th.IntegerType,
        default=100000,
        required=False,
        description="Sweep limit of the penalized least-squares solver.",
    ),
    th.Property(
        "qp_tol",
        th.NumberType,
        default=1e-6,
        required=False,
        description="Tolerance of the decorrelating programs.",
    ),
    th.Property(
        "mcp_xi",
        th.NumberType,
        default=3.0,
        required=False,
        description="MCP concavity parameter for the VS-MCP comparison.",
    ),
    th.Property(
        "bh_stage2",
        th.StringType,
        default="pooled",
        required=False,
        allowed_values=["pooled", "per_family"],
        description="How BH-Hierarchy tests interactions under rejected mains: "
        "one pooled BH, or one BH per main effect.",
    ),
    th.Property(
        "screen",
        th.NumberType,
        required=False,
        description="Keep only X columns whose KM-weighted |correlation| with "
        "the response reaches this value. Unset disables screening.",
    ),
    th.Property(
        "methods",
        th.ArrayType(th.StringType),
        required=False,
        description=f"Procedures to run. Any of: {', '.join(METHODS)}.",
    ),
    th.Property(
        "seed",
        th.IntegerType,
        required=False,
        description="Root seed. Drawn from entropy and recorded when unset.",
    ),
)

ANALYSIS_SETTINGS = analysis_properties.to_dict()

simulation_properties = th.PropertiesList(
    th.Property("n", th.IntegerType, default=400, description="Sample size."),
    th.Property(
        "d", th.IntegerType, default=100, description="Number of X covariates."
    ),
    th.Property("q", th.IntegerType, default=5, description="Number of Z covariates."),
    th.Property(
        "eta",
        th.NumberType,
        default=0.3,
        description="AR(1) correlation of the X columns.",
    ),
    th.Property(
        "a", th.NumberType, default=1.0, description="Signal magnitude."
    ),
    th.Property(
        "r", th.NumberType, default=0.2, description="Target censoring rate."
    ),
    th.Property(
        "s_alpha",
        th.IntegerType,
        default=5,
        description="Number of nonzero X main effects.",
    ),
    th.Property(
        "model",
        th.StringType,
        default="exponential",
        allowed_values=["exponential", "loglogistic"],
        description="Survival model of the event times.",
    ),
    th.Property(
        "replicates",
        th.IntegerType,
        default=200,
        description="Number of replicates per setting.",
    ),
    th.Property(
        "global_null",
        th.BooleanType,
        default=False,
        description="Simulate without any signal.",
    ),
    th.Property(
        "sweep",
        th.StringType,
        required=False,
        description="Vary one field over a list, e.g. `n=300,500`.",
    ),
    th.Property(
        "record_runtime",
        th.BooleanType,
        default=True,
        description="Record wall-clock seconds per method.",
    ),
)
for prop in analysis_properties.wrapped.values():
    simulation_properties.append(prop)

SIMULATION_SETTINGS = simulation_properties.to_dict()

COLUMN_SCHEMA = th.PropertiesList(
    th.Property(
        "time",
        th.StringType,
        required=True,
        description="Column holding the observed (event or censoring) time.",
    ),
    th.Property(
        "status",
        th.StringType,
        required=True,
        description="Column holding the event indicator, 1 event and 0 censored.",
    ),
    th.Property(
        "z",
        th.ArrayType(th.StringType),
        required=True,
        description="Low-dimensional covariate columns.",
    ),
    th.Property(
        "x",
        th.CustomType({"type": ["array", "string"], "items": {"type": "string"}}),
        required=True,
        description='High-dimensional covariate columns, or "*" for every other '
        "column.",
    ),
    th.Property(
        "time_scale",
        th.StringType,
        default="raw",
        required=False,
        allowed_values=["raw", "log"],
        description="`raw` times are log-transformed, `log` times are used as is.",
    ),
).to_dict()

PROFILES: Dict[str, Dict[str, Any]] = {
    "desk": {
        "n": 400,
        "d": 100,
        "q": 5,
        "s_alpha": 5,
        "eta": 0.3,
        "a": 1.0,
        "r": 0.2,
        "alpha": 0.1,
        "replicates": 200,
    },
    "full": {
        "n": 500,
        "d": 200,
        "q": 5,
        "s_alpha": 10,
        "eta": 0.3,
        "a": 1.0,
        "r": 0.2,
        "alpha": 0.1,
        "replicates": 200,
    },
}


def _strip_nulls(settings: Mapping[str, Any]) -> Dict[str, Any]:
    return {k: v for k, v in settings.items() if v is not None}


def validate_settings(settings: Mapping[str, Any], schema: dict) -> Dict[str, Any]:
    """Validate settings against a schema and fill in its defaults.

    Keys set to None count as unset.

    Args:
        settings: the settings.
        schema: one of the schemas of this module.

    Raises:
        ConfigError: listing every violation.

    Returns:
        A new dict with defaults filled in.

    """
    settings = _strip_nulls(settings)
    unknown = sorted(set(settings) - set(schema["properties"]))
    errors = [f"unknown setting {key!r}" for key in unknown]
    validator = Draft7Validator(schema)
    for error in sorted(validator.iter_errors(settings), key=lambda e: list(e.path)):
        where = ".".join(str(p) for p in error.path) or "<root>"
        errors.append(f"{where}: {error.message}")
    methods = settings.get("methods", [])
    bad = [m for m in methods if m not in METHODS] if isinstance(methods, list) else []
    errors.extend(f"methods: unknown method {m!r}" for m in bad)
    if errors:
        logger.error(f"Invalid settings: {errors}")
        raise ConfigError("Invalid settings:\n  " + "\n  ".join(errors))
    filled = copy.deepcopy(settings)
    for key, prop in schema["properties"].items():
        if key not in filled and prop.get("default") is not None:
            filled[key] = copy.deepcopy(prop["default"])
    return filled


def load_settings(path: Union[str, Path], schema: dict) -> Dict[str, Any]:
    """Read a JSON settings file and validate it.

    Raises:
        ConfigError: if the file is missing, not JSON, or invalid.

    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"Settings file {path} does not exist.") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Settings file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"Settings file {path} must hold a JSON object.")
    return validate_settings(raw, schema)


def merge_settings(*layers: Optional[Mapping[str, Any]]) -> Dict[str, Any]:
    """Merge settings layers; later layers win, None values never override."""
    merged: Dict[str, Any] = {}
    for layer in layers:
        if layer:
            merged.update(_strip_nulls(layer))
    return merged


def profile_settings(name: str) -> Dict[str, Any]:
    """Simulation settings of a named profile.

    Raises:
        ConfigError: for an unknown profile.

    """
    if name not in PROFILES:
        raise ConfigError(
            f"Unknown profile {name!r}; valid profiles: {', '.join(PROFILES)}"
        )
    if name == "full":
        logger.warning(
            "The full-scale profile (n=500, p=1205, 200 replicates) runs for "
            "many hours on a laptop"
        )
    return dict(PROFILES[name])


def sim_config_from_settings(settings: Mapping[str, Any]) -> SimConfig:
    """SimConfig from validated simulation settings.

    Raises:
        ConfigError: if the values are out of range.

    """
    return config_from_mapping(settings)
