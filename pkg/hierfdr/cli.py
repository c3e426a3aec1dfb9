"""Command-line interface: analyze, simulate and inspect."""

import functools
import logging
import os
import platform
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from enum import IntEnum
from importlib import metadata
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import click
import numpy as np
import pandas as pd

from hierfdr.config import (
    ANALYSIS_SETTINGS,
    COLUMN_SCHEMA,
    SIMULATION_SETTINGS,
    load_settings,
    merge_settings,
    profile_settings,
    sim_config_from_settings,
    validate_settings,
)
from hierfdr.dataset import ColumnSchema, load_csv
from hierfdr.debias import dump_matrices
from hierfdr.exceptions import ConfigError, HierFdrError
from hierfdr.pipeline import (
    METHODS,
    PROPOSED,
    AnalysisSettings,
    check_methods,
    coefficient_table,
    env_estimates,
    methods_summary,
    prepare,
    run_analysis,
    run_methods,
)
from hierfdr.simlab import parse_sweep, run_study, run_sweep
from hierfdr.utils import OutputDirectory, file_digest, read_json

logger = logging.getLogger(__name__)

LOG_ENV = "HIERFDR_LOG"
MANIFEST = "manifest.json"
TRACKED_PACKAGES = ("hierfdr", "numpy", "scipy", "pandas", "numba", "scikit-learn")


class ExitCode(IntEnum):
    OK = 0
    FAILURE = 1
    USAGE = 2


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _versions() -> Dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


@dataclass
class RunManifest:
    """Provenance of one command run, written as ``manifest.json``."""

    command: str
    config: Dict[str, Any]
    seed: int
    versions: Dict[str, str] = field(default_factory=_versions)
    started: str = field(default_factory=_now)
    finished: Optional[str] = None
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: Dict[str, Any]) -> "RunManifest":
        return cls(**obj)

    def write(self, out: OutputDirectory) -> None:
        self.outputs = sorted(p.name for p in out.written if p.name != MANIFEST)
        self.finished = _now()
        out.write_json(MANIFEST, self.to_dict())


def configure_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def fresh_seed() -> int:
    """A seed drawn from OS entropy, small enough for every consumer."""
    return int(np.random.SeedSequence().generate_state(1)[0])


def handle_errors(fn: Callable) -> Callable:
    """Map package errors to exit codes: settings problems 2, the rest 1."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"Error: {exc}", err=True)
            sys.exit(ExitCode.USAGE)
        except HierFdrError as exc:
            click.echo(f"Error: {exc}", err=True)
            sys.exit(ExitCode.FAILURE)

    return wrapper


def _split(text: Optional[str]) -> Optional[List[str]]:
    if text is None:
        return None
    return [t.strip() for t in text.split(",") if t.strip()]


def data_options(fn: Callable) -> Callable:
    """Input file options shared by ``analyze`` and ``inspect``."""
    options = [
        click.argument("data_csv", type=click.Path(exists=True, dir_okay=False)),
        click.option(
            "--schema",
            "schema_path",
            type=click.Path(exists=True, dir_okay=False),
            help="JSON file naming the time, status, z and x columns.",
        ),
        click.option("--time", "time_col", help="Time column (without --schema)."),
        click.option("--status", "status_col", help="Event indicator column."),
        click.option("--z", "z_cols", help="Comma-separated Z columns."),
        click.option("--x", "x_cols", help='Comma-separated X columns, or "*".'),
        click.option(
            "--time-scale",
            type=click.Choice(["raw", "log"]),
            default=None,
            help="raw times are log-transformed.",
        ),
        click.option("--delimiter", default=",", show_default=True),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def tuning_options(fn: Callable) -> Callable:
    """Estimation options shared by every command."""
    options = [
        click.option(
            "--config",
            "config_path",
            type=click.Path(exists=True, dir_okay=False),
            help="JSON settings file; flags override it.",
        ),
        click.option("--alpha", type=float, help="Target FDR level."),
        click.option(
            "--seed", type=int, help="Root seed (drawn and recorded if unset)."
        ),
        click.option(
            "--threads", type=int, help="Worker threads (default: all cores)."
        ),
        click.option("--lambda", "lambda_mode", help="cv or fixed:<c>."),
        click.option("--mu", "mu_constant", type=float, help="Constant c of mu."),
        click.option("--c0", type=float, help="Design-bound exponent."),
        click.option(
            "--out",
            type=click.Path(file_okay=False),
            default="hierfdr-out",
            show_default=True,
            help="Output directory.",
        ),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def column_schema(
    schema_path: Optional[str],
    time_col: Optional[str],
    status_col: Optional[str],
    z_cols: Optional[str],
    x_cols: Optional[str],
    time_scale: Optional[str],
) -> ColumnSchema:
    """Column roles from a schema file, or from flags when no file is given.

    Raises:
        ConfigError: if the schema is invalid or flags are missing.

    """
    if schema_path is not None:
        raw = load_settings(schema_path, COLUMN_SCHEMA)
        if time_scale is not None:
            raw["time_scale"] = time_scale
        return ColumnSchema.from_dict(raw)
    x = x_cols if x_cols == "*" else _split(x_cols)
    raw = merge_settings(
        {
            "time": time_col,
            "status": status_col,
            "z": _split(z_cols),
            "x": x,
            "time_scale": time_scale,
        }
    )
    return ColumnSchema.from_dict(validate_settings(raw, COLUMN_SCHEMA))


def analysis_settings(
    config_path: Optional[str], flags: Dict[str, Any]
) -> Dict[str, Any]:
    file_layer = load_settings(config_path, ANALYSIS_SETTINGS) if config_path else {}
    return validate_settings(merge_settings(file_layer, flags), ANALYSIS_SETTINGS)


def _n_jobs(threads: Optional[int]) -> int:
    return threads if threads and threads > 0 else -1


@click.group()
@click.version_option(package_name="hierfdr")
def cli() -> None:
    """Hierarchical FDR-controlled inference for censored survival data."""
    configure_logging()


@cli.command()
@data_options
@tuning_options
@click.option("--screen", type=float, help="Minimum |correlation| to keep an X.")
@click.option(
    "--methods",
    help=f"Comma-separated extra procedures to compare: {', '.join(METHODS)}.",
)
@click.option("--dump-matrices", "dump", is_flag=True, help="Also write matrices.bin.")
@handle_errors
def analyze(
    data_csv: str,
    schema_path: Optional[str],
    time_col: Optional[str],
    status_col: Optional[str],
    z_cols: Optional[str],
    x_cols: Optional[str],
    time_scale: Optional[str],
    delimiter: str,
    config_path: Optional[str],
    alpha: Optional[float],
    seed: Optional[int],
    threads: Optional[int],
    lambda_mode: Optional[str],
    mu_constant: Optional[float],
    c0: Optional[float],
    out: str,
    screen: Optional[float],
    methods: Optional[str],
    dump: bool,
) -> None:
    """Run the hierarchical procedure on DATA_CSV."""
    schema = column_schema(
        schema_path, time_col, status_col, z_cols, x_cols, time_scale
    )
    settings = analysis_settings(
        config_path,
        {
            "alpha": alpha,
            "seed": seed,
            "lambda": lambda_mode,
            "mu_constant": mu_constant,
            "c0": c0,
            "screen": screen,
            "methods": _split(methods),
        },
    )
    settings.setdefault("seed", fresh_seed())
    extra = check_methods(settings.get("methods", []))
    data = load_csv(data_csv, schema, delimiter=delimiter)
    manifest = RunManifest(
        command="analyze",
        config={**settings, "schema": asdict(schema)},
        seed=settings["seed"],
        inputs={str(Path(data_csv)): file_digest(data_csv)},
    )

    with OutputDirectory(out) as target:
        analysis = run_analysis(
            data, AnalysisSettings.from_dict(settings), n_jobs=_n_jobs(threads)
        )
        index_map = analysis.index_map
        report = analysis.rejection.to_dict(env_estimates(analysis))
        report.update(
            {
                "alpha": settings["alpha"],
                "n": analysis.data.n,
                "d": index_map.d,
                "q": index_map.q,
                "p": index_map.p,
                "invalid_statistics": [
                    analysis.prepared.design.label(int(i))
                    for i in np.flatnonzero(~analysis.statistics.valid)
                ],
            }
        )
        if analysis.retained is not None:
            report["retained_x"] = list(analysis.data.x_names)
        target.write_json("rejections.json", report)
        target.write_csv("coefficients.csv", coefficient_table(analysis))
        if extra:
            outcomes = run_methods(analysis, [PROPOSED, *extra])
            target.write_csv("methods_summary.csv", methods_summary(analysis, outcomes))
        if dump:
            target.write_bytes("matrices.bin", dump_matrices(analysis.debiased))
        manifest.write(target)
    click.echo(
        f"{len(analysis.rejection.a1)} main effect(s) and "
        f"{analysis.rejection.r - len(analysis.rejection.a1)} interaction(s) "
        f"rejected; results in {out}"
    )


@cli.command()
@tuning_options
@click.option("--sweep", help="Vary one field, e.g. n=300,500.")
@click.option("--methods", help=f"Comma-separated procedures: {', '.join(METHODS)}.")
@click.option(
    "--model", type=click.Choice(["exponential", "loglogistic"]), default=None
)
@click.option("--replicates", type=int, help="Replicates per setting.")
@click.option(
    "--full-scale",
    "--paper-scale",
    "full_scale",
    is_flag=True,
    help="Start from the n=500, p=1205 setup.",
)
@click.option("--no-runtime", is_flag=True, help="Do not record wall-clock times.")
@handle_errors
def simulate(
    config_path: Optional[str],
    alpha: Optional[float],
    seed: Optional[int],
    threads: Optional[int],
    lambda_mode: Optional[str],
    mu_constant: Optional[float],
    c0: Optional[float],
    out: str,
    sweep: Optional[str],
    methods: Optional[str],
    model: Optional[str],
    replicates: Optional[int],
    full_scale: bool,
    no_runtime: bool,
) -> None:
    """Run a replicated simulation study."""
    profile = profile_settings("full" if full_scale else "desk")
    file_layer = load_settings(config_path, SIMULATION_SETTINGS) if config_path else {}
    flags = {
        "alpha": alpha,
        "seed": seed,
        "lambda": lambda_mode,
        "mu_constant": mu_constant,
        "c0": c0,
        "sweep": sweep,
        "methods": _split(methods),
        "model": model,
        "replicates": replicates,
        "record_runtime": False if no_runtime else None,
    }
    settings = validate_settings(
        merge_settings(profile, file_layer, flags), SIMULATION_SETTINGS
    )
    settings.setdefault("seed", fresh_seed())
    config = sim_config_from_settings(settings)
    chosen = check_methods(settings.get("methods", list(METHODS)))
    analysis = AnalysisSettings.from_dict(settings)
    sweep_spec = parse_sweep(settings["sweep"]) if settings.get("sweep") else None
    inputs = {str(Path(config_path)): file_digest(config_path)} if config_path else {}
    manifest = RunManifest(
        command="simulate", config=settings, seed=settings["seed"], inputs=inputs
    )

    with OutputDirectory(out) as target:
        common = dict(
            methods=chosen,
            out=target,
            settings=analysis,
            n_jobs=_n_jobs(threads),
            record_runtime=settings["record_runtime"],
        )
        if sweep_spec is None:
            reports = [run_study(config, **common)]
        else:
            reports = run_sweep(config, sweep_spec[0], sweep_spec[1], **common)
        manifest.write(target)
    for report in reports:
        for row in report.aggregate:
            click.echo(
                f"{row['method']}: FDR={_fmt(row['fdr'])} "
                f"power={_fmt(row['power'])} ({row['replicates']} replicates)"
            )


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.3f}"


@cli.command()
@data_options
@tuning_options
@click.option(
    "--what",
    type=click.Choice(["weights", "ustats", "gram-diag"]),
    required=True,
    help="Intermediate quantity to write.",
)
@handle_errors
def inspect(
    data_csv: str,
    schema_path: Optional[str],
    time_col: Optional[str],
    status_col: Optional[str],
    z_cols: Optional[str],
    x_cols: Optional[str],
    time_scale: Optional[str],
    delimiter: str,
    config_path: Optional[str],
    alpha: Optional[float],
    seed: Optional[int],
    threads: Optional[int],
    lambda_mode: Optional[str],
    mu_constant: Optional[float],
    c0: Optional[float],
    out: str,
    what: str,
) -> None:
    """Write KM weights, U statistics or the Gram diagonal of DATA_CSV."""
    schema = column_schema(
        schema_path, time_col, status_col, z_cols, x_cols, time_scale
    )
    settings = analysis_settings(
        config_path,
        {
            "alpha": alpha,
            "seed": seed,
            "lambda": lambda_mode,
            "mu_constant": mu_constant,
            "c0": c0,
        },
    )
    settings.setdefault("seed", fresh_seed())
    data = load_csv(data_csv, schema, delimiter=delimiter)
    manifest = RunManifest(
        command=f"inspect {what}",
        config={**settings, "schema": asdict(schema)},
        seed=settings["seed"],
        inputs={str(Path(data_csv)): file_digest(data_csv)},
    )
    with OutputDirectory(out) as target:
        if what == "weights":
            prepared = prepare(data, centered=False)
            target.write_csv(
                "weights.csv",
                pd.DataFrame(
                    {
                        "row": prepared.sorted.permutation + 1,
                        "y": prepared.sorted.dataset.y,
                        "delta": prepared.sorted.dataset.delta.astype(int),
                        "weight": prepared.weights.w,
                    }
                ),
            )
        elif what == "gram-diag":
            prepared = prepare(data)
            design = prepared.design
            gram_diag = prepared.weights.w @ design.phi**2
            target.write_csv(
                "gram_diag.csv",
                pd.DataFrame(
                    {
                        "label": [design.label(i) for i in range(design.p)],
                        "gamma": gram_diag,
                    }
                ),
            )
        else:
            analysis = run_analysis(
                data, AnalysisSettings.from_dict(settings), n_jobs=_n_jobs(threads)
            )
            table = coefficient_table(analysis)
            table["lambda_diag"] = analysis.covariance.lambda_diag
            columns = ["label", "role", "j", "k", "theta_debiased", "lambda_diag", "u"]
            target.write_csv("ustats.csv", table[columns])
        manifest.write(target)
    click.echo(f"Wrote {what} to {out}")


def read_manifest(out: str) -> RunManifest:
    """Load the manifest of an output directory."""
    return RunManifest.from_dict(read_json(Path(out) / MANIFEST))
