"""Synthetic studies: data generation, censoring calibration, metrics and sweeps."""

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from typing import (
    Any,
    Dict,
    Iterable,
    List,
    Mapping,
    Optional,
    Sequence,
    Set,
    Tuple,
    Union,
)

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from hierfdr.dataset import (
    AugmentedDesign,
    EffectKind,
    IndexMap,
    SurvivalDataset,
    build_augmented_design,
)
from hierfdr.debias import bias_decomposition
from hierfdr.exceptions import ConfigError, HierFdrError, StudyAbortedError
from hierfdr.hfdr import RejectionResult, Selection
from hierfdr.pipeline import (
    METHODS,
    AnalysisSettings,
    check_methods,
    run_analysis,
    run_methods,
)
from hierfdr.utils import OutputDirectory

logger = logging.getLogger(__name__)

PILOT_SIZE = 10_000
CALIBRATION_TOL = 0.005
CALIBRATION_MAX_ITER = 60
MAX_FAILURE_SHARE = 0.10

MAIN_VALUE = 2.0
INTERACTION_VALUE = 1.0
# 0-based Z columns carrying signal in the default pattern.
SIGNAL_ENV = (1, 4)

SWEEPABLE_FIELDS = ("n", "d", "q", "eta", "a", "r", "s_alpha", "model", "alpha")

REPLICATE_COLUMNS = [
    "replicate",
    "method",
    "fdp",
    "power",
    "mse",
    "runtime_s",
    "t0",
    "fallback",
    "R",
    "censoring",
    "bias_inf",
    "bias_bound",
    "status",
    "error",
]


class SurvivalModel(str, Enum):
    EXPONENTIAL = "exponential"
    LOGLOGISTIC = "loglogistic"


@dataclass(frozen=True)
class SimConfig:
    """One simulation setting.

    Attributes:
        n: sample size.
        d: number of high-dimensional covariates.
        q: number of low-dimensional covariates.
        eta: AR(1) correlation of the X columns, in [0, 1).
        a: signal magnitude, positive.
        r: target censoring rate, in [0, 1).
        s_alpha: number of nonzero high-dimensional main effects.
        model: survival model of the event times.
        alpha: target FDR level.
        seed: root seed of the study.
        replicates: number of replicates.
        global_null: use theta0 = 0 instead of the default pattern.
    """

    n: int = 400
    d: int = 100
    q: int = 5
    eta: float = 0.3
    a: float = 1.0
    r: float = 0.2
    s_alpha: int = 5
    model: SurvivalModel = SurvivalModel.EXPONENTIAL
    alpha: float = 0.1
    seed: int = 0
    replicates: int = 200
    global_null: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "model", SurvivalModel(self.model))
        problems = []
        if self.n < 2:
            problems.append(f"n must be at least 2, got {self.n}")
        if self.d < 1 or self.q < 1:
            problems.append(f"d and q must be positive, got d={self.d}, q={self.q}")
        if not 0 <= self.eta < 1:
            problems.append(f"eta must lie in [0, 1), got {self.eta}")
        if not self.a > 0:
            problems.append(f"a must be positive, got {self.a}")
        if not 0 <= self.r < 1:
            problems.append(f"r must lie in [0, 1), got {self.r}")
        if not 0 <= self.s_alpha <= self.d:
            problems.append(f"s_alpha must lie in [0, d], got {self.s_alpha}")
        if not self.global_null and self.q < max(SIGNAL_ENV) + 1:
            problems.append(
                f"the default sparsity pattern needs q >= {max(SIGNAL_ENV) + 1}"
            )
        if not 0 <= self.alpha < 1:
            problems.append(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.replicates < 1:
            problems.append(f"replicates must be at least 1, got {self.replicates}")
        if problems:
            raise ConfigError("Invalid simulation config: " + "; ".join(problems))

    @property
    def index_map(self) -> IndexMap:
        return IndexMap(d=self.d, q=self.q)

    @property
    def p(self) -> int:
        return self.index_map.p

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["model"] = self.model.value
        return out


@dataclass(frozen=True)
class GroundTruth:
    """True coefficients and their support (sorted column indices)."""

    theta0: np.ndarray
    support: np.ndarray


def default_truth(config: SimConfig) -> GroundTruth:
    """Coefficients of the default sparsity pattern.

    The first ``s_alpha`` X main effects and the Z effects at 0-based
    positions 1 and 4 take value 2; the interactions of those X columns with
    the same two Z columns take value 1. A global-null config has no signal.
    """
    index_map = config.index_map
    theta0 = np.zeros(index_map.p)
    if not config.global_null:
        for j in range(config.s_alpha):
            theta0[index_map.main_index(j)] = MAIN_VALUE
            for k in SIGNAL_ENV:
                theta0[index_map.interaction_index(j, k)] = INTERACTION_VALUE
        for k in SIGNAL_ENV:
            theta0[index_map.env_index(k)] = MAIN_VALUE
    theta0.setflags(write=False)
    return GroundTruth(theta0=theta0, support=np.flatnonzero(theta0))


@dataclass(frozen=True)
class Covariates:
    """Simulated X and Z blocks."""

    x: np.ndarray
    z: np.ndarray

    @property
    def x_names(self) -> Tuple[str, ...]:
        return tuple(f"X{j + 1}" for j in range(self.x.shape[1]))

    @property
    def z_names(self) -> Tuple[str, ...]:
        return tuple(f"Z{k + 1}" for k in range(self.z.shape[1]))


def generate_design(
    config: SimConfig, rng: np.random.Generator
) -> Tuple[Covariates, AugmentedDesign]:
    """Draw AR(1) Gaussian X rows and standard normal Z.

    X_1 = e_1 and X_j = eta X_{j-1} + sqrt(1 - eta^2) e_j, so Cov(X_i, X_j) =
    eta^|i-j|.
    """
    n, d = config.n, config.d
    noise = rng.standard_normal((n, d))
    x = np.empty((n, d))
    x[:, 0] = noise[:, 0]
    shrink = math.sqrt(1.0 - config.eta**2)
    for j in range(1, d):
        x[:, j] = config.eta * x[:, j - 1] + shrink * noise[:, j]
    z = rng.standard_normal((n, config.q))
    covariates = Covariates(x=x, z=z)
    return covariates, build_augmented_design(covariates)


def _event_times(
    linear: np.ndarray, config: SimConfig, rng: np.random.Generator
) -> np.ndarray:
    """Event times for linear predictors ``Phi theta0``.

    Exponential: rate exp(-a lp). Log-logistic: hazard 1 / (exp(a lp) + t),
    so S(t) = 1 / (1 + t exp(-a lp)) and T = exp(a lp) (1 / V - 1).
    """
    scale = np.exp(config.a * linear)
    if config.model is SurvivalModel.EXPONENTIAL:
        return scale * rng.standard_exponential(linear.shape[0])
    v = rng.uniform(size=linear.shape[0])
    return scale * (1.0 / v - 1.0)


def calibrate_censoring(
    design: AugmentedDesign,
    truth: GroundTruth,
    config: SimConfig,
    rng: np.random.Generator,
) -> float:
    """Exponential censoring rate that censors a fraction r of the sample.

    Bisection on the log-rate over a pilot sample of design rows drawn with
    replacement; event and censoring draws are fixed across iterations.
    Stops when the pilot censoring share is within 0.005 of r or after 60
    iterations.

    Raises:
        ConfigError: for r outside [0, 1).

    Returns:
        The rate; 0 when r = 0 (no censoring).

    """
    if not 0 <= config.r < 1:
        raise ConfigError(f"Censoring rate must lie in [0, 1), got {config.r}.")
    if config.r == 0:
        return 0.0
    rows = rng.integers(0, design.n, PILOT_SIZE)
    events = _event_times(design.phi[rows] @ truth.theta0, config, rng)
    unit = rng.standard_exponential(PILOT_SIZE)

    def share(log_rate: float) -> float:
        return float(np.mean(unit / math.exp(log_rate) < events))

    lo, hi = -30.0, 30.0
    mid = 0.0
    for _ in range(CALIBRATION_MAX_ITER):
        mid = (lo + hi) / 2.0
        achieved = share(mid)
        if abs(achieved - config.r) <= CALIBRATION_TOL:
            break
        if achieved < config.r:
            lo = mid
        else:
            hi = mid
    rate = math.exp(mid)
    logger.debug(f"Censoring rate {rate:.5g} gives pilot share {share(mid):.4f}")
    return rate


def generate_survival(
    covariates: Covariates,
    design: AugmentedDesign,
    truth: GroundTruth,
    config: SimConfig,
    rng: np.random.Generator,
    censoring_rate: Optional[float] = None,
) -> SurvivalDataset:
    """Draw event and censoring times; y = log(min(T, C)), delta = 1(T <= C).

    Args:
        covariates: the X and Z blocks behind ``design``.
        design: the augmented design.
        truth: true coefficients.
        config: simulation setting.
        rng: random generator.
        censoring_rate: exponential censoring rate; calibrated when omitted.

    Raises:
        ConfigError: if the truth does not match the design.

    Returns:
        The simulated dataset.

    """
    if truth.theta0.shape != (design.p,):
        raise ConfigError(
            f"theta0 has length {truth.theta0.size}, design has p={design.p}."
        )
    if censoring_rate is None:
        censoring_rate = calibrate_censoring(design, truth, config, rng)
    events = _event_times(design.phi @ truth.theta0, config, rng)
    if censoring_rate > 0:
        censor = rng.standard_exponential(design.n) / censoring_rate
    else:
        censor = np.full(design.n, np.inf)
    observed = np.minimum(events, censor)
    return SurvivalDataset(
        y=np.log(observed),
        delta=(events <= censor).astype(float),
        x=covariates.x,
        z=covariates.z,
    )


@dataclass(frozen=True)
class MetricsRecord:
    """Selection accuracy of one method in one replicate.

    FDP counts high-dimensional main effects and interactions only;
    environment effects are outside the FDR accounting. Power is taken over
    the whole true support, environment effects included.
    """

    fdp: float
    power: float
    mse: float
    selected: int
    false_discoveries: int
    true_discoveries: int
    runtime_s: float = 0.0


Selected = Union[RejectionResult, Selection, np.ndarray, Sequence[int]]


def _selected_columns(result: Selected, index_map: IndexMap) -> np.ndarray:
    if isinstance(result, RejectionResult):
        return result.indices(index_map)
    if isinstance(result, Selection):
        return result.indices
    return np.asarray(result, dtype=int)


def _accounted(columns: Iterable[int], index_map: IndexMap) -> Set[int]:
    return {
        int(c)
        for c in columns
        if index_map.decode(int(c)).kind is not EffectKind.ENV
    }


def evaluate_replicate(
    truth: GroundTruth,
    result: Selected,
    estimate: np.ndarray,
    index_map: IndexMap,
    runtime_s: float = 0.0,
) -> MetricsRecord:
    """FDP, power and MSE of one selection.

    FDP is (false mains + false interactions) / max(|S_hat|, 1), which is the
    sum over j of the per-family FDPs; power is |S_hat & S| / |S| over the
    full support S (0 when S is empty); MSE is ||estimate - theta0||^2 / p.
    """
    selected = {int(c) for c in _selected_columns(result, index_map)}
    support = {int(c) for c in truth.support}
    chosen = _accounted(selected, index_map)
    true_hits = len(chosen & support)
    false_hits = len(chosen) - true_hits
    fdp = false_hits / max(len(chosen), 1)
    power = len(selected & support) / len(support) if support else 0.0
    err = np.asarray(estimate, dtype=float) - truth.theta0
    return MetricsRecord(
        fdp=fdp,
        power=power,
        mse=float(err @ err) / index_map.p,
        selected=len(chosen),
        false_discoveries=false_hits,
        true_discoveries=true_hits,
        runtime_s=runtime_s,
    )


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    """Independent stream of one replicate, derived from (seed, replicate)."""
    return np.random.default_rng([seed, replicate])


def _failure_rows(replicate: int, methods: Sequence[str], error: str) -> List[dict]:
    return [
        {
            "replicate": replicate,
            "method": method,
            "fdp": np.nan,
            "power": np.nan,
            "mse": np.nan,
            "runtime_s": 0.0,
            "t0": np.nan,
            "fallback": False,
            "R": 0,
            "censoring": np.nan,
            "bias_inf": np.nan,
            "bias_bound": np.nan,
            "status": "failed",
            "error": error,
        }
        for method in methods
    ]


def run_replicate(
    config: SimConfig,
    truth: GroundTruth,
    replicate: int,
    methods: Sequence[str],
    settings: AnalysisSettings,
    record_runtime: bool = True,
) -> List[dict]:
    """Simulate one dataset and evaluate every method on it.

    A replicate whose analysis fails yields one ``failed`` row per method.
    """
    rng = replicate_rng(config.seed, replicate)
    try:
        covariates, design = generate_design(config, rng)
        data = generate_survival(covariates, design, truth, config, rng)
        run_settings = replace(
            settings, alpha=config.alpha, seed=int(rng.integers(2**31 - 1))
        )
        analysis = run_analysis(data, run_settings, n_jobs=1)
        outcomes = run_methods(analysis, methods)
        prepared = analysis.prepared
        bias = bias_decomposition(
            analysis.debiased,
            prepared.design,
            prepared.response,
            prepared.weights,
            truth.theta0,
        )
    except (HierFdrError, FloatingPointError, np.linalg.LinAlgError) as exc:
        logger.warning(f"Replicate {replicate} failed: {exc}")
        return _failure_rows(replicate, methods, str(exc))

    censoring = float(1.0 - data.delta.mean())
    index_map = analysis.index_map
    rows = []
    for method, outcome in outcomes.items():
        metrics = evaluate_replicate(
            truth, outcome.indices, outcome.estimate, index_map
        )
        debiased = method in ("proposed", "surv_fcd", "vs_dlasso")
        rows.append(
            {
                "replicate": replicate,
                "method": method,
                "fdp": metrics.fdp,
                "power": metrics.power,
                "mse": metrics.mse,
                "runtime_s": outcome.seconds if record_runtime else 0.0,
                "t0": np.nan if outcome.t0 is None else outcome.t0,
                "fallback": outcome.fallback_used,
                "R": metrics.selected,
                "censoring": censoring,
                "bias_inf": float(np.max(np.abs(bias.delta))) if debiased else np.nan,
                "bias_bound": bias.bound if debiased else np.nan,
                "status": "ok",
                "error": "",
            }
        )
    return rows


@dataclass(frozen=True)
class StudyReport:
    """Per-replicate rows and per-method aggregates of one study."""

    config: SimConfig
    methods: Tuple[str, ...]
    rows: pd.DataFrame
    aggregate: List[Dict[str, Any]]
    failures: int
    runtime: Dict[str, float] = field(default_factory=dict)


def _aggregate(rows: pd.DataFrame, methods: Sequence[str]) -> List[Dict[str, Any]]:
    out = []
    for method in methods:
        sub = rows[(rows["method"] == method) & (rows["status"] == "ok")]
        m = len(sub)
        fdp = sub["fdp"].to_numpy(dtype=float)
        power = sub["power"].to_numpy(dtype=float)
        out.append(
            {
                "method": method,
                "replicates": m,
                "fdr": float(fdp.mean()) if m else None,
                "fdr_mcse": float(fdp.std(ddof=1) / math.sqrt(m)) if m > 1 else None,
                "power": float(power.mean()) if m else None,
                "mse": float(sub["mse"].to_numpy(dtype=float).mean()) if m else None,
                "censoring_rate": (
                    float(sub["censoring"].to_numpy(dtype=float).mean()) if m else None
                ),
            }
        )
    return out


def run_study(
    config: SimConfig,
    methods: Sequence[str] = METHODS,
    out: Optional[OutputDirectory] = None,
    settings: Optional[AnalysisSettings] = None,
    n_jobs: int = 1,
    record_runtime: bool = True,
) -> StudyReport:
    """Run all replicates of one setting and aggregate them.

    Replicates run concurrently on ``n_jobs`` threads; each derives its
    stream from (seed, replicate) so results do not depend on ``n_jobs``.

    Args:
        config: the setting.
        methods: procedures to compare.
        out: when given, ``replicates.csv``, ``study.json`` and (with
            runtimes) ``runtime.json`` are written there.
        settings: analysis tuning; alpha is taken from ``config``.
        n_jobs: replicates run concurrently.
        record_runtime: record wall-clock seconds per method.

    Raises:
        ConfigError: for unknown methods.
        StudyAbortedError: if more than 10% of the replicates fail.

    Returns:
        The report.

    """
    methods = tuple(check_methods(methods))
    settings = settings or AnalysisSettings()
    truth = default_truth(config)
    logger.info(
        f"Study: {config.replicates} replicate(s) of n={config.n}, p={config.p}, "
        f"{config.model.value} model, methods {', '.join(methods)}"
    )
    start = time.perf_counter()
    per_replicate = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(run_replicate)(config, truth, b, methods, settings, record_runtime)
        for b in range(config.replicates)
    )
    rows = pd.DataFrame(
        [row for block in per_replicate for row in block], columns=REPLICATE_COLUMNS
    )
    failures = int(rows.loc[rows["status"] == "failed", "replicate"].nunique())
    if failures > MAX_FAILURE_SHARE * config.replicates:
        raise StudyAbortedError(
            f"{failures} of {config.replicates} replicates failed "
            f"(more than {MAX_FAILURE_SHARE:.0%})."
        )
    if failures:
        logger.warning(f"{failures} replicate(s) failed and are excluded from means")
    runtime = {}
    if record_runtime:
        ok = rows[rows["status"] == "ok"]
        runtime = {
            method: float(ok.loc[ok["method"] == method, "runtime_s"].mean())
            for method in methods
        }
    report = StudyReport(
        config=config,
        methods=methods,
        rows=rows,
        aggregate=_aggregate(rows, methods),
        failures=failures,
        runtime=runtime,
    )
    logger.info(f"Study finished in {time.perf_counter() - start:.1f}s")
    if out is not None:
        write_reports([report], out)
    return report


def _value_token(value: Any) -> str:
    return value.value if isinstance(value, Enum) else str(value)


def write_reports(
    reports: Sequence[StudyReport],
    out: OutputDirectory,
    sweep_field: Optional[str] = None,
) -> None:
    """Write per-setting replicate CSVs, the aggregate JSON and runtimes.

    The aggregate holds no wall-clock quantities, so it is identical for
    identical seeds and settings.
    """
    aggregate_rows = []
    runtime_rows = []
    for report in reports:
        value = None
        name = "replicates.csv"
        if sweep_field is not None:
            value = getattr(report.config, sweep_field)
            value = value.value if isinstance(value, Enum) else value
            name = f"replicates_{sweep_field}={_value_token(value)}.csv"
        out.write_csv(name, report.rows)
        for row in report.aggregate:
            aggregate_rows.append({"value": value, "failures": report.failures, **row})
        for method, seconds in report.runtime.items():
            runtime_rows.append({"value": value, "method": method, "mean_s": seconds})
    base = reports[0].config.to_dict()
    if sweep_field is not None:
        base.pop(sweep_field)
    out.write_json(
        "study.json",
        {
            "config": base,
            "sweep_field": sweep_field,
            "methods": list(reports[0].methods),
            "rows": aggregate_rows,
        },
    )
    if runtime_rows:
        out.write_json("runtime.json", {"rows": runtime_rows})


def parse_sweep(text: str) -> Tuple[str, List[Any]]:
    """Parse ``field=v1,v2,...`` into the field name and typed values.

    Raises:
        ConfigError: for unknown fields or values that do not parse.

    """
    if "=" not in text:
        raise ConfigError(f"Sweep must look like field=v1,v2; got {text!r}.")
    name, _, raw = text.partition("=")
    name = name.strip()
    if name not in SWEEPABLE_FIELDS:
        raise ConfigError(
            f"Cannot sweep {name!r}; valid fields: {', '.join(SWEEPABLE_FIELDS)}"
        )
    kind = {f.name: f.type for f in fields(SimConfig)}[name]
    values: List[Any] = []
    for token in raw.split(","):
        token = token.strip()
        if not token:
            continue
        try:
            if kind is int:
                values.append(int(token))
            elif kind is float:
                values.append(float(token))
            else:
                values.append(SurvivalModel(token))
        except ValueError as exc:
            raise ConfigError(f"Bad value {token!r} for sweep field {name}.") from exc
    if not values:
        raise ConfigError(f"Sweep over {name} lists no values.")
    return name, values


def run_sweep(
    config: SimConfig,
    sweep_field: str,
    values: Sequence[Any],
    methods: Sequence[str] = METHODS,
    out: Optional[OutputDirectory] = None,
    settings: Optional[AnalysisSettings] = None,
    n_jobs: int = 1,
    record_runtime: bool = True,
) -> List[StudyReport]:
    """Run one study per value of ``sweep_field``.

    Raises:
        ConfigError: for a field that cannot be swept or an invalid value.
        StudyAbortedError: if any setting loses more than 10% of replicates.

    """
    if sweep_field not in SWEEPABLE_FIELDS:
        raise ConfigError(
            f"Cannot sweep {sweep_field!r}; valid fields: {', '.join(SWEEPABLE_FIELDS)}"
        )
    reports = [
        run_study(
            replace(config, **{sweep_field: value}),
            methods,
            settings=settings,
            n_jobs=n_jobs,
            record_runtime=record_runtime,
        )
        for value in values
    ]
    if out is not None:
        write_reports(reports, out, sweep_field)
    return reports


def config_from_mapping(obj: Mapping[str, Any]) -> SimConfig:
    """Build a SimConfig from a settings dict; unknown keys are ignored."""
    names = {f.name for f in fields(SimConfig)}
    return SimConfig(**{k: v for k, v in obj.items() if k in names})
