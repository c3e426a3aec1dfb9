"""End-to-end analysis of one dataset, shared by the CLI and the simulation lab."""

import logging
import time
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from hierfdr.dataset import (
    AugmentedDesign,
    EffectKind,
    IndexMap,
    SortedDataset,
    SurvivalDataset,
    build_augmented_design,
    center_columns,
    sort_by_time,
)
from hierfdr.debias import (
    DEFAULT_C0,
    DEFAULT_MU_CONSTANT,
    DEFAULT_QP_TOL,
    DebiasedFit,
    debias_estimate,
)
from hierfdr.exceptions import ConfigError, ConvergenceError, DataError
from hierfdr.hfdr import (
    MarginalTests,
    RejectionResult,
    Stage2Policy,
    TestStatistics,
    VsKind,
    baseline_bh,
    baseline_bh_hierarchy,
    baseline_fcd,
    baseline_vs,
    hierarchical_threshold,
    marginal_wls_pvalues,
    test_statistics,
)
from hierfdr.influence_cov import (
    CovarianceEstimate,
    CovarianceMode,
    InfluenceTable,
    compute_influence,
    covariance_from_influence,
)
from hierfdr.km_weights import KmWeights, compute_km_weights
from hierfdr.penalized_wls import (
    DEFAULT_MAX_ITER,
    DEFAULT_MCP_XI,
    DEFAULT_TOL,
    CrossValidate,
    LambdaMode,
    LassoFit,
    PenaltySpec,
    fit_lasso,
    fit_mcp,
    parse_lambda_mode,
    select_lambda,
)

logger = logging.getLogger(__name__)

PROPOSED = "proposed"
METHODS = (
    PROPOSED,
    "surv_fcd",
    "bh",
    "bh_hierarchy",
    "vs_dlasso",
    "vs_lasso",
    "vs_mcp",
)

# Stages whose cost every method pays before its own selection step.
METHOD_STAGES: Dict[str, Tuple[str, ...]] = {
    PROPOSED: ("lasso", "debias", "covariance"),
    "surv_fcd": ("lasso", "debias", "covariance"),
    "vs_dlasso": ("lasso", "debias", "covariance"),
    "vs_lasso": ("lasso",),
    "vs_mcp": ("lasso",),
    "bh": ("marginal",),
    "bh_hierarchy": ("marginal",),
}

DEFAULT_SCREEN = 0.05


@dataclass(frozen=True)
class AnalysisSettings:
    """Tuning of one analysis run.

    Attributes:
        alpha: target FDR level.
        lambda_mode: ``cv`` or ``fixed:<c>``.
        cv_folds: number of cross-validation folds.
        cv_grid_size: number of penalty levels on the CV path.
        mu: explicit decorrelation radius; None uses ``mu_constant``.
        mu_constant: constant of ``mu = c sqrt(log p / n)``.
        c0: exponent of the design bound n^c0.
        tol: penalized solver tolerance.
        max_iter: penalized solver sweep limit.
        qp_tol: decorrelating program tolerance.
        mcp_xi: MCP concavity for the VS-MCP baseline.
        bh_stage2: ``pooled`` or ``per_family`` for BH-Hierarchy.
        seed: seed of the CV fold assignment.
        screen: minimum KM-weighted |correlation| to keep an X column;
            None disables screening.
    """

    alpha: float = 0.1
    lambda_mode: str = "cv"
    cv_folds: int = 10
    cv_grid_size: int = 100
    mu: Optional[float] = None
    mu_constant: float = DEFAULT_MU_CONSTANT
    c0: float = DEFAULT_C0
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    qp_tol: float = DEFAULT_QP_TOL
    mcp_xi: float = DEFAULT_MCP_XI
    bh_stage2: str = Stage2Policy.POOLED.value
    seed: Optional[int] = 0
    screen: Optional[float] = None

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "AnalysisSettings":
        """Build settings from a validated settings dict; unknown keys are ignored.

        The settings key ``lambda`` maps to ``lambda_mode``.
        """
        names = {f.name for f in fields(cls)}
        values = {k: v for k, v in obj.items() if k in names}
        if "lambda" in obj:
            values["lambda_mode"] = obj["lambda"]
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["lambda"] = out.pop("lambda_mode")
        return out


@dataclass(frozen=True)
class PreparedData:
    """Sorted sample, KM weights and the (centered) regression inputs."""

    sorted: SortedDataset
    weights: KmWeights
    design: AugmentedDesign
    response: np.ndarray


def prepare(data: SurvivalDataset, centered: bool = True) -> PreparedData:
    """Sort, weight and center a dataset.

    Args:
        data: the dataset.
        centered: subtract KM-weighted means from design and response.

    Raises:
        DataError: if no event is observed.

    Returns:
        The prepared data.

    """
    if not np.any(data.delta == 1):
        logger.error("Every observation is censored")
        raise DataError("Every observation is censored; KM weights are all zero.")
    sorted_data = sort_by_time(data, build_augmented_design(data))
    weights = compute_km_weights(sorted_data)
    design, response = sorted_data.design, sorted_data.dataset.y
    if centered:
        design, response = center_columns(design, weights.w, response)
    return PreparedData(
        sorted=sorted_data, weights=weights, design=design, response=response
    )


def screen_by_marginal_correlation(
    prepared: PreparedData, min_abs_corr: float = DEFAULT_SCREEN
) -> np.ndarray:
    """Keep the X columns whose KM-weighted correlation with y is large enough.

    Args:
        prepared: prepared data (the design need not be centered).
        min_abs_corr: minimum absolute correlation.

    Raises:
        DataError: if no column survives.

    Returns:
        Sorted indices of the retained X columns.

    """
    w = prepared.weights.w
    design, y = center_columns(prepared.design, w, prepared.response)
    d = design.index_map.d
    x = design.phi[:, :d]
    cross = x.T @ (w * y)
    norms = np.sqrt((w @ x**2) * (w @ y**2))
    corr = np.divide(np.abs(cross), norms, out=np.zeros(d), where=norms > 0)
    kept = np.flatnonzero(corr >= min_abs_corr)
    logger.info(
        f"Screening kept {kept.size} of {d} X columns (|corr| >= {min_abs_corr})"
    )
    if kept.size == 0:
        raise DataError(
            f"No X column has KM-weighted |correlation| >= {min_abs_corr}."
        )
    return kept


@dataclass(frozen=True)
class AnalysisResult:
    """Every intermediate of one analysis run."""

    data: SurvivalDataset
    prepared: PreparedData
    settings: AnalysisSettings
    lasso: LassoFit
    debiased: DebiasedFit
    influence: InfluenceTable
    covariance: CovarianceEstimate
    statistics: TestStatistics
    rejection: RejectionResult
    retained: Optional[np.ndarray] = None
    timings: Dict[str, float] = field(default_factory=dict)

    @property
    def index_map(self) -> IndexMap:
        return self.prepared.design.index_map


def _timed(timings: Dict[str, float], stage: str, fn: Callable[[], Any]) -> Any:
    start = time.perf_counter()
    try:
        return fn()
    finally:
        timings[stage] = timings.get(stage, 0.0) + time.perf_counter() - start


def _lambda_mode(settings: AnalysisSettings) -> LambdaMode:
    mode = parse_lambda_mode(
        settings.lambda_mode, folds=settings.cv_folds, grid_size=settings.cv_grid_size
    )
    if isinstance(mode, CrossValidate):
        mode = replace(mode, seed=settings.seed)
    return mode


def run_analysis(
    data: SurvivalDataset, settings: AnalysisSettings, n_jobs: int = 1
) -> AnalysisResult:
    """Run weights, Lasso, debiasing, covariance and hierarchical thresholding.

    Args:
        data: the dataset, in any row order.
        settings: tuning.
        n_jobs: threads for CV folds and decorrelating programs.

    Raises:
        DataError: for unusable data.
        ConfigError: for invalid tuning.
        ConvergenceError: if the Lasso does not converge.
        InfeasibleProgramError: if a decorrelating program stays infeasible.

    Returns:
        The analysis result.

    """
    if not 0 <= settings.alpha < 1:
        raise ConfigError(f"alpha must lie in [0, 1), got {settings.alpha}.")
    timings: Dict[str, float] = {}
    retained = None
    if settings.screen is not None:
        retained = screen_by_marginal_correlation(
            prepare(data, centered=False), settings.screen
        )
        data = data.select_features(retained)
    prepared = prepare(data)
    design, y, weights = prepared.design, prepared.response, prepared.weights
    index_map = design.index_map
    logger.info(
        f"Analyzing n={data.n}, d={data.d}, q={data.q}, p={index_map.p}, "
        f"{int(data.delta.sum())} events"
    )

    def lasso_stage() -> LassoFit:
        lam = select_lambda(
            design,
            y,
            weights,
            _lambda_mode(settings),
            tol=settings.tol,
            max_iter=settings.max_iter,
            n_jobs=n_jobs,
        )
        return fit_lasso(
            design,
            y,
            weights,
            PenaltySpec.lasso(lam),
            tol=settings.tol,
            max_iter=settings.max_iter,
        )

    lasso = _timed(timings, "lasso", lasso_stage)
    debiased = _timed(
        timings,
        "debias",
        lambda: debias_estimate(
            lasso,
            design,
            y,
            weights,
            mu=settings.mu,
            mu_constant=settings.mu_constant,
            c0=settings.c0,
            tol=settings.qp_tol,
            n_jobs=n_jobs,
        ),
    )
    influence = _timed(
        timings,
        "covariance",
        lambda: compute_influence(
            prepared.sorted, lasso.theta_hat, design=design, response=y
        ),
    )
    covariance = _timed(
        timings,
        "covariance",
        lambda: covariance_from_influence(
            influence, CovarianceMode.DIAG, m_hat=debiased.m_hat
        ),
    )
    stats = test_statistics(debiased, covariance, index_map)
    rejection = _timed(
        timings,
        "threshold",
        lambda: hierarchical_threshold(
            stats, index_map.d, index_map.q, settings.alpha
        ),
    )
    return AnalysisResult(
        data=data,
        prepared=prepared,
        settings=settings,
        lasso=lasso,
        debiased=debiased,
        influence=influence,
        covariance=covariance,
        statistics=stats,
        rejection=rejection,
        retained=retained,
        timings=timings,
    )


@dataclass(frozen=True)
class MethodOutcome:
    """Selection and coefficient estimate produced by one procedure.

    Attributes:
        method: procedure name.
        indices: selected column indices.
        estimate: the coefficient vector the procedure reports.
        t0: threshold, when the procedure has one.
        fallback_used: True when the threshold fell back.
        seconds: wall-clock time of the stages this procedure needs.
        rejection: hierarchical result, when the procedure produces one.
    """

    method: str
    indices: np.ndarray
    estimate: np.ndarray
    t0: Optional[float] = None
    fallback_used: bool = False
    seconds: float = 0.0
    rejection: Optional[RejectionResult] = None

    @property
    def r(self) -> int:
        return int(self.indices.size)


def check_methods(methods: Sequence[str]) -> List[str]:
    """Validate and de-duplicate method names, keeping their order.

    Raises:
        ConfigError: for unknown names.

    """
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigError(
            f"Unknown method(s) {unknown}; valid methods: {', '.join(METHODS)}"
        )
    return list(dict.fromkeys(methods))


def run_methods(
    analysis: AnalysisResult,
    methods: Sequence[str] = METHODS,
) -> Dict[str, MethodOutcome]:
    """Run the proposed procedure and the requested comparison procedures.

    Args:
        analysis: a completed analysis.
        methods: names from :data:`METHODS`.

    Raises:
        ConfigError: for unknown method names.

    Returns:
        Outcomes keyed by method name, in the requested order.

    """
    methods = check_methods(methods)
    settings = analysis.settings
    prepared = analysis.prepared
    index_map = analysis.index_map
    stats = analysis.statistics
    timings: Dict[str, float] = dict(analysis.timings)
    marginal: List[MarginalTests] = []

    def marginal_tests() -> MarginalTests:
        if not marginal:
            marginal.append(
                _timed(
                    timings,
                    "marginal",
                    lambda: marginal_wls_pvalues(
                        prepared.sorted,
                        prepared.weights,
                        prepared.design,
                        prepared.response,
                    ),
                )
            )
        return marginal[0]

    def base_seconds(method: str) -> float:
        return sum(timings.get(stage, 0.0) for stage in METHOD_STAGES[method])

    outcomes: Dict[str, MethodOutcome] = {}
    theta_d = analysis.debiased.theta_d
    for method in methods:
        start = time.perf_counter()
        if method == PROPOSED:
            rejection = analysis.rejection
            outcome = MethodOutcome(
                method,
                rejection.indices(index_map),
                theta_d,
                t0=rejection.t0,
                fallback_used=rejection.fallback_used,
                rejection=rejection,
            )
            own = timings.get("threshold", 0.0)
        elif method == "surv_fcd":
            selection = baseline_fcd(stats, settings.alpha)
            outcome = MethodOutcome(
                method,
                selection.indices,
                theta_d,
                t0=selection.t0,
                fallback_used=selection.fallback_used,
            )
            own = time.perf_counter() - start
        elif method in ("bh", "bh_hierarchy"):
            tests = marginal_tests()
            start = time.perf_counter()
            if method == "bh":
                indices = baseline_bh(tests.pvalues, settings.alpha).indices
                rejection = None
            else:
                rejection = baseline_bh_hierarchy(
                    tests.pvalues,
                    index_map.d,
                    index_map.q,
                    settings.alpha,
                    stage2=settings.bh_stage2,
                )
                indices = rejection.indices(index_map)
            outcome = MethodOutcome(
                method, indices, tests.slopes, rejection=rejection
            )
            own = time.perf_counter() - start
        elif method == "vs_dlasso":
            selection = baseline_vs(stats, VsKind.DLASSO)
            outcome = MethodOutcome(method, selection.indices, theta_d, t0=selection.t0)
            own = time.perf_counter() - start
        elif method == "vs_lasso":
            outcome = MethodOutcome(
                method,
                baseline_vs(analysis.lasso, VsKind.LASSO).indices,
                analysis.lasso.theta_hat,
            )
            own = 0.0
        else:
            mcp = fit_vs_mcp(analysis)
            outcome = MethodOutcome(
                method, baseline_vs(mcp, VsKind.MCP).indices, mcp.theta_hat
            )
            own = time.perf_counter() - start
        outcomes[method] = replace(outcome, seconds=base_seconds(method) + own)
    return outcomes


def fit_vs_mcp(analysis: AnalysisResult) -> LassoFit:
    """MCP fit at the Lasso's penalty level, warm-started from the Lasso.

    A fit that runs out of sweeps is kept as it is, with a warning.
    """
    settings = analysis.settings
    prepared = analysis.prepared
    penalty = PenaltySpec.mcp(analysis.lasso.lam, settings.mcp_xi)
    try:
        return fit_mcp(
            prepared.design,
            prepared.response,
            prepared.weights,
            penalty,
            tol=settings.tol,
            max_iter=settings.max_iter,
            init=analysis.lasso.theta_hat,
        )
    except ConvergenceError as exc:
        logger.warning(f"MCP fit kept unconverged: {exc}")
        return exc.partial


def coefficient_table(analysis: AnalysisResult) -> pd.DataFrame:
    """One row per effect: role, 1-based j and k, estimates, U and rejection.

    Environment effects are always reported and never marked rejected.
    """
    design = analysis.prepared.design
    index_map = design.index_map
    rejected = np.zeros(index_map.p, dtype=bool)
    rejected[analysis.rejection.indices(index_map)] = True
    roles = list(index_map.roles())
    return pd.DataFrame(
        {
            "label": [design.label(i) for i in range(index_map.p)],
            "role": [r.kind.value for r in roles],
            "j": pd.array([None if r.j is None else r.j + 1 for r in roles], "Int64"),
            "k": pd.array([None if r.k is None else r.k + 1 for r in roles], "Int64"),
            "theta_hat": analysis.lasso.theta_hat,
            "theta_debiased": analysis.debiased.theta_d,
            "u": analysis.statistics.u,
            "rejected": rejected,
        }
    )


def env_estimates(analysis: AnalysisResult) -> List[Dict[str, Any]]:
    """Debiased estimates and statistics of the always-tested Z effects."""
    design = analysis.prepared.design
    index_map = design.index_map
    out = []
    for k in range(index_map.q):
        col = index_map.env_index(k)
        out.append(
            {
                "k": k + 1,
                "label": design.label(col),
                "theta_debiased": float(analysis.debiased.theta_d[col]),
                "u": float(analysis.statistics.u[col]),
            }
        )
    return out


def methods_summary(
    analysis: AnalysisResult, outcomes: Mapping[str, MethodOutcome]
) -> pd.DataFrame:
    """Counts of identified effects per method and overlap with the proposed set."""
    index_map = analysis.index_map
    proposed = set(analysis.rejection.indices(index_map).tolist())
    rows = []
    for method, outcome in outcomes.items():
        kinds = [index_map.decode(int(i)).kind for i in outcome.indices]
        chosen = set(outcome.indices.tolist())
        rows.append(
            {
                "method": method,
                "main_effects": sum(k is EffectKind.MAIN for k in kinds),
                "interactions": sum(k is EffectKind.INTERACTION for k in kinds),
                "environment": sum(k is EffectKind.ENV for k in kinds),
                "overlap_with_proposed": len(chosen & proposed),
            }
        )
    return pd.DataFrame(
        rows,
        columns=[
            "method",
            "main_effects",
            "interactions",
            "environment",
            "overlap_with_proposed",
        ],
    )
