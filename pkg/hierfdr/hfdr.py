"""Test statistics, hierarchical FDR thresholding and comparison procedures.

Column indices are 0-based throughout; the serialized rejection report
uses 1-based main-effect and environment indices.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special, stats as sps
from statsmodels.stats.multitest import multipletests

from hierfdr.dataset import AugmentedDesign, IndexMap, SortedDataset, center_columns
from hierfdr.debias import DebiasedFit
from hierfdr.exceptions import ConfigError, DataError
from hierfdr.influence_cov import CovarianceEstimate, influence_from_scores
from hierfdr.km_weights import KmWeights, compute_km_weights
from hierfdr.penalized_wls import LassoFit

logger = logging.getLogger(__name__)

# Unadjusted two-sided 5% rule used by the debiased-Lasso selection baseline.
DLASSO_FLOOR = float(sps.norm.ppf(0.975))

DEGENERATE_VARIANCE = 1e-12


@dataclass(frozen=True)
class TestStatistics:
    """Standardized debiased estimates.

    Attributes:
        u: ``sqrt(n) theta_d / sqrt(Lambda_jj)``; NaN where invalid.
        valid: False where ``Lambda_jj`` is not positive and finite.
        n: sample size.
        index_map: layout of the columns, when known.
    """

    __test__ = False

    u: np.ndarray
    valid: np.ndarray
    n: int
    index_map: Optional[IndexMap] = None

    @property
    def p(self) -> int:
        return self.u.shape[0]

    @property
    def magnitudes(self) -> np.ndarray:
        """|u| with invalid entries at -inf, so no threshold t >= 0 keeps them."""
        return np.where(self.valid, np.abs(np.nan_to_num(self.u)), -np.inf)

    @classmethod
    def from_arrays(
        cls,
        theta_d: np.ndarray,
        lambda_diag: np.ndarray,
        n: int,
        index_map: Optional[IndexMap] = None,
    ) -> "TestStatistics":
        """Build statistics from a debiased estimate and the diagonal of Lambda.

        Raises:
            DataError: if the two vectors differ in length.

        """
        theta_d = np.asarray(theta_d, dtype=float)
        lambda_diag = np.asarray(lambda_diag, dtype=float)
        if theta_d.shape != lambda_diag.shape:
            raise DataError(
                f"theta_d has length {theta_d.size}, Lambda diagonal "
                f"{lambda_diag.size}."
            )
        valid = np.isfinite(lambda_diag) & (lambda_diag > 0) & np.isfinite(theta_d)
        u = np.full(theta_d.shape, np.nan)
        u[valid] = math.sqrt(n) * theta_d[valid] / np.sqrt(lambda_diag[valid])
        if not valid.all():
            logger.warning(
                f"{int((~valid).sum())} statistic(s) invalid (non-positive variance); "
                "they are never rejected"
            )
        return cls(u=u, valid=valid, n=n, index_map=index_map)


def test_statistics(
    debiased: DebiasedFit,
    cov: CovarianceEstimate,
    index_map: Optional[IndexMap] = None,
) -> TestStatistics:
    """U_j = sqrt(n) theta_d_j / sqrt(Lambda_jj).

    Args:
        debiased: the debiased fit.
        cov: covariance estimate carrying the diagonal of Lambda.
        index_map: optional column layout to attach.

    Raises:
        DataError: if the covariance has no Lambda diagonal or lengths differ.

    Returns:
        The statistics.

    """
    if cov.lambda_diag is None:
        raise DataError("Covariance estimate has no Lambda diagonal.")
    return TestStatistics.from_arrays(
        debiased.theta_d, cov.lambda_diag, debiased.n, index_map
    )


def gaussian_tail(t: float) -> float:
    """G(t) = 2 (1 - Phi(t)), evaluated as erfc(t / sqrt 2).

    Raises:
        ValueError: for negative ``t``.

    """
    if t < 0:
        raise ValueError(f"Gaussian tail needs t >= 0, got {t}.")
    return float(special.erfc(t / math.sqrt(2.0)))


def _tails(t: np.ndarray) -> np.ndarray:
    return special.erfc(np.asarray(t, dtype=float) / math.sqrt(2.0))


def critical_level(p: int) -> float:
    """Upper end of the threshold search, sqrt(2 log p - 2 log log p).

    Raises:
        DataError: for p < 3, where log log p is not positive.

    """
    if p < 3:
        raise DataError(f"Threshold search needs p >= 3, got p={p}.")
    return math.sqrt(2.0 * math.log(p) - 2.0 * math.log(math.log(p)))


def fallback_level(p: int) -> float:
    return math.sqrt(2.0 * math.log(p))


@dataclass(frozen=True)
class RejectionResult:
    """Hierarchically consistent rejections.

    Attributes:
        t0: threshold applied; None for procedures without one.
        a1: rejected main effects (0-based j).
        a2: rejected interactions per main effect, j -> tuple of k.
        fallback_used: True when no candidate met the FDR condition.
    """

    t0: Optional[float]
    a1: Tuple[int, ...]
    a2: Dict[int, Tuple[int, ...]] = field(default_factory=dict)
    fallback_used: bool = False

    def __post_init__(self) -> None:
        orphans = [j for j, ks in self.a2.items() if ks and j not in self.a1]
        if orphans:
            raise ValueError(
                f"Interactions rejected without their main effect: {orphans}"
            )

    @property
    def r(self) -> int:
        return len(self.a1) + sum(len(ks) for ks in self.a2.values())

    def interactions(self) -> List[Tuple[int, int]]:
        return [(j, k) for j in sorted(self.a2) for k in self.a2[j]]

    def indices(self, index_map: IndexMap) -> np.ndarray:
        """Sorted column indices of every rejected effect."""
        cols = [index_map.main_index(j) for j in self.a1]
        cols += [index_map.interaction_index(j, k) for j, k in self.interactions()]
        return np.array(sorted(cols), dtype=int)

    def to_dict(self, env_estimates: Sequence[Dict[str, Any]] = ()) -> Dict[str, Any]:
        """JSON-ready form with 1-based indices."""
        return {
            "t0": self.t0,
            "fallback_used": self.fallback_used,
            "R": self.r,
            "main_effects": [j + 1 for j in self.a1],
            "interactions": [{"j": j + 1, "k": k + 1} for j, k in self.interactions()],
            "env_estimates": list(env_estimates),
        }


@dataclass(frozen=True)
class Selection:
    """Flat (non-hierarchical) selection of column indices."""

    indices: np.ndarray
    t0: Optional[float] = None
    fallback_used: bool = False

    @property
    def r(self) -> int:
        return int(self.indices.size)


def _hierarchical_magnitudes(stats: TestStatistics, index_map: IndexMap) -> np.ndarray:
    """Magnitudes entering R(t): |U_j| for mains, min(|U_j|, |U_jk|) otherwise."""
    a = stats.magnitudes
    d, q = index_map.d, index_map.q
    inter = a[index_map.interaction_slice].reshape(d, q)
    inter = np.minimum(inter, a[:d, None])
    return np.concatenate([a[:d], inter.ravel()])


def _search_threshold(
    magnitudes: np.ndarray,
    counted: np.ndarray,
    p: int,
    alpha: float,
    null_count,
) -> Tuple[float, bool]:
    """Smallest candidate t in [0, t_p] with null_count(G(t)) / (R(t) v 1) <= alpha."""
    t_p = critical_level(p)
    if alpha == 0:
        logger.warning("alpha = 0: the threshold condition cannot hold")
        return math.inf, True
    finite = magnitudes[np.isfinite(magnitudes)]
    candidates = np.unique(
        np.concatenate([[0.0], finite[(finite >= 0) & (finite <= t_p)], [t_p]])
    )
    ordered = np.sort(counted)
    r = ordered.size - np.searchsorted(ordered, candidates, side="left")
    ratio = null_count(_tails(candidates)) / np.maximum(r, 1)
    hits = np.flatnonzero(ratio <= alpha)
    if hits.size:
        return float(candidates[hits[0]]), False
    t0 = fallback_level(p)
    logger.warning(
        f"No threshold met the FDR condition; using sqrt(2 log p) = {t0:.4f}"
    )
    return t0, True


def _check_alpha(alpha: float) -> None:
    if not 0 <= alpha < 1:
        raise ConfigError(f"alpha must lie in [0, 1), got {alpha}.")


def reject_at_threshold(
    stats: TestStatistics, index_map: IndexMap, t0: float, fallback_used: bool = False
) -> RejectionResult:
    """Apply a threshold with the hierarchy: interactions only under kept mains."""
    a = stats.magnitudes
    a1 = tuple(int(j) for j in np.flatnonzero(a[: index_map.d] >= t0))
    a2: Dict[int, Tuple[int, ...]] = {}
    for j in a1:
        block = np.asarray(index_map.interaction_block(j))
        a2[j] = tuple(int(k) for k in np.flatnonzero(a[block] >= t0))
    return RejectionResult(t0=t0, a1=a1, a2=a2, fallback_used=fallback_used)


def hierarchical_threshold(
    stats: TestStatistics, d: int, q: int, alpha: float
) -> RejectionResult:
    """Hierarchical FDR thresholding.

    t0 is the smallest candidate t in {0} U {|U_j| <= t_p} U {t_p} with
    ``d G(t) (1 + q G(t)) / (R(t) v 1) <= alpha``, where R(t) counts mains
    with |U_j| >= t and interactions with both |U_j| and |U_jk| >= t.
    Environment effects never enter R(t).

    Args:
        stats: test statistics of length p = d + (d + 1) q.
        d: number of high-dimensional covariates.
        q: number of low-dimensional covariates.
        alpha: target FDR level in [0, 1); 0 rejects nothing.

    Raises:
        DataError: if p disagrees with the statistics or p < 3.
        ConfigError: for alpha outside [0, 1).

    Returns:
        The rejections.

    """
    index_map = IndexMap(d=d, q=q)
    if stats.p != index_map.p:
        raise DataError(f"Statistics have length {stats.p}, expected p={index_map.p}.")
    _check_alpha(alpha)
    counted = _hierarchical_magnitudes(stats, index_map)
    t0, fallback = _search_threshold(
        stats.magnitudes,
        counted,
        index_map.p,
        alpha,
        lambda g: d * g * (1.0 + q * g),
    )
    result = reject_at_threshold(stats, index_map, t0, fallback)
    logger.info(
        f"Hierarchical threshold t0={t0:.4f}: {len(result.a1)} main effect(s), "
        f"{result.r - len(result.a1)} interaction(s)"
    )
    return result


def baseline_fcd(stats: TestStatistics, alpha: float) -> Selection:
    """Non-hierarchical threshold: smallest t with p G(t) / (R(t) v 1) <= alpha.

    Raises:
        DataError: for p < 3.
        ConfigError: for alpha outside [0, 1).

    """
    _check_alpha(alpha)
    p = stats.p
    a = stats.magnitudes
    t0, fallback = _search_threshold(a, a, p, alpha, lambda g: p * g)
    return Selection(indices=np.flatnonzero(a >= t0), t0=t0, fallback_used=fallback)


def _check_pvalues(pvalues: np.ndarray) -> np.ndarray:
    pvalues = np.asarray(pvalues, dtype=float)
    if np.any(~np.isfinite(pvalues)) or np.any((pvalues < 0) | (pvalues > 1)):
        logger.error("p-values outside [0, 1] passed to a BH procedure")
        raise DataError("p-values must lie in [0, 1].")
    return pvalues


def _bh_reject(pvalues: np.ndarray, alpha: float) -> np.ndarray:
    if pvalues.size == 0:
        return np.array([], dtype=int)
    reject = multipletests(pvalues, alpha=alpha, method="fdr_bh")[0]
    return np.flatnonzero(reject)


def baseline_bh(pvalues: np.ndarray, alpha: float) -> Selection:
    """Benjamini-Hochberg step-up at level alpha.

    Raises:
        DataError: for p-values outside [0, 1].

    """
    _check_alpha(alpha)
    return Selection(indices=_bh_reject(_check_pvalues(pvalues), alpha))


class Stage2Policy(str, Enum):
    POOLED = "pooled"
    PER_FAMILY = "per_family"


def baseline_bh_hierarchy(
    pvalues: np.ndarray,
    d: int,
    q: int,
    alpha: float,
    stage2: Union[Stage2Policy, str] = Stage2Policy.POOLED,
) -> RejectionResult:
    """Two-stage BH respecting the hierarchy.

    Main effects are BH-adjusted at level alpha. Interactions are tested only
    under rejected mains, either by one BH over the pooled interaction
    p-values (``pooled``) or by a separate BH per main effect
    (``per_family``).

    Raises:
        DataError: for p-values outside [0, 1] or a length other than p.

    """
    _check_alpha(alpha)
    index_map = IndexMap(d=d, q=q)
    pvalues = _check_pvalues(pvalues)
    if pvalues.size != index_map.p:
        raise DataError(f"Got {pvalues.size} p-values, expected p={index_map.p}.")
    stage2 = Stage2Policy(stage2)
    a1 = tuple(int(j) for j in _bh_reject(pvalues[:d], alpha))
    a2: Dict[int, Tuple[int, ...]] = {}
    if stage2 is Stage2Policy.POOLED and a1:
        cols = np.concatenate([np.asarray(index_map.interaction_block(j)) for j in a1])
        kept = set(cols[_bh_reject(pvalues[cols], alpha)].tolist())
        for j in a1:
            block = index_map.interaction_block(j)
            a2[j] = tuple(k for k, col in enumerate(block) if col in kept)
    else:
        for j in a1:
            block = np.asarray(index_map.interaction_block(j))
            a2[j] = tuple(int(k) for k in _bh_reject(pvalues[block], alpha))
    return RejectionResult(t0=None, a1=a1, a2=a2)


@dataclass(frozen=True)
class MarginalTests:
    """Univariable KM-weighted least-squares fits, one per column.

    Attributes:
        slopes: marginal slope of each column.
        u: standardized slopes.
        pvalues: two-sided normal p-values.
        degenerate: True where the column has no weighted variation.
    """

    slopes: np.ndarray
    u: np.ndarray
    pvalues: np.ndarray
    degenerate: np.ndarray


def marginal_wls_pvalues(
    sorted_data: SortedDataset,
    weights: Optional[KmWeights] = None,
    design: Optional[AugmentedDesign] = None,
    response: Optional[np.ndarray] = None,
) -> MarginalTests:
    """Marginal p-values for every column of the design.

    Each column l is regressed alone on the response by KM-weighted least
    squares after weighted centering. The slope's variance uses the same
    influence functions as the joint estimator with a single covariate:
    ``var(zeta_l) / Gamma_ll^2``.

    Args:
        sorted_data: the sorted sample.
        weights: KM weights (computed when omitted).
        design: centered design (centered from ``sorted_data`` when omitted).
        response: centered response matching ``design``.

    Returns:
        Slopes, statistics and p-values; degenerate columns get p-value 1.

    """
    weights = weights if weights is not None else compute_km_weights(sorted_data)
    if design is None or response is None:
        design, response = center_columns(
            sorted_data.design, weights.w, sorted_data.dataset.y
        )
    phi = design.phi
    n = phi.shape[0]
    w = weights.w
    gamma_diag = w @ phi**2
    scale = max(float(gamma_diag.max(initial=0.0)), 1.0)
    degenerate = gamma_diag <= DEGENERATE_VARIANCE * scale
    safe = np.where(degenerate, 1.0, gamma_diag)
    slopes = np.where(degenerate, 0.0, (phi.T @ (w * response)) / safe)

    scores = phi * (response[:, None] - phi * slopes)
    sorted_y, sorted_delta = sorted_data.dataset.y, sorted_data.dataset.delta
    table = influence_from_scores(sorted_y, sorted_delta, scores)
    centered = table.zeta - table.zeta.mean(axis=0)
    variance = (centered**2).sum(axis=0) / (n - 1) / safe**2

    u = np.zeros_like(slopes)
    positive = (variance > 0) & ~degenerate
    u[positive] = math.sqrt(n) * slopes[positive] / np.sqrt(variance[positive])
    pvalues = np.where(positive, _tails(np.abs(u)), 1.0)
    exact = ~positive & ~degenerate & (slopes != 0)
    pvalues[exact] = 0.0
    u[exact] = np.sign(slopes[exact]) * np.inf
    if degenerate.any():
        logger.warning(
            f"{int(degenerate.sum())} column(s) without weighted variation; "
            "their marginal p-value is 1"
        )
    return MarginalTests(slopes=slopes, u=u, pvalues=pvalues, degenerate=degenerate)


class VsKind(str, Enum):
    LASSO = "lasso"
    MCP = "mcp"
    DLASSO = "dlasso"


def baseline_vs(
    fit: Union[LassoFit, TestStatistics],
    kind: Union[VsKind, str],
    floor: float = DLASSO_FLOOR,
) -> Selection:
    """Selection by penalized estimation alone, without FDR control.

    Lasso and MCP keep the nonzero support of their fit. The debiased Lasso
    keeps the coordinates whose statistic clears ``floor`` in absolute value.

    Raises:
        ConfigError: if ``fit`` does not match ``kind``.

    """
    kind = VsKind(kind)
    if kind is VsKind.DLASSO:
        if not isinstance(fit, TestStatistics):
            raise ConfigError("The debiased-Lasso selection needs test statistics.")
        return Selection(indices=np.flatnonzero(fit.magnitudes >= floor), t0=floor)
    if not isinstance(fit, LassoFit):
        raise ConfigError(f"The {kind.value} selection needs a penalized fit.")
    return Selection(indices=fit.support)
