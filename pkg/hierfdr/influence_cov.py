"""Influence-function covariance of the KM-weighted estimating equations.

For sorted observations, with phi_hat_j(i) = phi_ij (y_i - phi_i^T theta_hat)
and D(y) = n - #{l : y_l <= y}:

    tau0(y)    = exp( sum_{k: y_k < y, delta_k = 0} 1 / D(y_k) )
    tau1_j(y)  = sum_{k: y_k > y, delta_k = 1} phi_hat_j(k) tau0(y_k) / D(y)
    tau2_j(y)  = sum_{k: y_k < y, delta_k = 0}
                     sum_{l: y_l > y_k, delta_l = 1} phi_hat_j(l) tau0(y_l) / D(y_k)^2
    zeta_j(i)  = phi_hat_j(i) tau0(y_i) delta_i + tau1_j(y_i)(1 - delta_i) - tau2_j(y_i)

Summands with D = 0 are skipped. Everything is evaluated with prefix and
suffix sums over the sorted order, so the cost is O(n p + n log n).
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from hierfdr.dataset import AugmentedDesign, SortedDataset
from hierfdr.exceptions import DataError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class InfluenceTable:
    """Per-observation influence values.

    Attributes:
        zeta: n x p matrix of zeta_j evaluated at each observation.
        tau0: tau0 evaluated at each observed time.
    """

    zeta: np.ndarray
    tau0: np.ndarray

    @property
    def n(self) -> int:
        return self.zeta.shape[0]


class CovarianceMode(str, Enum):
    DIAG = "diag"
    FULL = "full"


@dataclass(frozen=True)
class CovarianceEstimate:
    """Sample covariance of the influence values and the diagonal of M S M^T.

    Attributes:
        sigma: full p x p covariance, only in full mode.
        sigma_diag: variances of each zeta_j.
        lambda_diag: diagonal of Lambda = M Sigma M^T (None without M).
    """

    sigma: Optional[np.ndarray]
    sigma_diag: np.ndarray
    lambda_diag: Optional[np.ndarray]


def influence_from_scores(
    y: np.ndarray, delta: np.ndarray, scores: np.ndarray
) -> InfluenceTable:
    """Evaluate the tau/zeta displays for arbitrary score columns.

    Args:
        y: observed times in ascending order (any monotone transform works,
            only comparisons are used).
        delta: censoring indicators in the same order.
        scores: n x p matrix of phi_hat values.

    Returns:
        The influence table.

    """
    y = np.asarray(y, dtype=float)
    delta = np.asarray(delta, dtype=float)
    scores = np.asarray(scores, dtype=float)
    n = y.shape[0]

    # D(y_i) = n - #{l : y_l <= y_i}
    at_most = np.searchsorted(y, y, side="right")
    strictly_below = np.searchsorted(y, y, side="left")
    risk = (n - at_most).astype(float)
    usable = risk > 0
    inv_risk = np.divide(1.0, risk, out=np.zeros(n), where=usable)

    hazard = np.where(delta == 0, inv_risk, 0.0)
    hazard_prefix = np.concatenate([[0.0], np.cumsum(hazard)])
    tau0 = np.exp(hazard_prefix[strictly_below])

    weighted = scores * (tau0 * delta)[:, None]
    # suffix[k] = sum over sorted rows from k to the end
    suffix = np.zeros((n + 1, scores.shape[1]))
    suffix[:n] = np.cumsum(weighted[::-1], axis=0)[::-1]
    above = suffix[at_most]

    tau1 = above * inv_risk[:, None]
    jumps = above * np.where(delta == 0, inv_risk**2, 0.0)[:, None]
    jumps_prefix = np.zeros((n + 1, scores.shape[1]))
    jumps_prefix[1:] = np.cumsum(jumps, axis=0)
    tau2 = jumps_prefix[strictly_below]

    zeta = weighted + tau1 * (1.0 - delta)[:, None] - tau2
    return InfluenceTable(zeta=zeta, tau0=tau0)


def compute_influence(
    sorted_data: SortedDataset,
    theta_hat: np.ndarray,
    design: Optional[AugmentedDesign] = None,
    response: Optional[np.ndarray] = None,
) -> InfluenceTable:
    """Influence values of the weighted estimating equations at ``theta_hat``.

    Args:
        sorted_data: the sorted sample; its times define the risk sets.
        theta_hat: coefficients, length p.
        design: design to evaluate residual scores with (defaults to the
            sorted data's own design, pass the centered one in pipelines).
        response: response to use in residuals (defaults to sorted y).

    Raises:
        DataError: if ``theta_hat`` has the wrong length.

    Returns:
        The influence table.

    """
    design = design if design is not None else sorted_data.design
    y_sorted = sorted_data.dataset.y
    response = y_sorted if response is None else np.asarray(response, dtype=float)
    theta_hat = np.asarray(theta_hat, dtype=float)
    if theta_hat.shape != (design.p,):
        raise DataError(f"theta_hat has length {theta_hat.size}, expected {design.p}.")
    residual = response - design.phi @ theta_hat
    scores = design.phi * residual[:, None]
    return influence_from_scores(y_sorted, sorted_data.dataset.delta, scores)


def covariance_from_influence(
    table: InfluenceTable,
    mode: CovarianceMode = CovarianceMode.DIAG,
    m_hat: Optional[np.ndarray] = None,
) -> CovarianceEstimate:
    """Sample covariance (divisor n - 1) of the influence values.

    In diag mode the p x p covariance is never formed: the diagonal of
    M Sigma M^T is the variance of each projected influence vector
    ``(zeta_i - zeta_bar)^T m_j``.

    Args:
        table: the influence table.
        mode: ``diag`` (needs ``m_hat``) or ``full``.
        m_hat: decorrelating matrix whose rows are the m_j.

    Raises:
        DataError: for fewer than two observations or missing ``m_hat``.

    Returns:
        The covariance estimate.

    """
    n = table.n
    if n < 2:
        raise DataError("Sample covariance needs at least two observations.")
    centered = table.zeta - table.zeta.mean(axis=0)
    sigma_diag = (centered**2).sum(axis=0) / (n - 1)
    if mode is CovarianceMode.DIAG:
        if m_hat is None:
            raise DataError("Diagonal mode needs the decorrelating matrix.")
        projected = centered @ m_hat.T
        lambda_diag = (projected**2).sum(axis=0) / (n - 1)
        return CovarianceEstimate(
            sigma=None, sigma_diag=sigma_diag, lambda_diag=lambda_diag
        )
    sigma = centered.T @ centered / (n - 1)
    sigma = (sigma + sigma.T) / 2.0
    lambda_diag = None
    if m_hat is not None:
        lambda_diag = np.maximum(np.einsum("ij,jk,ik->i", m_hat, sigma, m_hat), 0.0)
    return CovarianceEstimate(
        sigma=sigma, sigma_diag=sigma_diag, lambda_diag=lambda_diag
    )
