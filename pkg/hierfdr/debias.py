"""Decorrelating matrix and the one-step debiased estimator.

Each row m_i of the decorrelating matrix solves

    min m^T G m   subject to  ||G m - e_i||_inf <= mu,
                              ||W^{1/2} Phi m||_inf <= n^{c0},

with G the weighted Gram matrix. The first constraint is handled through
the dual problem ``min 1/2 m^T G m - m_i + mu ||m||_1``, whose minimizer is
also a primal minimizer and whose KKT conditions are exactly the
l_inf box. The design constraint is checked on the returned vector; when
either check fails mu is doubled and the column solved again.
"""

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from numba import njit

from hierfdr.dataset import AugmentedDesign
from hierfdr.exceptions import ConfigError, InfeasibleProgramError
from hierfdr.km_weights import KmWeights
from hierfdr.penalized_wls import LassoFit

logger = logging.getLogger(__name__)

DEFAULT_MU_CONSTANT = 2.0
DEFAULT_C0 = 0.45
DEFAULT_QP_TOL = 1e-6
MAX_DOUBLINGS = 6
FEASIBILITY_SLACK = 1e-8
MAX_SWEEPS = 5000
DIVERGENCE_BOUND = 1e10

MATRIX_MAGIC = b"HFDRMAT1"


@dataclass(frozen=True)
class DecorrelatorColumn:
    """One solved row of the decorrelating matrix with its certificates.

    Attributes:
        m: the solution vector.
        mu_used: the l_inf radius it is feasible for.
        slack_gamma: ``||G m - e_i||_inf`` recomputed from ``m``.
        slack_design: ``||W^{1/2} Phi m||_inf`` recomputed from ``m``.
        objective: ``m^T G m``.
        retries: number of times mu was doubled.
    """

    m: np.ndarray
    mu_used: float
    slack_gamma: float
    slack_design: float
    objective: float
    retries: int


@dataclass(frozen=True)
class DebiasedFit:
    """Debiased estimate together with everything used to build it."""

    theta_d: np.ndarray
    columns: Tuple[DecorrelatorColumn, ...]
    m_hat: np.ndarray
    lasso: LassoFit
    gamma_hat: np.ndarray
    n: int
    c0: float

    @property
    def mu_max(self) -> float:
        return max(c.mu_used for c in self.columns)


def default_mu(p: int, n: int, constant: float = DEFAULT_MU_CONSTANT) -> float:
    """mu = constant * sqrt(log p / n)."""
    return constant * math.sqrt(math.log(p) / n)


def weighted_gram(design: AugmentedDesign, weights: KmWeights) -> np.ndarray:
    """Return Phi^T W Phi / n, exactly symmetric.

    Args:
        design: the (centered) design.
        weights: KM weights.

    Returns:
        The p x p weighted covariance.

    """
    phi = design.phi
    gram = (phi * weights.w[:, None]).T @ phi
    return (gram + gram.T) / 2.0


@njit(cache=True, nogil=True)
def _dual_descent(gamma, i, mu, tol, max_sweeps, m, g):
    """Coordinate descent on 1/2 m^T G m - m_i + mu ||m||_1.

    ``g`` holds G m - e_i and is kept in sync with ``m``. Returns
    (sweeps, status) with status 0 converged, 1 out of sweeps, 2 diverged.
    """
    p = gamma.shape[0]
    for sweep in range(max_sweeps):
        for j in range(p):
            gjj = gamma[j, j]
            if gjj <= 0.0:
                continue
            old = m[j]
            z = gjj * old - g[j]
            if z > mu:
                new = (z - mu) / gjj
            elif z < -mu:
                new = (z + mu) / gjj
            else:
                new = 0.0
            diff = new - old
            if diff != 0.0:
                m[j] = new
                for k in range(p):
                    g[k] += gamma[j, k] * diff
        worst = 0.0
        big = 0.0
        for j in range(p):
            if m[j] > 0.0:
                slack = abs(g[j] + mu)
            elif m[j] < 0.0:
                slack = abs(g[j] - mu)
            else:
                slack = abs(g[j]) - mu
            if slack > worst:
                worst = slack
            if abs(m[j]) > big:
                big = abs(m[j])
        if not np.isfinite(big) or big > DIVERGENCE_BOUND:
            return sweep + 1, 2
        if worst <= tol:
            return sweep + 1, 0
    return max_sweeps, 1


def _certify(
    gamma_hat: np.ndarray, root_w_phi: np.ndarray, i: int, m: np.ndarray
) -> Tuple[float, float, float]:
    residual = gamma_hat @ m
    residual[i] -= 1.0
    return (
        float(np.max(np.abs(residual))),
        float(np.max(np.abs(root_w_phi @ m))),
        float(m @ gamma_hat @ m),
    )


def _solve_column(
    gamma_hat: np.ndarray,
    root_w_phi: np.ndarray,
    i: int,
    mu: float,
    design_bound: float,
    tol: float,
) -> Optional[DecorrelatorColumn]:
    p = gamma_hat.shape[0]
    for retry in range(MAX_DOUBLINGS + 1):
        mu_try = mu * 2.0**retry
        if gamma_hat[i, i] <= 0.0 and mu_try < 1.0:
            continue
        # Solve slightly inside the box so the returned vector is feasible
        # for mu_try despite the stopping tolerance.
        margin = min(tol, mu_try) / 2.0
        m = np.zeros(p)
        g = np.zeros(p)
        g[i] = -1.0
        sweeps, status = _dual_descent(
            gamma_hat, i, mu_try - margin, margin, MAX_SWEEPS, m, g
        )
        if status != 0:
            logger.debug(
                f"Column {i}: dual descent status {status} after {sweeps} sweeps "
                f"at mu={mu_try:.4g}"
            )
            continue
        slack_gamma, slack_design, objective = _certify(gamma_hat, root_w_phi, i, m)
        if (
            slack_gamma <= mu_try + FEASIBILITY_SLACK
            and slack_design <= design_bound + FEASIBILITY_SLACK
        ):
            if retry:
                logger.warning(f"Column {i}: mu enlarged to {mu_try:.4g}")
            return DecorrelatorColumn(
                m=m,
                mu_used=mu_try,
                slack_gamma=slack_gamma,
                slack_design=slack_design,
                objective=objective,
                retries=retry,
            )
    return None


def _check_program(mu: float, c0: float) -> None:
    if not mu > 0:
        raise ConfigError(f"mu must be positive, got {mu}.")
    if not 0.25 < c0 < 0.5:
        raise ConfigError(f"c0 must lie in (1/4, 1/2), got {c0}.")


def solve_decorrelator_column(
    gamma_hat: np.ndarray,
    design: AugmentedDesign,
    weights: KmWeights,
    i: int,
    mu: float,
    c0: float = DEFAULT_C0,
    tol: float = DEFAULT_QP_TOL,
) -> DecorrelatorColumn:
    """Solve the decorrelating program for one column.

    Args:
        gamma_hat: weighted Gram matrix.
        design: the design it was built from.
        weights: KM weights.
        i: column index.
        mu: l_inf radius; doubled up to six times on infeasibility.
        c0: exponent of the design bound n^{c0}, in (1/4, 1/2).
        tol: dual KKT tolerance.

    Raises:
        ConfigError: for mu <= 0 or c0 outside (1/4, 1/2).
        InfeasibleProgramError: if every enlarged radius fails.

    Returns:
        The solution with slacks recomputed from the returned vector.

    """
    _check_program(mu, c0)
    root_w_phi = design.phi * np.sqrt(weights.rescaled)[:, None]
    column = _solve_column(
        np.ascontiguousarray(gamma_hat), root_w_phi, i, mu, design.n**c0, tol
    )
    if column is None:
        raise InfeasibleProgramError(
            f"Decorrelating program for column {i} infeasible after "
            f"{MAX_DOUBLINGS} doublings of mu={mu:.4g}.",
            columns=[i],
        )
    return column


def debias_estimate(
    lasso: LassoFit,
    design: AugmentedDesign,
    y: np.ndarray,
    weights: KmWeights,
    mu: Optional[float] = None,
    mu_constant: float = DEFAULT_MU_CONSTANT,
    c0: float = DEFAULT_C0,
    tol: float = DEFAULT_QP_TOL,
    n_jobs: int = 1,
) -> DebiasedFit:
    """Build the decorrelating matrix and the debiased estimator.

    theta_d = theta_hat + M Phi^T W (y - Phi theta_hat) / n, where row i of M
    is the solution of the i-th decorrelating program.

    Args:
        lasso: a converged Lasso fit.
        design: the design the fit used.
        y: the response the fit used.
        weights: KM weights.
        mu: explicit radius; defaults to ``mu_constant * sqrt(log p / n)``.
        mu_constant: constant of the default radius.
        c0: design-bound exponent.
        tol: dual KKT tolerance.
        n_jobs: columns solved concurrently.

    Raises:
        InfeasibleProgramError: listing every failed column.

    Returns:
        The debiased fit.

    """
    n, p = design.phi.shape
    if mu is None:
        mu = default_mu(p, n, mu_constant)
    _check_program(mu, c0)
    gamma_hat = np.ascontiguousarray(weighted_gram(design, weights))
    root_w_phi = design.phi * np.sqrt(weights.rescaled)[:, None]
    bound = n**c0
    logger.info(f"Solving {p} decorrelating programs (mu={mu:.4g}, c0={c0})")
    solved: List[Optional[DecorrelatorColumn]] = Parallel(
        n_jobs=n_jobs, prefer="threads"
    )(
        delayed(_solve_column)(gamma_hat, root_w_phi, i, mu, bound, tol)
        for i in range(p)
    )
    failed = [i for i, column in enumerate(solved) if column is None]
    if failed:
        raise InfeasibleProgramError(
            f"{len(failed)} decorrelating program(s) infeasible: {failed[:20]}",
            columns=failed,
        )
    columns = tuple(c for c in solved if c is not None)
    m_hat = np.vstack([c.m for c in columns])
    y = np.asarray(y, dtype=float)
    score = design.phi.T @ (weights.w * (y - design.phi @ lasso.theta_hat))
    theta_d = lasso.theta_hat + m_hat @ score
    enlarged = sum(1 for c in columns if c.retries)
    if enlarged:
        logger.warning(f"{enlarged} column(s) needed a larger mu")
    return DebiasedFit(
        theta_d=theta_d,
        columns=columns,
        m_hat=m_hat,
        lasso=lasso,
        gamma_hat=gamma_hat,
        n=n,
        c0=c0,
    )


@dataclass(frozen=True)
class BiasDecomposition:
    """sqrt(n)(theta_d - theta0) = v - delta, available when theta0 is known.

    Attributes:
        v: noise term M Phi^T W eps / sqrt(n).
        delta: bias term sqrt(n) (M G - I)(theta_hat - theta0).
        bound: sqrt(n) * mu_max * ||theta_hat - theta0||_1, which bounds
            ``||delta||_inf``.
    """

    v: np.ndarray
    delta: np.ndarray
    bound: float


def bias_decomposition(
    fit: DebiasedFit,
    design: AugmentedDesign,
    y: np.ndarray,
    weights: KmWeights,
    theta0: np.ndarray,
) -> BiasDecomposition:
    """Split the debiased error into its noise and bias parts."""
    root_n = math.sqrt(fit.n)
    eps = np.asarray(y, dtype=float) - design.phi @ theta0
    v = fit.m_hat @ (design.phi.T @ (weights.w * eps)) * root_n
    err = fit.lasso.theta_hat - theta0
    delta = root_n * (fit.m_hat @ (fit.gamma_hat @ err) - err)
    return BiasDecomposition(
        v=v, delta=delta, bound=root_n * fit.mu_max * float(np.abs(err).sum())
    )


def dump_matrices(fit: DebiasedFit, target: Union[str, Path, None] = None) -> bytes:
    """Serialize G and M for debugging.

    Layout: 8-byte magic, little-endian int64 p and n, then G and M as
    row-major float64.

    Args:
        fit: the debiased fit.
        target: optional file to write the bytes to.

    Returns:
        The serialized bytes.

    """
    p = fit.gamma_hat.shape[0]
    payload = (
        MATRIX_MAGIC
        + struct.pack("<qq", p, fit.n)
        + np.ascontiguousarray(fit.gamma_hat, dtype="<f8").tobytes()
        + np.ascontiguousarray(fit.m_hat, dtype="<f8").tobytes()
    )
    if target is not None:
        Path(target).write_bytes(payload)
    return payload


def load_matrices(payload: bytes) -> Tuple[np.ndarray, np.ndarray, int]:
    """Inverse of :func:`dump_matrices`; returns (G, M, n)."""
    if payload[:8] != MATRIX_MAGIC:
        raise ValueError("Not a decorrelating-matrix dump.")
    p, n = struct.unpack("<qq", payload[8:24])
    size = p * p * 8
    gamma = np.frombuffer(payload[24 : 24 + size], dtype="<f8").reshape(p, p)
    m_hat = np.frombuffer(payload[24 + size : 24 + 2 * size], dtype="<f8").reshape(p, p)
    return gamma, m_hat, n
