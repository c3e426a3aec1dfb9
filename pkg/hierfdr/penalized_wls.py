"""KM-weighted least squares with Lasso or MCP penalties.

The solver is cyclic coordinate descent on internally standardized columns
(unit weighted norm). Penalty levels are rescaled per column so that the
objective being minimized is always the one stated on the original scale:

    (1 / 2n) || W^{1/2} (y - Phi theta) ||^2 + sum_j rho(theta_j)
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from numba import njit
from sklearn.model_selection import KFold

from hierfdr.dataset import AugmentedDesign
from hierfdr.exceptions import ConfigError, ConvergenceError, DataError
from hierfdr.km_weights import KmWeights, km_jump_weights

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITER = 100_000
DEFAULT_MCP_XI = 3.0
ACTIVE_SWEEPS_PER_FULL = 10


class PenaltyKind(str, Enum):
    LASSO = "lasso"
    MCP = "mcp"


@dataclass(frozen=True)
class PenaltySpec:
    """Penalty family and its parameters.

    Attributes:
        kind: Lasso or MCP.
        lam: penalty level, non-negative.
        xi: MCP concavity parameter, must exceed one (ignored by the Lasso).
    """

    kind: PenaltyKind
    lam: float
    xi: float = DEFAULT_MCP_XI

    def __post_init__(self) -> None:
        if not self.lam >= 0:
            raise ConfigError(f"Penalty level must be non-negative, got {self.lam}.")
        if self.kind is PenaltyKind.MCP and not self.xi > 1:
            raise ConfigError(f"MCP needs xi > 1, got {self.xi}.")

    @classmethod
    def lasso(cls, lam: float) -> "PenaltySpec":
        return cls(PenaltyKind.LASSO, lam)

    @classmethod
    def mcp(cls, lam: float, xi: float = DEFAULT_MCP_XI) -> "PenaltySpec":
        return cls(PenaltyKind.MCP, lam, xi)

    def value(self, theta: np.ndarray) -> float:
        """Penalty evaluated at ``theta``."""
        a = np.abs(theta)
        if self.kind is PenaltyKind.LASSO:
            return float(self.lam * a.sum())
        knot = self.lam * self.xi
        inner = self.lam * a - a**2 / (2 * self.xi)
        return float(np.where(a <= knot, inner, 0.5 * self.lam * knot).sum())


@dataclass(frozen=True)
class LassoFit:
    """Result of a penalized weighted least-squares fit.

    Attributes:
        theta_hat: coefficient vector on the original column scale.
        lam: penalty level used.
        objective: penalized objective at ``theta_hat``.
        kkt_violation: largest subgradient slack at ``theta_hat``.
        n_iter: coordinate-descent sweeps performed.
        penalty: the full penalty specification.
        converged: False only for partial fits carried by errors.
    """

    theta_hat: np.ndarray
    lam: float
    objective: float
    kkt_violation: float
    n_iter: int
    penalty: PenaltySpec
    converged: bool = True

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.theta_hat != 0)


@njit(cache=True, nogil=True)
def _mcp_value(b, lam, xi):
    ab = abs(b)
    if ab <= lam * xi:
        return lam * ab - ab * ab / (2.0 * xi)
    return 0.5 * lam * lam * xi


@njit(cache=True, nogil=True)
def _threshold(z, lam, xi, mcp):
    az = abs(z)
    if not mcp:
        if az <= lam:
            return 0.0
        return z - lam if z > 0 else z + lam
    if xi > 1.0:
        if az > lam * xi:
            return z
        if az <= lam:
            return 0.0
        shrunk = (az - lam) / (1.0 - 1.0 / xi)
        return shrunk if z > 0 else -shrunk
    # Concave univariate problem: the minimum sits at 0, the knot or z.
    best = 0.0
    best_val = 0.5 * z * z
    knot = lam * xi if z > 0 else -lam * xi
    val = 0.5 * (knot - z) ** 2 + _mcp_value(knot, lam, xi)
    if val < best_val:
        best = knot
        best_val = val
    val = _mcp_value(z, lam, xi)
    if val < best_val:
        best = z
    return best


@njit(cache=True, nogil=True)
def _sweep(x, w, resid, beta, lam, xi, usable, mcp, active_only):
    n, p = x.shape
    max_change = 0.0
    for j in range(p):
        if not usable[j]:
            continue
        bj = beta[j]
        if active_only and bj == 0.0:
            continue
        z = bj
        for i in range(n):
            z += w[i] * x[i, j] * resid[i]
        new = _threshold(z, lam[j], xi[j], mcp)
        diff = new - bj
        if diff != 0.0:
            for i in range(n):
                resid[i] -= x[i, j] * diff
            beta[j] = new
            if abs(diff) > max_change:
                max_change = abs(diff)
    return max_change


@njit(cache=True, nogil=True)
def _coordinate_descent(x, w, resid, beta, lam, xi, usable, mcp, tol, max_sweeps):
    sweeps = 0
    while sweeps < max_sweeps:
        change = _sweep(x, w, resid, beta, lam, xi, usable, mcp, False)
        sweeps += 1
        if change < tol * (1.0 + np.max(np.abs(beta))):
            return sweeps, True
        inner = 0
        while inner < ACTIVE_SWEEPS_PER_FULL and sweeps < max_sweeps:
            change = _sweep(x, w, resid, beta, lam, xi, usable, mcp, True)
            sweeps += 1
            inner += 1
            if change < tol * (1.0 + np.max(np.abs(beta))):
                break
    return sweeps, False


def kkt_violation(
    phi: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    penalty: PenaltySpec,
    theta: np.ndarray,
) -> float:
    """Largest violation of the stationarity conditions at ``theta``.

    The gradient of the smooth part is ``-Phi^T W (y - Phi theta) / n``.
    Active coordinates must cancel the penalty derivative, inactive ones
    must stay within the penalty level.

    Args:
        phi: n x p design.
        y: response.
        w: KM weights (the rescaled W divided by n).
        penalty: the penalty.
        theta: candidate coefficients.

    Returns:
        The maximum absolute slack.

    """
    grad = -(phi.T @ (w * (y - phi @ theta)))
    active = theta != 0
    if penalty.kind is PenaltyKind.LASSO:
        slope = penalty.lam * np.sign(theta)
    else:
        slope = np.sign(theta) * np.maximum(
            penalty.lam - np.abs(theta) / penalty.xi, 0.0
        )
    slack = np.where(
        active,
        np.abs(grad + slope),
        np.maximum(np.abs(grad) - penalty.lam, 0.0),
    )
    return float(slack.max()) if slack.size else 0.0


def penalized_objective(
    phi: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    penalty: PenaltySpec,
    theta: np.ndarray,
) -> float:
    """Evaluate (1/2n)||W^{1/2}(y - Phi theta)||^2 + penalty(theta) from scratch."""
    r = y - phi @ theta
    return float(0.5 * (w @ r**2) + penalty.value(theta))


@dataclass
class _ArrayFit:
    theta: np.ndarray
    n_iter: int
    converged: bool
    kkt: float


def _fit_arrays(
    phi: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    penalty: PenaltySpec,
    tol: float,
    max_iter: int,
    init: Optional[np.ndarray] = None,
) -> _ArrayFit:
    rows = w > 0
    xs = phi[rows]
    ws = np.ascontiguousarray(w[rows])
    ys = y[rows]
    p = phi.shape[1]

    scale = np.sqrt(ws @ xs**2)
    usable = scale > 1e-12 * max(float(scale.max(initial=0.0)), 1.0)
    safe = np.where(usable, scale, 1.0)
    x_std = np.asfortranarray(xs / safe)
    lam = np.where(usable, penalty.lam / safe, 0.0)
    xi = np.where(usable, penalty.xi * safe**2, penalty.xi)
    mcp = penalty.kind is PenaltyKind.MCP

    beta = np.zeros(p) if init is None else np.where(usable, init * safe, 0.0)
    resid = ys - x_std @ beta

    cd_tol = tol
    sweeps = 0
    while True:
        done, converged = _coordinate_descent(
            x_std, ws, resid, beta, lam, xi, usable, mcp, cd_tol, max_iter - sweeps
        )
        sweeps += int(done)
        theta = np.where(usable, beta / safe, 0.0)
        kkt = kkt_violation(phi, y, w, penalty, theta)
        if converged and kkt <= tol:
            return _ArrayFit(theta, sweeps, True, kkt)
        if not converged or sweeps >= max_iter or cd_tol < 1e-15:
            return _ArrayFit(theta, sweeps, False, kkt)
        logger.debug(f"KKT slack {kkt:.3e} above {tol:.1e}; tightening sweeps")
        cd_tol /= 10.0


def _fit(
    design: AugmentedDesign,
    y: np.ndarray,
    weights: KmWeights,
    penalty: PenaltySpec,
    tol: float,
    max_iter: int,
    init: Optional[np.ndarray],
) -> LassoFit:
    if not tol > 0:
        raise ConfigError(f"Solver tolerance must be positive, got {tol}.")
    phi, w = design.phi, weights.w
    y = np.asarray(y, dtype=float)
    result = _fit_arrays(phi, y, w, penalty, tol, int(max_iter), init)
    fit = LassoFit(
        theta_hat=result.theta,
        lam=penalty.lam,
        objective=penalized_objective(phi, y, w, penalty, result.theta),
        kkt_violation=result.kkt,
        n_iter=result.n_iter,
        penalty=penalty,
        converged=result.converged,
    )
    if not result.converged:
        raise ConvergenceError(
            f"{penalty.kind.value} fit at lambda={penalty.lam:.4g} did not converge "
            f"after {result.n_iter} sweeps (KKT slack {result.kkt:.3e}).",
            partial=fit,
            kkt_violation=result.kkt,
        )
    logger.debug(
        f"{penalty.kind.value} fit: lambda={penalty.lam:.4g}, {result.n_iter} sweeps, "
        f"{fit.support.size} nonzero, KKT slack {result.kkt:.2e}"
    )
    return fit


def fit_lasso(
    design: AugmentedDesign,
    y: np.ndarray,
    weights: KmWeights,
    penalty: PenaltySpec,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    init: Optional[np.ndarray] = None,
) -> LassoFit:
    """Solve the Lasso-penalized KM-weighted least-squares problem.

    Args:
        design: (centered) augmented design, rows in sorted order.
        y: response aligned with the design.
        weights: KM weights of the sorted sample.
        penalty: a Lasso penalty.
        tol: convergence and KKT tolerance.
        max_iter: maximum number of coordinate sweeps.
        init: optional warm start.

    Raises:
        ConfigError: if the penalty is not a Lasso or tol is not positive.
        ConvergenceError: if the sweeps run out; carries the partial fit.

    Returns:
        The fit with its KKT certificate.

    """
    if penalty.kind is not PenaltyKind.LASSO:
        raise ConfigError("fit_lasso needs a Lasso penalty.")
    return _fit(design, y, weights, penalty, tol, max_iter, init)


def fit_mcp(
    design: AugmentedDesign,
    y: np.ndarray,
    weights: KmWeights,
    penalty: PenaltySpec,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    init: Optional[np.ndarray] = None,
) -> LassoFit:
    """Solve the MCP-penalized problem to a stationary point.

    Same arguments and errors as :func:`fit_lasso`, with an MCP penalty.
    """
    if penalty.kind is not PenaltyKind.MCP:
        raise ConfigError("fit_mcp needs an MCP penalty.")
    return _fit(design, y, weights, penalty, tol, max_iter, init)


@dataclass(frozen=True)
class FixedRate:
    """lambda = c * sqrt(log p / n)."""

    c: float = 1.0


@dataclass(frozen=True)
class CrossValidate:
    """K-fold cross-validation over a geometric grid."""

    folds: int = 10
    grid_size: int = 100
    seed: Optional[int] = 0


LambdaMode = Union[FixedRate, CrossValidate]


def parse_lambda_mode(text: str, folds: int = 10, grid_size: int = 100) -> LambdaMode:
    """Parse ``cv`` or ``fixed:<c>``.

    Raises:
        ConfigError: on anything else.

    """
    text = text.strip().lower()
    if text == "cv":
        return CrossValidate(folds=folds, grid_size=grid_size)
    if text.startswith("fixed:"):
        try:
            return FixedRate(float(text.split(":", 1)[1]))
        except ValueError:
            pass
    raise ConfigError(f"Lambda mode must be 'cv' or 'fixed:<c>', got {text!r}.")


def lambda_max(design: AugmentedDesign, y: np.ndarray, weights: KmWeights) -> float:
    """Smallest penalty level at which the Lasso solution is zero."""
    return float(np.max(np.abs(design.phi.T @ (weights.w * y))))


def lambda_grid(
    design: AugmentedDesign,
    y: np.ndarray,
    weights: KmWeights,
    size: int = 100,
    decades: float = 4.0,
) -> np.ndarray:
    """Geometric grid from lambda_max down ``decades`` orders of magnitude."""
    top = lambda_max(design, y, weights)
    return top * np.logspace(0.0, -decades, size)


def _fold_errors(
    fold: int,
    train: np.ndarray,
    test: np.ndarray,
    phi: np.ndarray,
    y: np.ndarray,
    delta: np.ndarray,
    grid: np.ndarray,
    tol: float,
    max_iter: int,
) -> np.ndarray:
    w_train = km_jump_weights(delta[train])
    if not np.any(w_train > 0):
        raise DataError(f"Cross-validation fold {fold}: training part has no events.")
    w_test = km_jump_weights(delta[test])
    # Centered with training-fold weights only.
    x_mean = w_train @ phi[train] / w_train.sum()
    y_mean = w_train @ y[train] / w_train.sum()
    phi_train, y_train = phi[train] - x_mean, y[train] - y_mean
    phi_test, y_test = phi[test] - x_mean, y[test] - y_mean
    errors = np.empty(grid.shape[0])
    theta = np.zeros(phi.shape[1])
    for g, lam in enumerate(grid):
        result = _fit_arrays(
            phi_train, y_train, w_train, PenaltySpec.lasso(lam), tol, max_iter, theta
        )
        if not result.converged:
            logger.debug(f"Fold {fold}: lambda={lam:.4g} stopped early")
        theta = result.theta
        r = y_test - phi_test @ theta
        errors[g] = w_test @ r**2
    return errors


def select_lambda(
    design: AugmentedDesign,
    y: np.ndarray,
    weights: KmWeights,
    mode: LambdaMode,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    n_jobs: int = 1,
) -> float:
    """Choose the Lasso penalty level.

    ``FixedRate(c)`` returns ``c * sqrt(log p / n)``. ``CrossValidate`` fits a
    warm-started path on each training fold, with KM weights recomputed on
    that fold and both parts centered at the training-fold weighted means,
    and minimizes the KM-weighted held-out squared error.

    Args:
        design: centered design in sorted order.
        y: centered response.
        weights: KM weights; their ``delta`` drive fold reweighting.
        mode: the selection rule.
        tol: solver tolerance for path fits.
        max_iter: sweep limit per path point.
        n_jobs: folds evaluated concurrently.

    Raises:
        ConfigError: for fewer than 2 folds or n < 2 * folds.
        DataError: when a training fold has no events.

    Returns:
        The selected penalty level.

    """
    n, p = design.phi.shape
    if isinstance(mode, FixedRate):
        return mode.c * math.sqrt(math.log(p) / n)
    if mode.folds < 2 or n < 2 * mode.folds:
        raise ConfigError(
            f"Cross-validation needs folds >= 2 and n >= 2 * folds "
            f"(folds={mode.folds}, n={n})."
        )
    grid = lambda_grid(design, y, weights, size=mode.grid_size)
    splitter = KFold(n_splits=mode.folds, shuffle=True, random_state=mode.seed)
    splits: List[Tuple[np.ndarray, np.ndarray]] = [
        (np.sort(train), np.sort(test)) for train, test in splitter.split(design.phi)
    ]
    y = np.asarray(y, dtype=float)
    per_fold = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_fold_errors)(
            fold, train, test, design.phi, y, weights.delta, grid, tol, max_iter
        )
        for fold, (train, test) in enumerate(splits)
    )
    total = np.sum(per_fold, axis=0)
    best = int(np.argmin(total))
    logger.info(
        f"Cross-validation picked lambda={grid[best]:.4g} "
        f"(grid point {best + 1} of {grid.size})"
    )
    return float(grid[best])
