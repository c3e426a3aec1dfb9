"""Kaplan-Meier (Stute) jump weights for weighted least squares."""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from hierfdr.dataset import SortedDataset

logger = logging.getLogger(__name__)

# Above this sample size the running product is accumulated in log-space.
LOG_SPACE_THRESHOLD = 1000


@dataclass(frozen=True)
class KmWeights:
    """KM jump weights of a sorted sample.

    Attributes:
        w: jump weight of each sorted observation; zero for censored rows.
        rescaled: the diagonal of W, i.e. ``n * w``.
        delta: the sorted censoring indicators the weights were built from.
    """

    w: np.ndarray
    rescaled: np.ndarray
    delta: np.ndarray

    @property
    def n(self) -> int:
        return self.w.shape[0]

    @property
    def mass(self) -> float:
        """Total weight; below one when the largest time is censored."""
        return float(self.w.sum())


def km_jump_weights(delta: np.ndarray, method: Optional[str] = None) -> np.ndarray:
    """Evaluate the KM weight product formula on sorted indicators.

    ``w_1 = delta_1 / n`` and
    ``w_i = delta_i / (n - i + 1) * prod_{j < i} ((n - j) / (n - j + 1)) ** delta_j``.

    Args:
        delta: censoring indicators in sorted order.
        method: ``"product"`` or ``"log"`` to force an evaluation path;
            by default the log path is used when n exceeds 1000.

    Returns:
        The weight vector.

    """
    delta = np.asarray(delta, dtype=float)
    n = delta.shape[0]
    if method is None:
        method = "log" if n > LOG_SPACE_THRESHOLD else "product"
    j = np.arange(1, n, dtype=float)
    ratio = (n - j) / (n - j + 1)
    if method == "product":
        factors = np.where(delta[:-1] == 1, ratio, 1.0)
        prefix = np.concatenate([[1.0], np.cumprod(factors)])
    elif method == "log":
        logs = delta[:-1] * np.log(ratio)
        prefix = np.exp(np.concatenate([[0.0], np.cumsum(logs)]))
    else:
        raise ValueError(f"Unknown evaluation method {method!r}.")
    i = np.arange(1, n + 1, dtype=float)
    return delta / (n - i + 1) * prefix


def compute_km_weights(
    sorted_data: SortedDataset, method: Optional[str] = None
) -> KmWeights:
    """Compute KM weights and the rescaled weight diagonal.

    Args:
        sorted_data: data sorted by :func:`hierfdr.dataset.sort_by_time`.
        method: optional evaluation path override, see :func:`km_jump_weights`.

    Returns:
        The weights.

    """
    delta = sorted_data.dataset.delta
    w = km_jump_weights(delta, method=method)
    w.setflags(write=False)
    rescaled = w * w.shape[0]
    rescaled.setflags(write=False)
    if delta[-1] == 0:
        logger.debug(
            f"Largest observation censored; KM mass is {w.sum():.6f} (not 1)."
        )
    return KmWeights(w=w, rescaled=rescaled, delta=delta)
