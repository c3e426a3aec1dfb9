"""Tests influence_cov.py features."""

import math

import numpy as np
import pytest

from hierfdr.dataset import SurvivalDataset, build_augmented_design, sort_by_time
from hierfdr.exceptions import DataError
from hierfdr.influence_cov import (
    CovarianceMode,
    InfluenceTable,
    compute_influence,
    covariance_from_influence,
    influence_from_scores,
)
from tests.test_dataset import random_dataset


def influence_oracle(y, delta, scores):
    """Utility function evaluating the influence displays with double loops.

    Args:
        y: sorted times.
        delta: censoring indicators.
        scores: n x p score matrix.

    Returns:
        (zeta, tau0) computed term by term.
    """
    n, p = scores.shape

    def risk(value):
        return n - np.sum(y <= value)

    tau0 = np.ones(n)
    for i in range(n):
        total = 0.0
        for k in range(n):
            if y[k] < y[i] and delta[k] == 0 and risk(y[k]) > 0:
                total += 1.0 / risk(y[k])
        tau0[i] = math.exp(total)

    zeta = np.zeros((n, p))
    for i in range(n):
        tau1 = np.zeros(p)
        if risk(y[i]) > 0:
            for k in range(n):
                if y[k] > y[i] and delta[k] == 1:
                    tau1 += scores[k] * tau0[k] / risk(y[i])
        tau2 = np.zeros(p)
        for k in range(n):
            if y[k] < y[i] and delta[k] == 0 and risk(y[k]) > 0:
                for m in range(n):
                    if y[m] > y[k] and delta[m] == 1:
                        tau2 += scores[m] * tau0[m] / risk(y[k]) ** 2
        zeta[i] = scores[i] * tau0[i] * delta[i] + tau1 * (1 - delta[i]) - tau2
    return zeta, tau0


def test_small_example():
    table = influence_from_scores(
        np.array([1.0, 2.0, 3.0]), np.array([1.0, 0.0, 1.0]), np.ones((3, 1))
    )
    np.testing.assert_allclose(table.tau0, [1.0, 1.0, math.e])


def test_uncensored_influence_is_the_score():
    rng = np.random.default_rng(0)
    y = np.sort(rng.standard_normal(25))
    scores = rng.standard_normal((25, 4))
    table = influence_from_scores(y, np.ones(25), scores)
    np.testing.assert_allclose(table.tau0, np.ones(25))
    np.testing.assert_allclose(table.zeta, scores)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    n = 30
    y = np.sort(rng.standard_normal(n))
    delta = (rng.uniform(size=n) < 0.6).astype(float)
    scores = rng.standard_normal((n, 3))
    zeta, tau0 = influence_oracle(y, delta, scores)
    table = influence_from_scores(y, delta, scores)
    np.testing.assert_allclose(table.tau0, tau0, rtol=1e-12)
    np.testing.assert_allclose(table.zeta, zeta, rtol=1e-10, atol=1e-12)


def test_ties_use_strict_comparisons():
    y = np.array([1.0, 1.0, 2.0, 2.0, 3.0])
    delta = np.array([1.0, 0.0, 1.0, 0.0, 1.0])
    scores = np.arange(10.0).reshape(5, 2)
    zeta, tau0 = influence_oracle(y, delta, scores)
    table = influence_from_scores(y, delta, scores)
    np.testing.assert_allclose(table.tau0, tau0)
    np.testing.assert_allclose(table.zeta, zeta)


def test_compute_influence_checks_length():
    data = random_dataset(n=20, d=3, q=2)
    sorted_data = sort_by_time(data, build_augmented_design(data))
    with pytest.raises(DataError):
        compute_influence(sorted_data, np.zeros(4))
    table = compute_influence(sorted_data, np.zeros(sorted_data.design.p))
    assert table.zeta.shape == (20, sorted_data.design.p)


def test_diag_and_full_modes_agree():
    rng = np.random.default_rng(4)
    table = InfluenceTable(zeta=rng.standard_normal((40, 6)), tau0=np.ones(40))
    m_hat = rng.standard_normal((6, 6))
    diag = covariance_from_influence(table, CovarianceMode.DIAG, m_hat)
    full = covariance_from_influence(table, CovarianceMode.FULL, m_hat)
    assert diag.sigma is None
    np.testing.assert_array_equal(full.sigma, full.sigma.T)
    np.testing.assert_allclose(full.sigma, np.cov(table.zeta, rowvar=False))
    np.testing.assert_allclose(diag.lambda_diag, full.lambda_diag, rtol=1e-10)
    np.testing.assert_allclose(
        full.lambda_diag, np.diag(m_hat @ full.sigma @ m_hat.T), rtol=1e-10
    )
    np.testing.assert_allclose(diag.sigma_diag, np.diag(full.sigma))


def test_covariance_errors():
    with pytest.raises(DataError):
        covariance_from_influence(InfluenceTable(np.ones((1, 2)), np.ones(1)))
    table = InfluenceTable(np.ones((3, 2)), np.ones(3))
    with pytest.raises(DataError):
        covariance_from_influence(table, CovarianceMode.DIAG)


def test_zero_coefficients_use_raw_scores():
    data = random_dataset(n=40, d=3, q=2, seed=6)
    sorted_data = sort_by_time(data, build_augmented_design(data))
    phi = sorted_data.design.phi
    y, delta = sorted_data.dataset.y, sorted_data.dataset.delta
    table = compute_influence(sorted_data, np.zeros(phi.shape[1]))
    expected = influence_from_scores(y, delta, phi * y[:, None])
    np.testing.assert_allclose(table.zeta, expected.zeta)
    np.testing.assert_allclose(table.tau0, expected.tau0)


@pytest.mark.parametrize("c", [0.01, 3.0, 100.0])
def test_influence_scales_with_the_response(c):
    data = random_dataset(n=40, d=3, q=2, seed=7)
    scaled = SurvivalDataset(y=c * data.y, delta=data.delta, x=data.x, z=data.z)
    rng = np.random.default_rng(7)
    sorted_data = sort_by_time(data, build_augmented_design(data))
    p = sorted_data.design.p
    theta = rng.standard_normal(p)
    m_hat = rng.standard_normal((p, p))
    base = compute_influence(sorted_data, theta)
    sorted_scaled = sort_by_time(scaled, build_augmented_design(scaled))
    again = compute_influence(sorted_scaled, c * theta)
    np.testing.assert_allclose(again.zeta, c * base.zeta, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(again.tau0, base.tau0)
    base_cov = covariance_from_influence(base, CovarianceMode.DIAG, m_hat)
    again_cov = covariance_from_influence(again, CovarianceMode.DIAG, m_hat)
    np.testing.assert_allclose(
        again_cov.lambda_diag, c**2 * base_cov.lambda_diag, rtol=1e-9
    )
