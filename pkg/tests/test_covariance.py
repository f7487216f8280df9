import numpy as np
import pytest
from scipy.integrate import quad

from conftest import relative_error
from covariance import (
    IncrementQuery,
    ccmfbm_cov,
    covariance_table,
    cross_cov,
    cross_cov_table,
    fbm_cov,
    increment_covariance,
    incremental_cov,
    kernel_cell_integral,
    kernel_product_integral,
    l_product_integral,
    lrd_asymptote,
    w_b_increment_cov,
)
from errors import DomainError
from kernels import ModelParams, kernel_mass, mg_kernel


def test_fbm_cov_reduces_to_min_at_one_half():
    t = np.array([0.2, 0.7, 1.0])
    assert np.allclose(fbm_cov(0.5, t[:, None], t[None, :]), np.minimum.outer(t, t), rtol=0, atol=1e-15)


def test_fbm_cov_rejects_negative_times():
    with pytest.raises(DomainError):
        fbm_cov(0.75, -0.1, 0.5)


@pytest.mark.parametrize("hurst", [0.6, 0.75, 0.9])
def test_kernel_factorizes_fbm_covariance(hurst):
    grid = np.linspace(0.1, 1.0, 10)
    t, s = np.meshgrid(grid, grid, indexing="ij")
    assert relative_error(kernel_product_integral(hurst, t, s), fbm_cov(hurst, t, s)) <= 1e-5


def test_kernel_cell_integral_matches_quadrature():
    value, _ = quad(lambda s: mg_kernel(0.75, 0.8, s), 0.3, 0.5)
    assert kernel_cell_integral(0.75, 0.8, 0.3, 0.5) == pytest.approx(value, rel=1e-9)
    # cell touching the cusp at s = tau
    value, _ = quad(lambda s: mg_kernel(0.75, 0.8, s), 0.6, 0.8, limit=200)
    assert kernel_cell_integral(0.75, 0.8, 0.6, 0.8) == pytest.approx(value, rel=1e-8)


def test_cross_cov_full_and_partial():
    assert cross_cov(0.75, 1.0, 0.6) == pytest.approx(kernel_mass(0.75, 0.6), rel=1e-15)
    alpha = 0.25
    # E[W_0.4 B_1] = ∫_0^0.4 K(1, u) du
    value, _ = quad(lambda u: mg_kernel(0.75, 1.0, u) * u**alpha, 0.0, 0.4, weight="alg", wvar=(-alpha, 0.0))
    assert cross_cov(0.75, 0.4, 1.0) == pytest.approx(value, rel=1e-8)


def test_ccmfbm_cov_degenerate_mixtures():
    t, s = 0.3, 0.8
    assert ccmfbm_cov(ModelParams.unchecked(2.0, 0.0, 0.75), t, s) == pytest.approx(4.0 * 0.3)
    assert ccmfbm_cov(ModelParams.unchecked(0.0, 3.0, 0.75), t, s) == pytest.approx(9.0 * fbm_cov(0.75, t, s))


def test_ccmfbm_cov_is_symmetric(params):
    assert ccmfbm_cov(params, 0.3, 0.8) == pytest.approx(ccmfbm_cov(params, 0.8, 0.3), rel=1e-14)


def test_covariance_table_matches_pointwise_and_is_psd(params):
    nodes = np.array([0.1, 0.25, 0.5, 0.75, 1.0])
    table = covariance_table(params, nodes)
    pointwise = ccmfbm_cov(params, nodes[:, None], nodes[None, :])
    assert np.allclose(table, pointwise, rtol=1e-9, atol=1e-12)
    assert np.allclose(table, table.T, rtol=0, atol=0)
    assert np.min(np.linalg.eigvalsh(table)) > -1e-12


def test_cross_cov_table_rejects_unsorted_nodes():
    with pytest.raises(DomainError):
        cross_cov_table(0.75, np.array([0.5, 0.2]))


def test_increment_covariance_sums_to_terminal_variance(params):
    nodes = np.linspace(0.1, 1.0, 10)
    table = covariance_table(params, nodes)
    increments = increment_covariance(table)
    assert np.sum(increments) == pytest.approx(table[-1, -1], rel=1e-12)


def test_l_product_integral_at_full_overlap_is_the_covariance(params):
    assert l_product_integral(params, 0.9, 0.6, 0.6) == pytest.approx(ccmfbm_cov(params, 0.9, 0.6), rel=1e-6)


@pytest.mark.parametrize("iq", [
    IncrementQuery(t0=0.2, delta=0.1, t=0.5),
    IncrementQuery(t0=0.5, delta=0.1, t=0.2),
    IncrementQuery(t0=0.3, delta=0.2, t=0.4),
    IncrementQuery(t0=0.4, delta=0.1, t=0.4),
])
def test_incremental_cov_matches_covariance_differences(params, iq):
    r = lambda u, v: ccmfbm_cov(params, u, v)
    t0, d, t = iq.t0, iq.delta, iq.t
    expected = r(t0 + d, t + d) - r(t0 + d, t) - r(t0, t + d) + r(t0, t)
    assert incremental_cov(params, iq) == pytest.approx(expected, rel=1e-7)


def test_w_b_increment_cov_vanishes_when_w_comes_later():
    assert w_b_increment_cov(0.75, 0.6, 0.7, 0.1, 0.2) == 0.0


@pytest.mark.parametrize("t", [1.05, 2.0, 16.0])
def test_brownian_increments_are_uncorrelated(t):
    bm = ModelParams.unchecked(1.5, 0.0, 0.75)
    assert incremental_cov(bm, IncrementQuery(t0=1.0, delta=0.05, t=t)) == pytest.approx(0.0, abs=1e-15)
    overlapping = IncrementQuery(t0=1.0, delta=0.05, t=1.02)
    assert incremental_cov(bm, overlapping) == pytest.approx(1.5**2 * 0.03)


@pytest.mark.parametrize("hurst", [0.6, 0.75, 0.9])
def test_incremental_cov_approaches_its_asymptote(hurst):
    p = ModelParams(1.0, 1.0, hurst)
    iq = IncrementQuery(t0=1.0, delta=0.01, t=64.0)
    assert incremental_cov(p, iq) / lrd_asymptote(p, iq) == pytest.approx(1.0, abs=0.1)


def test_lrd_asymptote_needs_separated_increments(params):
    with pytest.raises(DomainError):
        lrd_asymptote(params, IncrementQuery(t0=1.0, delta=0.5, t=1.2))


@pytest.mark.parametrize("kwargs", [dict(t0=0.1, delta=0.0, t=0.5), dict(t0=-0.1, delta=0.1, t=0.5),
                                    dict(t0=0.1, delta=float("nan"), t=0.5)])
def test_increment_query_validation(kwargs):
    with pytest.raises(DomainError):
        IncrementQuery(**kwargs)
