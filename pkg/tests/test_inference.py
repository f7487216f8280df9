import math

import numpy as np
import pytest
from scipy.stats import norm

from conftest import standard_error
from covariance import ccmfbm_cov
from errors import DomainError, GridMismatchError
from inference import (
    DriftHypothesis,
    EquivalenceSpec,
    drift_log_likelihood,
    drift_mle,
    girsanov_log_likelihood,
    mean_weight_error,
    predict,
    prediction_operator,
    schur_conditioning,
)
from kernels import ModelParams, SeriesSpec
from operators import SampledFunction, TimeGrid, TriangularKernel
from simulation import SamplePath, SimConfig, recover_bm, simulate

BM = ModelParams.unchecked(1.0, 0.0, 0.75)


def test_drift_hypothesis_must_be_finite():
    with pytest.raises(DomainError):
        DriftHypothesis(float("inf"))


def test_null_hypothesis_has_zero_log_likelihood(params, grid):
    path = simulate(SimConfig(params, grid, seed=1, scheme="mg_approx"))[0]
    assert drift_log_likelihood(path, DriftHypothesis(0.0), params) == 0.0


def test_log_likelihood_is_quadratic_with_mle_maximizer(params, grid):
    path = simulate(SimConfig(params, grid, seed=2, scheme="mg_approx", drift=1.0))[0]
    theta_hat = drift_mle(path, params)
    w_t = recover_bm(path, params).w[-1]
    assert theta_hat == pytest.approx(w_t / grid.horizon, rel=1e-14)
    for theta in (-1.0, 0.5, 3.0):
        expected = theta * w_t - 0.5 * theta**2 * grid.horizon
        assert drift_log_likelihood(path, DriftHypothesis(theta), params) == pytest.approx(expected, rel=1e-12)
        assert drift_log_likelihood(path, DriftHypothesis(theta), params) <= drift_log_likelihood(
            path, DriftHypothesis(theta_hat), params) + 1e-12


def test_mle_of_zero_path_is_zero(params, grid):
    assert drift_mle(SamplePath(grid, np.zeros(grid.n + 1)), params) == 0.0


def test_mle_is_linear_in_the_observation(params, grid):
    first, second = simulate(SimConfig(params, grid, n_paths=2, seed=3))
    combined = SamplePath(grid, first.x + second.x)
    total = drift_mle(first, params) + drift_mle(second, params)
    assert drift_mle(combined, params) == pytest.approx(total, rel=1e-12, abs=1e-14)


@pytest.mark.parametrize("theta", [0.0, 0.8, -1.3])
def test_constant_drift_girsanov_reduces_to_bm_form(grid, theta):
    path = simulate(SimConfig(BM, grid, seed=4))[0]
    spec = EquivalenceSpec.constant_drift(grid, theta)
    expected = theta * path.w[-1] - 0.5 * theta**2 * grid.horizon
    assert girsanov_log_likelihood(path, spec) == pytest.approx(expected, rel=1e-12, abs=1e-14)


def test_girsanov_uses_x_when_w_is_absent(grid):
    path = simulate(SimConfig(BM, grid, seed=5))[0]
    bare = SamplePath(grid, path.w)
    spec = EquivalenceSpec.constant_drift(grid, 0.4)
    assert girsanov_log_likelihood(bare, spec) == girsanov_log_likelihood(path, spec)


def test_girsanov_with_memory_kernel_matches_left_point_sums(grid, rng):
    ell = TriangularKernel(grid, np.tril(rng.normal(size=(grid.n, grid.n))))
    g = SampledFunction(grid, rng.normal(size=grid.n))
    w = np.concatenate([[0.0], np.cumsum(rng.normal(scale=math.sqrt(grid.step), size=grid.n))])
    dw = np.diff(w)
    expected = 0.0
    for i in range(grid.n):
        z = sum(ell.entries[i, j] * dw[j] for j in range(i)) + g.values[i]
        expected += z * dw[i] - 0.5 * z**2 * grid.step
    value = girsanov_log_likelihood(SamplePath(grid, w), EquivalenceSpec(ell, g))
    assert value == pytest.approx(expected, rel=1e-12)


def test_girsanov_grid_mismatch(grid):
    path = SamplePath(TimeGrid(1.0, grid.n * 2), np.zeros(grid.n * 2 + 1))
    with pytest.raises(GridMismatchError):
        girsanov_log_likelihood(path, EquivalenceSpec.constant_drift(grid, 1.0))
    with pytest.raises(GridMismatchError):
        EquivalenceSpec(TriangularKernel(grid, np.zeros((grid.n, grid.n))),
                        SampledFunction(TimeGrid(2.0, grid.n), np.zeros(grid.n)))


def test_girsanov_density_has_unit_mean():
    grid = TimeGrid(1.0, 32)
    spec = EquivalenceSpec.constant_drift(grid, 0.5)
    density = np.exp([girsanov_log_likelihood(p, spec) for p in simulate(SimConfig(BM, grid, n_paths=4000, seed=6))])
    assert abs(density.mean() - 1.0) <= 3.0 * standard_error(density)


def test_drift_mle_is_unbiased_under_driving_drift(params):
    grid = TimeGrid(1.0, 128)
    paths = simulate(SimConfig(params, grid, n_paths=400, seed=7, scheme="mg_approx", drift=2.0))
    estimates = np.array([drift_mle(p, params) for p in paths])
    assert abs(estimates.mean() - 2.0) <= 3.0 * standard_error(estimates)
    assert estimates.var(ddof=1) * grid.horizon == pytest.approx(1.0, rel=0.25)


def test_likelihood_prefers_true_drift(params):
    grid = TimeGrid(5.0, 128)
    series = SeriesSpec(max_terms=200)
    paths = simulate(SimConfig(params, grid, n_paths=100, seed=8, scheme="mg_approx", drift=1.0))
    wins = [drift_log_likelihood(p, DriftHypothesis(1.0), params, series) > 0.0 for p in paths]
    # phi(1) > phi(0) iff W_T > -T/2, which has probability Phi(sqrt(T) / 2)
    expected = norm.cdf(math.sqrt(grid.horizon) / 2.0)
    assert abs(np.mean(wins) - expected) <= 3.0 * math.sqrt(expected * (1.0 - expected) / len(wins))


def test_prediction_without_fbm_is_brownian_conditioning(grid):
    p = ModelParams.unchecked(2.0, 0.0, 0.75)
    path = simulate(SimConfig(p, grid, seed=9))[0]
    result = predict(path, p, 0.5, [0.75, 1.0])
    n_u = grid.index_of(0.5)
    assert np.allclose(result.mean, path.x[n_u])
    expected = 4.0 * (np.minimum.outer([0.75, 1.0], [0.75, 1.0]) - 0.5)
    assert np.allclose(result.cov, expected, rtol=1e-12)


def test_prediction_at_u_is_degenerate(params, grid):
    path = simulate(SimConfig(params, grid, seed=10))[0]
    result = predict(path, params, 0.5, [0.5, 1.0])
    assert result.mean[0] == pytest.approx(path.x[grid.index_of(0.5)], rel=1e-14)
    assert result.cov[0, 0] == 0.0 and result.cov[0, 1] == 0.0


def test_prediction_covariance_is_path_independent(params, grid):
    first, second = simulate(SimConfig(params, grid, n_paths=2, seed=11))
    a = predict(first, params, 0.5, [0.625, 0.75, 1.0])
    b = predict(second, params, 0.5, [0.625, 0.75, 1.0])
    assert np.array_equal(a.cov, b.cov)
    assert not np.array_equal(a.mean, b.mean)
    assert np.allclose(a.cov, a.cov.T, rtol=0, atol=0)
    assert np.min(np.linalg.eigvalsh(a.cov)) >= -1e-10


def test_predicted_variance_below_unconditional(params, grid):
    path = simulate(SimConfig(params, grid, seed=12))[0]
    targets = [0.625, 0.75, 0.875, 1.0]
    result = predict(path, params, 0.5, targets)
    unconditional = np.array([ccmfbm_cov(params, t, t) for t in targets])
    assert np.all(np.diag(result.cov) <= unconditional + 1e-9)


def test_sample_weights_reproduce_the_mean(params, grid):
    path = simulate(SimConfig(params, grid, seed=13))[0]
    result = predict(path, params, 0.5, [0.75, 1.0])
    n_u = grid.index_of(0.5)
    assert np.allclose(result.weights @ path.x[1 : n_u + 1], result.mean, rtol=1e-12, atol=1e-12)


def test_prediction_frames(params, grid):
    path = simulate(SimConfig(params, grid, seed=14))[0]
    mean, cov = predict(path, params, 0.5, [0.75, 1.0]).to_frames()
    assert list(mean.columns) == ["t", "mean"] and len(mean) == 2
    assert list(cov.columns) == ["t", "s", "cov"] and len(cov) == 4


@pytest.mark.parametrize("u, targets", [(0.51, [1.0]), (0.5, [0.25]), (0.5, [0.9]), (0.5, []), (1 / 32, [1.0])])
def test_prediction_domain_errors(params, grid, u, targets):
    path = simulate(SimConfig(params, grid, seed=15))[0]
    with pytest.raises(DomainError):
        predict(path, params, u, targets)


def test_prediction_agrees_with_schur_conditioning(params):
    grid = TimeGrid(1.0, 128)
    targets = (0.625, 0.75, 1.0)
    _, weights, cov = prediction_operator(params, grid, 0.5, targets)
    oracle = schur_conditioning(params, grid, 0.5, targets)
    assert np.max(mean_weight_error(weights, oracle.weights, oracle.observed_cov)) <= 0.05
    assert np.max(np.abs(cov - oracle.cov)) <= 0.05 * np.max(np.abs(oracle.cov))


@pytest.mark.slow
def test_prediction_accuracy_improves_with_the_grid(params):
    targets = (0.6, 0.8, 1.0)
    errors = []
    for n in (128, 256, 512):
        grid = TimeGrid(1.0, n)
        _, weights, cov = prediction_operator(params, grid, 0.5, targets)
        oracle = schur_conditioning(params, grid, 0.5, targets)
        mean_err = np.max(mean_weight_error(weights, oracle.weights, oracle.observed_cov))
        cov_err = np.max(np.abs(cov - oracle.cov)) / np.max(np.abs(oracle.cov))
        errors.append(max(mean_err, cov_err))
    assert errors[1] <= 0.02
    assert errors[0] > errors[1] > errors[2]


def test_tower_property_of_predicted_means(params, grid):
    paths = simulate(SimConfig(params, grid, n_paths=600, seed=16))
    means = np.array([predict(p, params, 0.5, [1.0]).mean[0] for p in paths])
    assert abs(means.mean()) <= 4.0 * standard_error(means)


def test_schur_conditioning_rejects_target_at_u(params, grid):
    with pytest.raises(DomainError):
        schur_conditioning(params, grid, 0.5, [0.5])


def test_mean_weight_error_is_zero_for_identical_predictors():
    weights = np.array([[0.2, 0.8]])
    assert mean_weight_error(weights, weights, np.eye(2))[0] == 0.0
