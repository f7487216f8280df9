"""Acceptance suite behind ``cli.py verify``.

Each check returns report rows (criterion, check, value, threshold, passed,
seconds, detail). ``desk`` runs the full acceptance sizes, ``quick`` reduced
sizes with the same thresholds where the sizes still allow them.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import pandas as pd
from loguru import logger
from scipy.integrate import quad
from scipy.stats import pearsonr

from covariance import IncrementQuery, covariance_table, fbm_cov, incremental_cov, kernel_product_integral, lrd_asymptote
from errors import CcmfbmError, DomainError
from inference import (
    EquivalenceSpec,
    drift_mle,
    girsanov_log_likelihood,
    mean_weight_error,
    predict,
    schur_conditioning,
)
from kernels import ModelParams, SeriesSpec, c_of_h, gamma_k, l_inverse_kernel, mg_kernel
from operators import (
    TimeGrid,
    TriangularKernel,
    build_forward_operator,
    build_inverse_operator,
    identity_residual,
    kstar_norm_bound,
    kstar_norm_squared,
    resolvent_kernel,
)
from simulation import (
    SimConfig,
    expected_quadratic_variation,
    holder_diagnostic,
    quadratic_variation,
    recover_bm,
    simulate,
)

LEVELS = ("quick", "desk")
REPORT_COLUMNS = ["criterion", "check", "value", "threshold", "passed", "seconds", "detail"]
SUITE_SEED = 20240601


@dataclass(frozen=True)
class SuiteSizes:
    cov_paths: int
    cov_n: int
    qv_paths: int
    qv_pass_fraction: float
    qv_mean_paths: int
    inversion_n: tuple[int, int]
    round_trip_n: int
    mle_paths: int
    girsanov_paths: int
    prediction_n: tuple[int, int, int]
    resolvent_n: int


SIZES = {
    "desk": SuiteSizes(20_000, 64, 200, 0.95, 2_000, (128, 512), 512, 1_000, 10_000, (128, 256, 512), 512),
    "quick": SuiteSizes(2_000, 32, 100, 0.90, 400, (64, 128), 128, 200, 2_000, (64, 128, 256), 128),
}


def _row(criterion: int, check: str, value: float, threshold: str, passed: bool, detail: str = "") -> dict:
    return {"criterion": criterion, "check": check, "value": float(value), "threshold": threshold,
            "passed": bool(passed), "seconds": 0.0, "detail": detail}


def kernel_factorization(sizes: SuiteSizes) -> list[dict]:
    grid = np.linspace(0.1, 1.0, 10)
    t, s = np.meshgrid(grid, grid, indexing="ij")
    rows = []
    for hurst in (0.6, 0.75, 0.9):
        approx = kernel_product_integral(hurst, t, s)
        exact = fbm_cov(hurst, t, s)
        err = float(np.max(np.abs(approx - exact) / exact))
        rows.append(_row(1, f"∫K K vs R_H, H={hurst}", err, "<= 1e-5", err <= 1e-5))
    return rows


def series_inversion(sizes: SuiteSizes) -> list[dict]:
    p = ModelParams(1.0, 1.0, 0.75)
    residuals = []
    for n in sizes.inversion_n:
        grid = TimeGrid(1.0, n)
        residuals.append(identity_residual(build_forward_operator(p, grid), build_inverse_operator(p, grid)))
    coarse, fine = sizes.inversion_n
    rows = [_row(2, f"identity residual N={fine} < N={coarse}", residuals[1], f"< {residuals[0]:.3g}",
                 residuals[1] < residuals[0])]
    t = np.array([0.3, 0.5, 1.0, 1.0, 0.8])
    s = np.array([0.1, 0.25, 0.01, 0.9, 0.7])
    gap = float(np.max(np.abs(gamma_k(0.75, 1, t, s) - mg_kernel(0.75, t, s))))
    rows.append(_row(2, "gamma_1 vs K_H", gap, "<= 1e-8", gap <= 1e-8))
    norm = kstar_norm_squared(p.hurst, TimeGrid(1.0, fine))
    bound = kstar_norm_bound(p.hurst, 1.0)
    rows.append(_row(2, f"discretized ||K*||^2 vs its bound, N={fine}", norm, f"<= {1.05 * bound:.4g}", norm <= 1.05 * bound))
    return rows


def defining_equation(sizes: SuiteSizes) -> list[dict]:
    p = ModelParams(1.0, 1.0, 0.75)
    alpha = p.alpha
    c = c_of_h(p.hurst)
    rng = np.random.default_rng(np.random.SeedSequence([SUITE_SEED, 3]))
    worst = 0.0
    for _ in range(20):
        t = rng.uniform(0.2, 1.0)
        s = rng.uniform(0.05, t - 0.05)

        def integrand(u: float) -> float:
            return l_inverse_kernel(p, t, u) * c * (u / s) ** alpha

        # (u - s)^(alpha - 1) carried as the algebraic weight
        tail, _ = quad(integrand, s, t, weight="alg", wvar=(alpha - 1.0, 0.0), limit=200)
        worst = max(worst, abs(p.a * l_inverse_kernel(p, t, s) + p.b * tail - 1.0))
    return [_row(3, "a L^-1 + b ∫ L^-1 dK vs indicator, 20 pairs", worst, "<= 1e-4", worst <= 1e-4)]


def simulation_covariance(sizes: SuiteSizes) -> list[dict]:
    p = ModelParams(1.0, 1.0, 0.75)
    grid = TimeGrid(1.0, sizes.cov_n)
    paths = simulate(SimConfig(p, grid, n_paths=sizes.cov_paths, seed=SUITE_SEED))
    x = np.stack([path.x[1:] for path in paths])
    sample = np.cov(x, rowvar=False)
    exact = covariance_table(p, grid.columns)
    se = np.sqrt((np.outer(np.diag(exact), np.diag(exact)) + exact**2) / (sizes.cov_paths - 1))
    share = float(np.mean(np.abs(sample - exact) <= 4.0 * se))
    return [_row(4, f"Cholesky sample covariance, {sizes.cov_paths} paths", share, ">= 0.95 within 4 SE", share >= 0.95)]


def quadratic_variation_check(sizes: SuiteSizes) -> list[dict]:
    rows = []
    p = ModelParams(1.0, 0.1, 0.9)
    grid = TimeGrid(1.0, 4096)
    cfg = SimConfig(p, grid, n_paths=sizes.qv_paths, seed=SUITE_SEED, cholesky_variant="shared")
    terminal = np.array([quadratic_variation(path)[-1] for path in simulate(cfg)])
    share = float(np.mean(np.abs(terminal - p.a**2 * grid.horizon) <= 0.05 * p.a**2 * grid.horizon))
    rows.append(_row(5, "terminal QV within 5% of a^2 T, shared-draw Cholesky, (1, 0.1, 0.9), N=4096", share,
                     f">= {sizes.qv_pass_fraction}", share >= sizes.qv_pass_fraction,
                     "fBm marginal exact, W/B^H cross-covariance approximate"))

    p = ModelParams(1.0, 1.0, 0.75)
    expected = [expected_quadratic_variation(p, TimeGrid(1.0, n)) for n in (64, 256, 1024)]
    decreasing = all(later < earlier for earlier, later in zip(expected, expected[1:])) and expected[-1] > p.a**2
    rows.append(_row(5, "E[QV_N] decreases toward a^2 T, (1, 1, 0.75)", expected[-1], "monotone, > a^2 T", decreasing))

    grid = TimeGrid(1.0, 64)
    qv = np.array([quadratic_variation(path)[-1]
                   for path in simulate(SimConfig(p, grid, n_paths=sizes.qv_mean_paths, seed=SUITE_SEED + 5))])
    z = abs(qv.mean() - expected_quadratic_variation(p, grid)) / (qv.std(ddof=1) / math.sqrt(qv.size))
    rows.append(_row(5, "sample mean QV vs E[QV_N], N=64", z, "<= 4 SE", z <= 4.0))
    return rows


def holder_check(sizes: SuiteSizes) -> list[dict]:
    lags = [0.1, 0.01, 0.001]
    rows = []
    table = holder_diagnostic(ModelParams(1.0, 0.1, 0.9), lags)
    deviation = (table["ratio"] - 1.0).abs().to_numpy()
    rows.append(_row(6, "ratio at 1e-3 within 5% of 1, (1, 0.1, 0.9)", table["ratio"].iloc[-1], "|r - 1| <= 0.05",
                     deviation[-1] <= 0.05))
    rows.append(_row(6, "deviation monotone, (1, 0.1, 0.9)", deviation[0], "decreasing", bool(np.all(np.diff(deviation) < 0))))

    table = holder_diagnostic(ModelParams(1.0, 1.0, 0.75), lags)
    deviation = (table["ratio"] - 1.0).to_numpy()
    leading = table["leading_deviation"].to_numpy()
    agreement = float(abs(deviation[-1] / leading[-1] - 1.0))
    rows.append(_row(6, "deviation monotone, (1, 1, 0.75)", deviation[-1], "decreasing", bool(np.all(np.diff(deviation) < 0))))
    rows.append(_row(6, "deviation vs leading order at 1e-3, (1, 1, 0.75)", agreement, "<= 0.05", agreement <= 0.05))
    return rows


def long_range_dependence(sizes: SuiteSizes) -> list[dict]:
    rows = []
    lags = np.geomspace(8.0, 64.0, 8)
    for hurst in (0.6, 0.75, 0.9):
        p = ModelParams(1.0, 1.0, hurst)
        rho = np.array([incremental_cov(p, IncrementQuery(t0=1.0, delta=0.05, t=t)) for t in lags])
        slope = float(np.polyfit(np.log(lags), np.log(rho), 1)[0])
        rows.append(_row(7, f"log-log slope, H={hurst}", slope, f"{2 * hurst - 2:.2f} ± 0.1",
                         abs(slope - (2 * hurst - 2)) <= 0.1))
        iq = IncrementQuery(t0=1.0, delta=0.01, t=float(lags[-1]))
        ratio = incremental_cov(p, iq) / lrd_asymptote(p, iq)
        rows.append(_row(7, f"exact / asymptote at t=64, H={hurst}", ratio, "within 10% of 1", abs(ratio - 1.0) <= 0.1))
    return rows


def transfer_round_trip(sizes: SuiteSizes) -> list[dict]:
    p = ModelParams(1.0, 1.0, 0.75)
    grid = TimeGrid(1.0, sizes.round_trip_n)
    paths = simulate(SimConfig(p, grid, n_paths=4, seed=SUITE_SEED, scheme="mg_approx"))
    recovered = np.concatenate([np.diff(recover_bm(path, p).w) for path in paths])
    driving = np.concatenate([np.diff(path.w) for path in paths])
    corr = float(pearsonr(recovered, driving)[0])
    return [_row(8, f"recovered vs driving increments, N={grid.n}", corr, "> 0.99", corr > 0.99)]


def drift_estimation(sizes: SuiteSizes) -> list[dict]:
    p = ModelParams(1.0, 1.0, 0.75)
    theta, horizon = 2.0, 5.0
    grid = TimeGrid(horizon, 512)
    series = SeriesSpec(max_terms=200)
    cfg = SimConfig(p, grid, n_paths=sizes.mle_paths, seed=SUITE_SEED, scheme="mg_approx", drift=theta)
    estimates = np.array([drift_mle(path, p, series) for path in simulate(cfg)])
    se = estimates.std(ddof=1) / math.sqrt(estimates.size)
    z = abs(estimates.mean() - theta) / se
    var_gap = abs(estimates.var(ddof=1) * horizon - 1.0)
    rows = [
        _row(9, f"mean MLE vs theta={theta}, {estimates.size} paths", z, "<= 3 SE", z <= 3.0),
        _row(9, "MLE variance vs 1/T", var_gap, "<= 0.2 relative", var_gap <= 0.2),
    ]

    bm = ModelParams.unchecked(1.0, 0.0, 0.75)
    grid = TimeGrid(1.0, 64)
    spec = EquivalenceSpec.constant_drift(grid, 0.5)
    cfg = SimConfig(bm, grid, n_paths=sizes.girsanov_paths, seed=SUITE_SEED + 9, scheme="mg_approx")
    density = np.exp([girsanov_log_likelihood(path, spec) for path in simulate(cfg)])
    z = abs(density.mean() - 1.0) / (density.std(ddof=1) / math.sqrt(density.size))
    rows.append(_row(9, f"Girsanov density unit mean, {density.size} paths", z, "<= 3 SE", z <= 3.0))
    return rows


def prediction_check(sizes: SuiteSizes) -> list[dict]:
    p = ModelParams(1.0, 1.0, 0.75)
    u, targets = 0.5, (0.6, 0.8, 1.0)
    errors = []
    for n in sizes.prediction_n:
        grid = TimeGrid(1.0, n)
        paths = simulate(SimConfig(p, grid, n_paths=2, seed=SUITE_SEED))
        first, second = (predict(path, p, u, targets) for path in paths)
        oracle = schur_conditioning(p, grid, u, targets)
        mean_err = float(np.max(mean_weight_error(first.weights, oracle.weights, oracle.observed_cov)))
        cov_err = float(np.max(np.abs(first.cov - oracle.cov)) / np.max(np.abs(oracle.cov)))
        errors.append(max(mean_err, cov_err))
        if n == 256:
            identical = bool(np.array_equal(first.cov, second.cov))
    ok = errors[sizes.prediction_n.index(256)] <= 0.02
    decreasing = all(later < earlier for earlier, later in zip(errors, errors[1:]))
    return [
        _row(10, "prediction vs Schur conditioning, N=256", errors[sizes.prediction_n.index(256)], "<= 0.02", ok),
        _row(10, f"error decreasing over N={sizes.prediction_n}", errors[-1], "strictly decreasing", decreasing),
        _row(10, "covariance identical across paths", float(identical), "bit-exact", identical),
    ]


def resolvent_check(sizes: SuiteSizes) -> list[dict]:
    c = 1.0
    grid = TimeGrid(1.0, sizes.resolvent_n)
    ell = TriangularKernel(grid, c * np.tril(np.ones((grid.n, grid.n))))
    res = resolvent_kernel(ell)
    nodes = grid.nodes
    rows, cols = np.tril_indices(grid.n)
    t = nodes[rows + 1]
    exact = (np.exp(c * (t - nodes[cols])) - np.exp(c * (t - nodes[cols + 1]))) / grid.step
    err = float(np.max(np.abs(res.entries[rows, cols] - exact) / exact))
    return [_row(11, f"constant-kernel resolvent, N={grid.n}", err, "<= 0.01", err <= 0.01)]


CHECKS: tuple[Callable[[SuiteSizes], list[dict]], ...] = (
    kernel_factorization,
    series_inversion,
    defining_equation,
    simulation_covariance,
    quadratic_variation_check,
    holder_check,
    long_range_dependence,
    transfer_round_trip,
    drift_estimation,
    prediction_check,
    resolvent_check,
)


def run_suite(level: str = "desk", only: tuple[int, ...] = ()) -> pd.DataFrame:
    """Run the acceptance checks; ``only`` restricts to the given criterion numbers."""
    if level not in LEVELS:
        raise DomainError(f"unknown level {level!r}; choose one of {LEVELS}")
    sizes = SIZES[level]
    rows = []
    for number, check in enumerate(CHECKS, start=1):
        if only and number not in only:
            continue
        logger.info("criterion {}: {}", number, check.__name__)
        start = time.perf_counter()
        try:
            found = check(sizes)
        except CcmfbmError as exc:
            logger.error("criterion {} raised {}", number, exc)
            found = [_row(number, check.__name__, math.nan, "", False, f"{type(exc).__name__}: {exc}")]
        elapsed = time.perf_counter() - start
        for row in found:
            row["seconds"] = elapsed
        rows.extend(found)
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)
