from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from loguru import logger
from scipy.linalg import LinAlgError, cholesky

from covariance import IncrementQuery, fbm_cov, incremental_cov, kernel_cell_integral
from errors import DomainError, FactorizationError
from kernels import DEFAULT_SERIES, ModelParams, SeriesSpec, c_of_h, kernel_mass, mg_kernel
from operators import TimeGrid, build_inverse_operator, fbm_cell_averages
from quadrature import DEFAULT_QUADRATURE, QuadratureSpec, cell_rule, evaluate_chunked
from settings import worker_count

SCHEMES = ("cholesky", "mg_approx", "series")
CHOLESKY_VARIANTS = ("joint", "shared")
BASES = ("trigonometric", "cosine")
DRIFT_MODELS = ("driving", "observation")

PATH_CHUNK = 64
JITTER_LEVELS = (1e-14, 1e-13, 1e-12, 1e-11, 1e-10)
MAX_SEED = 2**64


@dataclass(frozen=True, eq=False)
class SamplePath:
    """Samples at t_0..t_N; w and bh are the Bm and fBm components when known."""

    grid: TimeGrid
    x: np.ndarray
    w: np.ndarray | None = None
    bh: np.ndarray | None = None
    xi: np.ndarray | None = None

    def __post_init__(self) -> None:
        n = self.grid.n
        for name in ("x", "w", "bh"):
            value = getattr(self, name)
            if value is None:
                continue
            arr = np.array(value, dtype=float)
            if arr.shape != (n + 1,):
                raise DomainError(f"{name} needs {n + 1} samples, got shape {arr.shape}")
            if arr[0] != 0.0:
                raise DomainError(f"{name} must start at 0")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.xi is not None:
            xi = np.array(self.xi, dtype=float)
            xi.setflags(write=False)
            object.__setattr__(self, "xi", xi)

    def increments(self) -> np.ndarray:
        return np.diff(self.x)


@dataclass(frozen=True)
class SimConfig:
    params: ModelParams
    grid: TimeGrid
    n_paths: int = 1
    seed: int = 0
    scheme: str = "cholesky"
    series_terms: int = 128
    basis: str = "trigonometric"
    cholesky_variant: str = "joint"
    drift: float = 0.0
    drift_model: str = "driving"

    def __post_init__(self) -> None:
        if int(self.n_paths) != self.n_paths or self.n_paths < 1:
            raise DomainError(f"n_paths must be a positive integer, got {self.n_paths}")
        if int(self.seed) != self.seed or not 0 <= self.seed < MAX_SEED:
            raise DomainError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.scheme not in SCHEMES:
            raise DomainError(f"unknown scheme {self.scheme!r}; choose one of {SCHEMES}")
        if int(self.series_terms) != self.series_terms or self.series_terms < 1:
            raise DomainError(f"series_terms must be a positive integer, got {self.series_terms}")
        if self.basis not in BASES:
            raise DomainError(f"unknown basis {self.basis!r}; choose one of {BASES}")
        if self.cholesky_variant not in CHOLESKY_VARIANTS:
            raise DomainError(f"unknown Cholesky variant {self.cholesky_variant!r}; choose one of {CHOLESKY_VARIANTS}")
        if self.drift_model not in DRIFT_MODELS:
            raise DomainError(f"unknown drift model {self.drift_model!r}; choose one of {DRIFT_MODELS}")
        if not math.isfinite(self.drift):
            raise DomainError("drift must be finite")
        object.__setattr__(self, "n_paths", int(self.n_paths))
        object.__setattr__(self, "seed", int(self.seed))


def path_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per path, keyed by (seed, path index)."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _draws(seed: int, start: int, stop: int, count: int) -> np.ndarray:
    return np.stack([path_rng(seed, i).standard_normal(count) for i in range(start, stop)])


def _run_chunks(cfg: SimConfig, build: Callable[[int, int], list[SamplePath]], workers: int | None) -> list[SamplePath]:
    bounds = [(start, min(start + PATH_CHUNK, cfg.n_paths)) for start in range(0, cfg.n_paths, PATH_CHUNK)]
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(bounds) == 1:
        chunks = [build(start, stop) for start, stop in bounds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(lambda b: build(*b), bounds))
    return [path for chunk in chunks for path in chunk]


def _with_origin(values: np.ndarray) -> np.ndarray:
    return np.concatenate([np.zeros((values.shape[0], 1)), values], axis=1)


def _assemble(cfg: SimConfig, w: np.ndarray, bh: np.ndarray, xi: np.ndarray) -> list[SamplePath]:
    p = cfg.params
    x = p.a * w + p.b * bh
    if cfg.drift_model == "observation" and cfg.drift != 0.0:
        x = x + cfg.drift * cfg.grid.columns
        return [SamplePath(cfg.grid, row_x, xi=row_xi) for row_x, row_xi in zip(_with_origin(x), xi)]
    w, bh, x = _with_origin(w), _with_origin(bh), _with_origin(x)
    return [SamplePath(cfg.grid, x[i], w[i], bh[i], xi[i]) for i in range(x.shape[0])]


def _driving_drift(cfg: SimConfig) -> float:
    return cfg.drift if cfg.drift_model == "driving" else 0.0


def cholesky_with_jitter(matrix: np.ndarray, label: str) -> np.ndarray:
    """Lower Cholesky factor, adding eps * diag with eps escalating up to 1e-10 if needed."""
    try:
        return cholesky(matrix, lower=True)
    except LinAlgError:
        pass
    diagonal = np.diag(np.diag(matrix))
    for eps in JITTER_LEVELS:
        try:
            factor = cholesky(matrix + eps * diagonal, lower=True)
        except LinAlgError:
            continue
        logger.warning("Cholesky of {} needed jitter {:g} x diag", label, eps)
        return factor
    raise FactorizationError(f"Cholesky factorization of {label} failed after jitter up to {JITTER_LEVELS[-1]:g}")


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@lru_cache(maxsize=8)
def fbm_cholesky(hurst: float, grid: TimeGrid) -> np.ndarray:
    t = grid.columns
    table = fbm_cov(hurst, t[:, None], t[None, :])
    return _readonly(cholesky_with_jitter(table, f"the fBm covariance (H={hurst}, N={grid.n}, T={grid.horizon})"))


@lru_cache(maxsize=8)
def residual_cholesky(hurst: float, grid: TimeGrid, q: QuadratureSpec = DEFAULT_QUADRATURE) -> np.ndarray:
    """Factor of Cov(B^H | W on the grid) = R_H - h A A^T."""
    t = grid.columns
    a_cells = fbm_cell_averages(hurst, grid, q)
    table = fbm_cov(hurst, t[:, None], t[None, :]) - grid.step * a_cells @ a_cells.T
    table = 0.5 * (table + table.T)
    return _readonly(cholesky_with_jitter(table, f"the conditional fBm covariance (H={hurst}, N={grid.n}, T={grid.horizon})"))


def simulate_cholesky(cfg: SimConfig, q: QuadratureSpec = DEFAULT_QUADRATURE, workers: int | None = None) -> list[SamplePath]:
    """Exact Gaussian simulation on the grid.

    ``joint`` factors the covariance of (W, B^H) on the grid: w is the scaled
    random walk of the first N draws and bh = A dW + chol(R_H - h A A^T) eta
    with N further draws. ``shared`` feeds the same draws to the fBm factor
    chol(R_H); its fBm marginal is exact, its W/B^H cross-covariance is not.
    """
    if cfg.scheme != "cholesky":
        raise DomainError(f"simulate_cholesky needs scheme='cholesky', got {cfg.scheme!r}")
    p, grid = cfg.params, cfg.grid
    n, step = grid.n, grid.step
    theta = _driving_drift(cfg)
    t = grid.columns
    joint = cfg.cholesky_variant == "joint"
    need_fbm = p.b != 0.0
    if need_fbm and joint:
        a_cells = fbm_cell_averages(p.hurst, grid, q)
        resid = residual_cholesky(p.hurst, grid, q)
    elif need_fbm:
        factor = fbm_cholesky(p.hurst, grid)

    def build(start: int, stop: int) -> list[SamplePath]:
        draws = _draws(cfg.seed, start, stop, 2 * n if (need_fbm and joint) else n)
        xi = draws[:, :n]
        dw = math.sqrt(step) * xi + theta * step
        w = np.cumsum(dw, axis=1)
        if not need_fbm:
            bh = np.zeros_like(w)
        elif joint:
            bh = dw @ a_cells.T + draws[:, n:] @ resid.T
        else:
            bh = xi @ factor.T + theta * kernel_mass(p.hurst, t)
        return _assemble(cfg, w, bh, xi)

    logger.info("cholesky ({}) simulation: {} paths, N={}", cfg.cholesky_variant, cfg.n_paths, n)
    return _run_chunks(cfg, build, workers)


def simulate_mg_approx(cfg: SimConfig, q: QuadratureSpec = DEFAULT_QUADRATURE, workers: int | None = None) -> list[SamplePath]:
    """X = M dW with the cell-averaged forward operator M = a + b A."""
    if cfg.scheme != "mg_approx":
        raise DomainError(f"simulate_mg_approx needs scheme='mg_approx', got {cfg.scheme!r}")
    p, grid = cfg.params, cfg.grid
    n, step = grid.n, grid.step
    theta = _driving_drift(cfg)
    a_cells = fbm_cell_averages(p.hurst, grid, q) if p.b != 0.0 else None

    def build(start: int, stop: int) -> list[SamplePath]:
        xi = _draws(cfg.seed, start, stop, n)
        dw = math.sqrt(step) * xi + theta * step
        w = np.cumsum(dw, axis=1)
        bh = dw @ a_cells.T if a_cells is not None else np.zeros_like(w)
        return _assemble(cfg, w, bh, xi)

    logger.info("mg_approx simulation: {} paths, N={}", cfg.n_paths, n)
    return _run_chunks(cfg, build, workers)


def basis_functions(basis: str, horizon: float, n_terms: int) -> tuple[Callable, Callable]:
    """Orthonormal family on [0, T] and its antiderivatives from 0, as (values, integrals)."""
    if basis not in BASES:
        raise DomainError(f"unknown basis {basis!r}; choose one of {BASES}")
    k = np.arange(n_terms)
    scale = math.sqrt(2.0 / horizon)

    if basis == "cosine":
        freq = (k + 0.5) * math.pi / horizon

        def values(t):
            return scale * np.cos(np.multiply.outer(t, freq))

        def integrals(t):
            return scale * np.sin(np.multiply.outer(t, freq)) / freq

        return values, integrals

    m = (k + 1) // 2
    freq = 2.0 * math.pi * m / horizon
    is_cos = (k % 2 == 1)
    safe = np.where(m > 0, freq, 1.0)

    def values(t):
        phase = np.multiply.outer(t, freq)
        out = np.where(is_cos, scale * np.cos(phase), scale * np.sin(phase))
        return np.where(m == 0, 1.0 / math.sqrt(horizon), out)

    def integrals(t):
        phase = np.multiply.outer(t, freq)
        out = np.where(is_cos, scale * np.sin(phase) / safe, scale * (1.0 - np.cos(phase)) / safe)
        return np.where(m == 0, np.multiply.outer(t, np.ones_like(freq)) / math.sqrt(horizon), out)

    return values, integrals


@lru_cache(maxsize=8)
def series_coefficients_table(p: ModelParams, grid: TimeGrid, n_terms: int, basis: str,
                              q: QuadratureSpec = DEFAULT_QUADRATURE) -> np.ndarray:
    """e[i, k] = ∫_0^{t_i} L(t_i, s) e~_k(s) ds at the kernel columns."""
    values, integrals = basis_functions(basis, grid.horizon, n_terms)
    table = p.a * integrals(grid.columns)
    if p.b != 0.0:
        rows, cols = np.tril_indices(grid.n)
        nodes = grid.nodes
        owner, s, w = cell_rule(nodes[rows + 1], nodes[cols], nodes[cols + 1], p.alpha, q)
        weighted = w * evaluate_chunked(lambda t, u: mg_kernel(p.hurst, t, u, q), nodes[rows + 1][owner], s)
        row_of_node = rows[owner]
        moments = np.zeros((grid.n, n_terms))
        for k in range(n_terms):
            moments[:, k] = np.bincount(row_of_node, weights=weighted * values(s)[:, k], minlength=grid.n)
        table = table + p.b * moments
    return _readonly(np.asarray(table, dtype=float))


def simulate_series(cfg: SimConfig, basis: str | None = None, q: QuadratureSpec = DEFAULT_QUADRATURE,
                    workers: int | None = None) -> list[SamplePath]:
    """X(t) = sum_{k<=K} e_k(t) xi_k, e_k(t) = ∫_0^t L(t, s) e~_k(s) ds."""
    if cfg.scheme != "series":
        raise DomainError(f"simulate_series needs scheme='series', got {cfg.scheme!r}")
    p, grid = cfg.params, cfg.grid
    basis = basis or cfg.basis
    n_terms = cfg.series_terms
    theta = _driving_drift(cfg)
    t = grid.columns
    w_table = np.asarray(basis_functions(basis, grid.horizon, n_terms)[1](t))
    fbm_params = ModelParams.unchecked(0.0, 1.0, p.hurst)
    bh_table = series_coefficients_table(fbm_params, grid, n_terms, basis, q) if p.b != 0.0 else None

    def build(start: int, stop: int) -> list[SamplePath]:
        xi = _draws(cfg.seed, start, stop, n_terms)
        w = xi @ w_table.T + theta * t
        if bh_table is None:
            bh = np.zeros_like(w)
        else:
            bh = xi @ bh_table.T + theta * kernel_mass(p.hurst, t)
        return _assemble(cfg, w, bh, xi)

    logger.info("series simulation: {} paths, N={}, K={} ({})", cfg.n_paths, grid.n, n_terms, basis)
    return _run_chunks(cfg, build, workers)


def simulate(cfg: SimConfig, q: QuadratureSpec = DEFAULT_QUADRATURE, workers: int | None = None) -> list[SamplePath]:
    if cfg.scheme == "cholesky":
        return simulate_cholesky(cfg, q, workers)
    if cfg.scheme == "mg_approx":
        return simulate_mg_approx(cfg, q, workers)
    return simulate_series(cfg, q=q, workers=workers)


def recover_bm(path: SamplePath, p: ModelParams, series: SeriesSpec = DEFAULT_SERIES,
               q: QuadratureSpec = DEFAULT_QUADRATURE, method: str = "series") -> SamplePath:
    """Driving Brownian motion W_t = ∫_0^t L^-1(t, s) dX_s on the path's grid."""
    inverse = build_inverse_operator(p, path.grid, series, q, method=method)
    w = np.concatenate([[0.0], inverse.apply(path.increments())])
    return SamplePath(path.grid, path.x, w=w, xi=path.xi)


def quadratic_variation(path: SamplePath) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(np.diff(path.x) ** 2)])


def expected_quadratic_variation(p: ModelParams, grid: TimeGrid, q: QuadratureSpec = DEFAULT_QUADRATURE) -> float:
    """E[sum_k (X(t_k) - X(t_{k-1}))^2] on the grid; tends to a^2 T as N grows."""
    value = p.a**2 * grid.horizon + p.b**2 * grid.n * grid.step ** (2.0 * p.hurst)
    if p.a * p.b != 0.0:
        nodes = grid.nodes
        diagonal = kernel_cell_integral(p.hurst, nodes[1:], nodes[:-1], nodes[1:], q)
        value += 2.0 * p.a * p.b * float(np.sum(diagonal))
    return float(value)


def holder_diagnostic(p: ModelParams, lags: Sequence[float], t: float = 0.5,
                      q: QuadratureSpec = DEFAULT_QUADRATURE) -> pd.DataFrame:
    """E[(X_{t+d} - X_t)^2] / (a^2 d) for each lag d, with its small-lag expansion."""
    lags = [float(d) for d in lags]
    if not lags or any(d <= 0.0 for d in lags):
        raise DomainError("lags must be positive")
    if any(later >= earlier for earlier, later in zip(lags, lags[1:])):
        raise DomainError("lags must be strictly decreasing")
    if p.a == 0.0:
        raise DomainError("the Hölder ratio is normalized by a^2 and needs a != 0")
    alpha = p.alpha
    ratio = p.b / p.a
    rows = []
    for d in lags:
        variance = incremental_cov(p, IncrementQuery(t0=t, delta=d, t=t), q)
        leading = 2.0 * ratio * c_of_h(p.hurst) * d**alpha / (alpha * (1.0 + alpha)) + ratio**2 * d ** (2.0 * alpha)
        rows.append({"delta": d, "increment_variance": variance, "ratio": variance / (p.a**2 * d), "leading_deviation": leading})
    return pd.DataFrame(rows)


def paths_frame(paths: Sequence[SamplePath]) -> pd.DataFrame:
    """Long format: path_id, t, x, w, bh (w and bh NaN when absent)."""
    frames = []
    for path_id, path in enumerate(paths):
        n = path.grid.n + 1
        frames.append(pd.DataFrame({
            "path_id": np.full(n, path_id),
            "t": path.grid.nodes,
            "x": path.x,
            "w": path.w if path.w is not None else np.full(n, np.nan),
            "bh": path.bh if path.bh is not None else np.full(n, np.nan),
        }))
    if not frames:
        return pd.DataFrame(columns=["path_id", "t", "x", "w", "bh"])
    return pd.concat(frames, ignore_index=True)


def paths_from_frame(frame: pd.DataFrame, grid: TimeGrid) -> list[SamplePath]:
    """Inverse of paths_frame for the x column (and w/bh when complete)."""
    missing = {"path_id", "t", "x"} - set(frame.columns)
    if missing:
        raise DomainError(f"path table lacks columns {sorted(missing)}")
    paths = []
    for _, group in frame.sort_values(["path_id", "t"], kind="stable").groupby("path_id", sort=True):
        if len(group) != grid.n + 1 or not np.allclose(group["t"].to_numpy(), grid.nodes, rtol=0.0, atol=1e-9 * grid.horizon):
            raise DomainError(f"path {group['path_id'].iloc[0]} does not match the grid (T={grid.horizon}, N={grid.n})")
        parts = {}
        for name in ("w", "bh"):
            if name in group and group[name].notna().all():
                parts[name] = group[name].to_numpy(dtype=float)
        paths.append(SamplePath(grid, group["x"].to_numpy(dtype=float), **parts))
    return paths
