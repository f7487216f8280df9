from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
import pandas as pd
from loguru import logger
from numpy.polynomial import polynomial as npoly
from scipy.linalg import solve_triangular

from errors import DivergenceError, DomainError, GridMismatchError, TruncationError
from kernels import (
    DEFAULT_SERIES,
    ModelParams,
    SeriesSpec,
    c_of_h,
    check_hurst,
    inverse_kernel_mass,
    l_inverse_continuous,
    mg_kernel,
    series_coefficients,
    series_term_count,
)
from quadrature import (
    CUSP_POWER,
    DEFAULT_QUADRATURE,
    QuadratureSpec,
    gauss_legendre,
    graded_rule,
    integrate_cells,
    singular_power,
)

INVERSION_METHODS = ("series", "triangular")
RESOLVENT_TOL = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    """Equidistant nodes t_k = k T / N, k = 0..N."""

    horizon: float
    n: int

    def __post_init__(self) -> None:
        horizon = float(self.horizon)
        if not (horizon > 0.0 and math.isfinite(horizon)):
            raise DomainError(f"horizon must be positive, got {self.horizon}")
        if int(self.n) != self.n or self.n < 2:
            raise DomainError(f"grid needs an integer step count >= 2, got {self.n}")
        object.__setattr__(self, "horizon", horizon)
        object.__setattr__(self, "n", int(self.n))

    @property
    def step(self) -> float:
        return self.horizon / self.n

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n + 1) * self.horizon / self.n

    @property
    def columns(self) -> np.ndarray:
        """Kernel columns t_1..t_N (t_0 = 0 is never a column)."""
        return self.nodes[1:]

    def index_of(self, t: float) -> int:
        k = int(round(float(t) / self.step))
        if not 0 <= k <= self.n or abs(k * self.step - float(t)) > 1e-9 * max(1.0, abs(float(t))):
            raise DomainError(f"t={t} is not a node of the grid (T={self.horizon}, N={self.n})")
        return k

    def subgrid(self, k: int) -> TimeGrid:
        return TimeGrid(self.nodes[k], k)


def _check_same_grid(*grids: TimeGrid) -> None:
    first = grids[0]
    for other in grids[1:]:
        if other != first:
            raise GridMismatchError(f"grid mismatch: {first} vs {other}")


@dataclass(frozen=True, eq=False)
class TriangularKernel:
    """Lower-triangular N x N discretization of a Volterra kernel.

    Row k is time t_k, column j the cell (t_{j-1}, t_j]; applied to the
    increments of a path on those cells it gives samples at t_1..t_N.
    """

    grid: TimeGrid
    entries: np.ndarray

    def __post_init__(self) -> None:
        entries = np.array(self.entries, dtype=float)
        n = self.grid.n
        if entries.shape != (n, n):
            raise GridMismatchError(f"entries have shape {entries.shape}, grid needs {(n, n)}")
        if np.any(np.triu(entries, 1) != 0.0):
            raise DomainError("kernel entries above the diagonal must vanish")
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_callable(cls, grid: TimeGrid, fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
                      q: QuadratureSpec = DEFAULT_QUADRATURE) -> TriangularKernel:
        """Cell averages of a smooth kernel fn(t, s) on s < t."""
        x, w = gauss_legendre(q.cell_nodes)
        rows, cols = np.tril_indices(grid.n)
        nodes = grid.nodes
        s = nodes[cols, None] + grid.step * x
        t = np.broadcast_to(nodes[rows + 1, None], s.shape)
        entries = np.zeros((grid.n, grid.n))
        entries[rows, cols] = np.sum(np.asarray(fn(t, s), dtype=float) * w, axis=1)
        return cls(grid, entries)

    def apply(self, increments: np.ndarray) -> np.ndarray:
        return np.asarray(increments, dtype=float) @ self.entries.T

    def increments(self) -> np.ndarray:
        """Row differences: the increments-to-increments form of the operator."""
        return np.diff(self.entries, axis=0, prepend=0.0)

    def to_frame(self) -> pd.DataFrame:
        rows, cols = np.tril_indices(self.grid.n)
        return pd.DataFrame({"row": rows + 1, "col": cols + 1, "value": self.entries[rows, cols]})


@dataclass(frozen=True, eq=False)
class SampledFunction:
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float)
        if values.shape != (self.grid.n,):
            raise GridMismatchError(f"need {self.grid.n} values, got shape {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_callable(cls, grid: TimeGrid, fn: Callable[[np.ndarray], np.ndarray]) -> SampledFunction:
        return cls(grid, np.broadcast_to(np.asarray(fn(grid.columns), dtype=float), (grid.n,)))


def _lower_cells(grid: TimeGrid) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    rows, cols = np.tril_indices(grid.n)
    nodes = grid.nodes
    return rows, cols, nodes[rows + 1], nodes[cols], nodes[cols + 1]


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@lru_cache(maxsize=16)
def fbm_cell_averages(hurst: float, grid: TimeGrid, q: QuadratureSpec = DEFAULT_QUADRATURE) -> np.ndarray:
    h = check_hurst(hurst)
    rows, cols, tau, lo, hi = _lower_cells(grid)
    logger.debug("building fBm cell averages (H={}, N={})", h, grid.n)
    table = np.zeros((grid.n, grid.n))
    table[rows, cols] = integrate_cells(lambda t, s: mg_kernel(h, t, s, q), tau, lo, hi, h - 0.5, q) / grid.step
    return _readonly(table)


def build_forward_operator(p: ModelParams, grid: TimeGrid, q: QuadratureSpec = DEFAULT_QUADRATURE) -> TriangularKernel:
    """M[k, j] = a + b (1/h) ∫_cell_j K_H(t_k, s) ds, mapping dW increments to X(t_k)."""
    entries = p.a * np.tril(np.ones((grid.n, grid.n)))
    if p.b != 0.0:
        entries = entries + p.b * fbm_cell_averages(p.hurst, grid, q)
    return TriangularKernel(grid, entries)


def _effective_s_min(p: ModelParams, grid: TimeGrid) -> float:
    # the first cell averages s^-alpha, which is (1-alpha)^-1 h^-alpha
    return grid.step * (1.0 - p.alpha) ** (1.0 / p.alpha)


@lru_cache(maxsize=16)
def _analytic_inverse(p: ModelParams, grid: TimeGrid, series: SeriesSpec, q: QuadratureSpec) -> np.ndarray:
    if p.a == 0.0:
        raise DomainError("the inverse transfer operator needs a != 0")
    entries = np.tril(np.ones((grid.n, grid.n))) / p.a
    if p.b != 0.0:
        n_terms = series_term_count(p, series, grid.horizon, _effective_s_min(p, grid))
        rows, cols, tau, lo, hi = _lower_cells(grid)

        def continuous(t: np.ndarray, s: np.ndarray) -> np.ndarray:
            return l_inverse_continuous(p, t, s, series, q, n_terms=n_terms)

        logger.debug("building inverse cell averages (N={}, {} series terms)", grid.n, n_terms)
        entries[rows, cols] += integrate_cells(continuous, tau, lo, hi, p.alpha, q) / grid.step
    return _readonly(entries)


def _exact_forward_inverse(p: ModelParams, grid: TimeGrid, q: QuadratureSpec) -> np.ndarray:
    inc = build_forward_operator(p, grid, q).increments()
    if np.any(np.diag(inc) == 0.0):
        raise DomainError("forward operator is singular (a = 0)")
    return np.cumsum(solve_triangular(inc, np.eye(grid.n), lower=True), axis=0)


@lru_cache(maxsize=16)
def _numeric_inverse(p: ModelParams, grid: TimeGrid, series: SeriesSpec, q: QuadratureSpec) -> np.ndarray:
    entries = _exact_forward_inverse(p, grid, q)
    if p.b == 0.0:
        return _readonly(entries)
    # dW constant on the first cell cannot carry the s^-alpha mass of L^-1 there;
    # the first column is rebuilt so each row integrates to the closed-form mass.
    try:
        mass = inverse_kernel_mass(p, grid.columns, series)
    except TruncationError as exc:
        logger.warning("keeping the plain first column of the triangular inverse: {}", exc)
        return _readonly(entries)
    entries[:, 0] = mass / grid.step - entries[:, 1:].sum(axis=1)
    return _readonly(entries)


def build_inverse_operator(
    p: ModelParams,
    grid: TimeGrid,
    series: SeriesSpec = DEFAULT_SERIES,
    q: QuadratureSpec = DEFAULT_QUADRATURE,
    method: str = "series",
) -> TriangularKernel:
    """Discretized L^-1 mapping the increments of X to samples of W.

    ``series`` averages the analytic kernel over cells; ``triangular`` inverts
    the discretized forward operator and serves as its oracle. Its first
    column is refitted to the closed-form row mass of L^-1, so it inverts the
    forward operator exactly only on columns 2..N.
    """
    if method == "series":
        return TriangularKernel(grid, _analytic_inverse(p, grid, series, q))
    if method == "triangular":
        return TriangularKernel(grid, _numeric_inverse(p, grid, series, q))
    raise DomainError(f"unknown inversion method {method!r}; choose one of {INVERSION_METHODS}")


def identity_residual(forward: TriangularKernel, inverse: TriangularKernel) -> float:
    _check_same_grid(forward.grid, inverse.grid)
    product = forward.increments() @ inverse.increments()
    return float(np.max(np.abs(product - np.eye(forward.grid.n))))


@lru_cache(maxsize=32)
def _cell_moments(alpha: float, coeffs: tuple[float, ...], step: float, n: int,
                  q: QuadratureSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Moments of w(x) = x^(alpha-1) P(x^alpha) over the cells [d h, (d+1) h], d = 0..n-2.

    With z the local coordinate of x in its cell, mu0, mu1 and nu weight w by
    1, z and (1-z)^alpha. The d = 0 cell has closed forms for mu0 and mu1.
    """
    p = np.asarray(coeffs)
    exponents = alpha * np.arange(1, p.size + 1)
    gaps = np.arange(n - 1, dtype=float)

    def weight(x: np.ndarray) -> np.ndarray:
        return x ** (alpha - 1.0) * npoly.polyval(x**alpha, p)

    mu0 = np.empty(n - 1)
    mu1 = np.empty(n - 1)
    powers = step**exponents
    mu0[:1] = np.sum(p * powers / exponents)
    mu1[:1] = np.sum(p * powers / (exponents + 1.0))
    z, wz = gauss_legendre(q.node_count)
    values = weight(step * (gaps[1:, None] + z))
    mu0[1:] = step * values @ wz
    mu1[1:] = step * values @ (wz * z)

    zg, wg = graded_rule(q.node_count, singular_power(1.0 - alpha), CUSP_POWER)
    nu = step * weight(step * (gaps[:, None] + zg)) @ (wg * (1.0 - zg) ** alpha)
    return _readonly(mu0), _readonly(mu1), _readonly(nu)


def _product_weights(moments: tuple[np.ndarray, np.ndarray, np.ndarray], n: int, horizon_cusp: bool) -> np.ndarray:
    """W[k, j]: weight of node j in ∫_{t_k}^T g(u) w(u - t_k) du.

    g is linear on each cell, or linear in (T - u)^alpha on the last one when
    ``horizon_cusp`` is set.
    """
    mu0, mu1, nu = moments
    idx = np.arange(n)
    gap = idx[None, :] - idx[:, None]
    out = np.zeros((n, n))
    starts = (gap >= 0) & (idx[None, :] <= n - 2)
    out[starts] = (mu0 - mu1)[gap[starts]]
    ends = gap >= 1
    out[ends] += mu1[gap[ends] - 1]
    if horizon_cusp:
        rows = idx[: n - 1]
        d = n - 2 - rows
        out[rows, n - 2] += nu[d] - (mu0 - mu1)[d]
        out[rows, n - 1] += mu0[d] - nu[d] - mu1[d]
    return out


def _adjoint_matrix(alpha: float, coeffs: np.ndarray, grid: TimeGrid, q: QuadratureSpec,
                    diagonal: float, horizon_cusp: bool) -> np.ndarray:
    """diagonal f(t) + t^-alpha ∫_t^T u^alpha f(u) w(u - t) du as a matrix on t_1..t_N.

    Product integration: u^alpha f(u) is interpolated, so f may carry the
    s^-alpha singularity at 0 and the weight is integrated exactly per cell.
    """
    t = grid.columns
    moments = _cell_moments(alpha, tuple(float(c) for c in coeffs), grid.step, grid.n, q)
    weights = _product_weights(moments, grid.n, horizon_cusp)
    return diagonal * np.eye(grid.n) + t[:, None] ** -alpha * weights * t[None, :] ** alpha


def kstar_matrix(hurst: float, grid: TimeGrid, q: QuadratureSpec = DEFAULT_QUADRATURE) -> np.ndarray:
    h = check_hurst(hurst)
    return _adjoint_matrix(h - 0.5, np.array([c_of_h(h)]), grid, q, 0.0, horizon_cusp=False)


def lstar_matrix(p: ModelParams, grid: TimeGrid, q: QuadratureSpec = DEFAULT_QUADRATURE) -> np.ndarray:
    out = p.a * np.eye(grid.n)
    if p.b != 0.0:
        out = out + p.b * kstar_matrix(p.hurst, grid, q)
    return out


def lstar_inverse_matrix(p: ModelParams, grid: TimeGrid, series: SeriesSpec = DEFAULT_SERIES,
                         q: QuadratureSpec = DEFAULT_QUADRATURE) -> np.ndarray:
    """Matrix of (L*)^-1 on the grid's horizon.

    The 1/a jump of s -> L^-1(s, t) at s = t gives the diagonal. Its
    continuous part (1/a) (s/t)^alpha (s-t)^(alpha-1) P((s-t)^alpha) is
    integrated against f by product integration; inputs of (L*)^-1 carry a
    (T - t)^alpha cusp at the horizon, which the last cell resolves.
    """
    if p.a == 0.0:
        raise DomainError("(L*)^-1 needs a != 0")
    if p.b == 0.0:
        return np.eye(grid.n) / p.a
    n_terms = series_term_count(p, series, grid.horizon, grid.step)
    coeffs = series_coefficients(p, n_terms) / p.a
    return _adjoint_matrix(p.alpha, coeffs, grid, q, 1.0 / p.a, horizon_cusp=True)


def apply_kstar(hurst: float, f: SampledFunction, q: QuadratureSpec = DEFAULT_QUADRATURE) -> SampledFunction:
    return SampledFunction(f.grid, kstar_matrix(hurst, f.grid, q) @ f.values)


def apply_lstar(p: ModelParams, f: SampledFunction, q: QuadratureSpec = DEFAULT_QUADRATURE) -> SampledFunction:
    return SampledFunction(f.grid, lstar_matrix(p, f.grid, q) @ f.values)


def apply_lstar_inverse(p: ModelParams, f: SampledFunction, series: SeriesSpec = DEFAULT_SERIES,
                        q: QuadratureSpec = DEFAULT_QUADRATURE) -> SampledFunction:
    """(L*)^-1 f(t) = f(t) L^-1(T, t) + ∫_t^T [f(s) - f(t)] L^-1(ds, t)."""
    return SampledFunction(f.grid, lstar_inverse_matrix(p, f.grid, series, q) @ f.values)


def kstar_norm_bound(hurst: float, horizon: float) -> float:
    """Bound on ||K*_H||^2 over L^2([0, T])."""
    h = check_hurst(hurst)
    return h * (2.0 * h - 1.0) * horizon ** (2.0 * h - 1.0) / (h - 0.5)


def kstar_norm_squared(hurst: float, grid: TimeGrid, q: QuadratureSpec = DEFAULT_QUADRATURE) -> float:
    return float(np.linalg.norm(kstar_matrix(hurst, grid, q), 2) ** 2)


def _compose(left: np.ndarray, right: np.ndarray, step: float) -> np.ndarray:
    # ∫_s^t left(t, u) right(u, s) du; the cell holding s is only half covered
    return step * (left @ right) - 0.5 * step * left * np.diag(right)[None, :]


def resolvent_kernel(ell: TriangularKernel, grid: TimeGrid | None = None, tol: float = RESOLVENT_TOL) -> TriangularKernel:
    """Neumann series sum_{k>=1} ell^(k) of iterated Volterra compositions."""
    if grid is not None:
        _check_same_grid(ell.grid, grid)
    n = ell.grid.n
    step = ell.grid.step
    term = np.array(ell.entries)
    total = term.copy()
    norm = float(np.max(np.abs(term)))
    growing = 0
    converged = norm < tol
    for iteration in range(n):
        if converged:
            break
        term = _compose(ell.entries, term, step)
        new_norm = float(np.max(np.abs(term)))
        total += term
        growing = growing + 1 if new_norm > norm else 0
        if growing >= n:
            raise DivergenceError(f"resolvent series terms grew for {n} consecutive iterations")
        norm = new_norm
        converged = norm < tol
    if not converged:
        logger.warning("resolvent series stopped after {} iterations with term norm {:.3g}", n, norm)
    return TriangularKernel(ell.grid, np.tril(total))
