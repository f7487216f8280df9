from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np
import pandas as pd
from loguru import logger
from scipy.linalg import cho_factor, cho_solve

from covariance import covariance_table
from errors import DomainError, GridMismatchError
from kernels import DEFAULT_SERIES, ModelParams, SeriesSpec, l_kernel, mg_kernel
from operators import SampledFunction, TimeGrid, TriangularKernel, lstar_inverse_matrix
from quadrature import CUSP_POWER, DEFAULT_QUADRATURE, QuadratureSpec, graded_rule
from simulation import SamplePath, recover_bm


@dataclass(frozen=True)
class DriftHypothesis:
    theta: float

    def __post_init__(self) -> None:
        theta = float(self.theta)
        if not math.isfinite(theta):
            raise DomainError(f"drift must be finite, got {self.theta}")
        object.__setattr__(self, "theta", theta)


@dataclass(frozen=True, eq=False)
class EquivalenceSpec:
    """Kernel ell and drift g of W~ = W - ∫∫ ell dW ds - ∫ g ds."""

    ell: TriangularKernel
    g: SampledFunction

    def __post_init__(self) -> None:
        if self.ell.grid != self.g.grid:
            raise GridMismatchError(f"ell lives on {self.ell.grid}, g on {self.g.grid}")

    @classmethod
    def constant_drift(cls, grid: TimeGrid, theta: float) -> EquivalenceSpec:
        return cls(TriangularKernel(grid, np.zeros((grid.n, grid.n))), SampledFunction(grid, np.full(grid.n, float(theta))))


@dataclass(frozen=True, eq=False)
class PredictionResult:
    """Conditional law of X at the targets given the path up to u.

    ``psi[i, k]`` is Psi(target_i, t_{k+1} | u) and ``weights`` the same
    predictor expressed on the samples x(t_1)..x(u); both and ``cov`` depend
    only on the model, the grid and (u, targets).
    """

    u: float
    targets: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    psi: np.ndarray
    weights: np.ndarray

    def to_frames(self) -> tuple[pd.DataFrame, pd.DataFrame]:
        mean = pd.DataFrame({"t": self.targets, "mean": self.mean})
        t, s = np.meshgrid(self.targets, self.targets, indexing="ij")
        cov = pd.DataFrame({"t": t.ravel(), "s": s.ravel(), "cov": self.cov.ravel()})
        return mean, cov


class ConditionalLaw(NamedTuple):
    weights: np.ndarray
    cov: np.ndarray
    observed_cov: np.ndarray


def _terminal_bm(path: SamplePath, p: ModelParams, series: SeriesSpec, q: QuadratureSpec, method: str) -> float:
    return float(recover_bm(path, p, series, q, method=method).w[-1])


def drift_log_likelihood(path: SamplePath, hyp: DriftHypothesis, p: ModelParams,
                         series: SeriesSpec = DEFAULT_SERIES, q: QuadratureSpec = DEFAULT_QUADRATURE,
                         method: str = "series") -> float:
    """theta w_T - theta^2 T / 2 with w the Brownian motion recovered from the path."""
    if hyp.theta == 0.0:
        return 0.0
    w_t = _terminal_bm(path, p, series, q, method)
    horizon = path.grid.horizon
    return hyp.theta * w_t - 0.5 * hyp.theta**2 * horizon


def drift_mle(path: SamplePath, p: ModelParams, series: SeriesSpec = DEFAULT_SERIES,
              q: QuadratureSpec = DEFAULT_QUADRATURE, method: str = "series") -> float:
    return _terminal_bm(path, p, series, q, method) / path.grid.horizon


def girsanov_log_likelihood(w_path: SamplePath, spec: EquivalenceSpec) -> float:
    """Left-point sums of ∫ Z dW - 1/2 ∫ Z^2 ds with Z(s) = ∫_0^s ell(s, u) dW_u + g(s).

    Bm samples are read from ``w`` when present, otherwise from ``x``.
    """
    if w_path.grid != spec.ell.grid:
        raise GridMismatchError(f"path lives on {w_path.grid}, likelihood kernel on {spec.ell.grid}")
    w = w_path.w if w_path.w is not None else w_path.x
    dw = np.diff(w)
    z = np.tril(spec.ell.entries, -1) @ dw + spec.g.values
    return float(z @ dw - 0.5 * w_path.grid.step * np.sum(z**2))


def _target_indices(grid: TimeGrid, n_u: int, targets: Sequence[float]) -> np.ndarray:
    if len(targets) == 0:
        raise DomainError("at least one target time is needed")
    idx = np.array([grid.index_of(t) for t in targets])
    if np.any(idx < n_u):
        raise DomainError(f"targets must not precede u={grid.nodes[n_u]}")
    return idx


def _conditional_covariance(p: ModelParams, u: float, times: np.ndarray, q: QuadratureSpec) -> np.ndarray:
    """∫_u^{t∧s} L(t, v) L(s, v) dv as a Gram matrix over panels between u and the targets."""
    edges = np.unique(np.concatenate([[u], times[times > u]]))
    x, w = graded_rule(q.node_count, 1, CUSP_POWER)
    cov = np.zeros((times.size, times.size))
    for lo, hi in zip(edges[:-1], edges[1:]):
        live = times >= hi
        v = lo + (hi - lo) * x
        t_grid, v_grid = np.meshgrid(times[live], v, indexing="ij")
        values = np.asarray(l_kernel(p, t_grid, v_grid, q), dtype=float)
        block = (values * (w * (hi - lo))) @ values.T
        cov[np.ix_(live, live)] += block
    return cov


@lru_cache(maxsize=16)
def prediction_operator(p: ModelParams, grid: TimeGrid, u: float, targets: tuple[float, ...],
                        series: SeriesSpec = DEFAULT_SERIES,
                        q: QuadratureSpec = DEFAULT_QUADRATURE) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Psi on the cells of [0, u], the matching sample weights, and the conditional covariance."""
    n_u = grid.index_of(u)
    if n_u < 2:
        raise DomainError(f"prediction needs at least two observed steps, u={u} gives {n_u}")
    idx = _target_indices(grid, n_u, targets)
    times = grid.nodes[idx]
    u_node = grid.nodes[n_u]
    sub = grid.subgrid(n_u)
    cols = sub.columns

    psi = np.zeros((times.size, n_u))
    if p.b != 0.0:
        # L(t, .) - L(u, .) on [0, u): the Bm indicator cancels
        t_grid, s_grid = np.meshgrid(times, cols, indexing="ij")
        f = p.b * (np.asarray(mg_kernel(p.hurst, t_grid, s_grid, q)) - np.asarray(mg_kernel(p.hurst, u_node, s_grid, q)))
        psi = f @ lstar_inverse_matrix(p, sub, series, q).T
    weights = psi - np.concatenate([psi[:, 1:], np.zeros((times.size, 1))], axis=1)
    weights[:, -1] += 1.0

    cov = _conditional_covariance(p, u_node, times, q)
    logger.debug("prediction operator: u={}, {} targets, {} observed steps", u_node, times.size, n_u)
    for arr in (psi, weights, cov):
        arr.setflags(write=False)
    return psi, weights, cov


def predict(path: SamplePath, p: ModelParams, u: float, targets: Sequence[float],
            series: SeriesSpec = DEFAULT_SERIES, q: QuadratureSpec = DEFAULT_QUADRATURE) -> PredictionResult:
    """Conditional mean X_u + ∫_0^u Psi(t, s | u) dX_s and deterministic covariance at the targets."""
    grid = path.grid
    key = tuple(float(grid.nodes[grid.index_of(t)]) for t in targets)
    psi, weights, cov = prediction_operator(p, grid, float(grid.nodes[grid.index_of(u)]), key, series, q)
    n_u = psi.shape[1]
    dx = path.increments()[:n_u]
    mean = path.x[n_u] + psi @ dx
    return PredictionResult(float(grid.nodes[n_u]), np.array(key), mean, cov, psi, weights)


def schur_conditioning(p: ModelParams, grid: TimeGrid, u: float, targets: Sequence[float],
                       q: QuadratureSpec = DEFAULT_QUADRATURE) -> ConditionalLaw:
    """Finite-dimensional Gaussian conditioning on x(t_1)..x(u) from the full covariance table."""
    n_u = grid.index_of(u)
    idx = _target_indices(grid, n_u, targets)
    if np.any(idx == n_u):
        raise DomainError("conditioning targets must lie strictly after u")
    observed = grid.nodes[1 : n_u + 1]
    later = np.unique(grid.nodes[idx])
    table = covariance_table(p, np.concatenate([observed, later]), q)
    c_oo = table[:n_u, :n_u]
    c_to = table[n_u:, :n_u]
    factor = cho_factor(c_oo, lower=True)
    weights = cho_solve(factor, c_to.T).T
    cov = table[n_u:, n_u:] - weights @ c_to.T
    order = np.searchsorted(later, grid.nodes[idx])
    return ConditionalLaw(weights[order], 0.5 * (cov + cov.T)[np.ix_(order, order)], c_oo)


def mean_weight_error(weights: np.ndarray, reference: np.ndarray, observed_cov: np.ndarray) -> np.ndarray:
    """Per-target RMS error of a linear predictor relative to the RMS of the reference predictor."""
    diff = weights - reference
    num = np.einsum("ij,jk,ik->i", diff, observed_cov, diff)
    den = np.einsum("ij,jk,ik->i", reference, observed_cov, reference)
    return np.sqrt(num / den)
