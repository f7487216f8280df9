from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from loguru import logger
from scipy.special import roots_legendre

from errors import DomainError
from settings import worker_count

PointFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]

# Fixed evaluation chunk; results never depend on the worker count.
CHUNK_POINTS = 1 << 16
CUSP_POWER = 3
MAX_GRADING = 40


@dataclass(frozen=True)
class QuadratureSpec:
    """Gauss–Legendre orders used after singularity-removing substitutions.

    ``node_count`` drives the pointwise kernel integrals and the graded rules
    on singular cells; ``cell_nodes`` is the plain rule on smooth cells.
    ``abs_tol`` is the tolerance handed to adaptive oracles.
    """

    node_count: int = 24
    abs_tol: float = 1e-10
    cell_nodes: int = 8

    def __post_init__(self) -> None:
        if int(self.node_count) != self.node_count or self.node_count < 2:
            raise DomainError(f"node_count must be an integer >= 2, got {self.node_count}")
        if int(self.cell_nodes) != self.cell_nodes or self.cell_nodes < 2:
            raise DomainError(f"cell_nodes must be an integer >= 2, got {self.cell_nodes}")
        if not (self.abs_tol >= 0.0 and math.isfinite(self.abs_tol)):
            raise DomainError(f"abs_tol must be finite and >= 0, got {self.abs_tol}")


DEFAULT_QUADRATURE = QuadratureSpec()


def _frozen(*arrays: np.ndarray) -> tuple[np.ndarray, ...]:
    for arr in arrays:
        arr.setflags(write=False)
    return arrays


@lru_cache(maxsize=None)
def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss–Legendre nodes and weights on [0, 1]."""
    x, w = roots_legendre(n)
    return _frozen(0.5 * (x + 1.0), 0.5 * w)


@lru_cache(maxsize=None)
def graded_rule(n: int, left: int = 1, right: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Rule on [0, 1] graded toward the endpoints.

    [0, 1/2] is mapped by x = z**left / 2 and [1/2, 1] by x = 1 - z**right / 2,
    each with n Gauss–Legendre nodes in z. A factor x**beta at an endpoint
    becomes z**(p*(beta+1) - 1) under power p.
    """
    z, wz = gauss_legendre(n)
    x_left = 0.5 * z**left
    w_left = 0.5 * left * z ** (left - 1) * wz
    x_right = 1.0 - 0.5 * z**right
    w_right = 0.5 * right * z ** (right - 1) * wz
    nodes = np.concatenate([x_left, x_right[::-1]])
    weights = np.concatenate([w_left, w_right[::-1]])
    return _frozen(nodes, weights)


def singular_power(beta: float) -> int:
    """Grading power that makes x**(-beta) smooth enough for Gauss–Legendre."""
    if not 0.0 <= beta < 1.0:
        raise DomainError(f"endpoint exponent must lie in [0, 1), got {beta}")
    return min(MAX_GRADING, max(1, math.ceil(3.0 / (1.0 - beta))))


def cell_rule(
    tau: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    alpha: float,
    q: QuadratureSpec = DEFAULT_QUADRATURE,
    graded_right: bool | np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quadrature nodes for the cells [lo_i, hi_i] of a kernel row at time tau_i.

    A cell starting at 0 carries the s**(-alpha) prefactor and a cell ending at
    tau carries the (tau - s)**alpha cusp; both get graded rules, every other
    cell a plain Gauss–Legendre rule. Returns (owner, nodes, weights) with
    ``owner`` the cell index of each node, nodes of one cell contiguous.
    ``graded_right`` forces (or suppresses) the cusp grading, e.g. when the
    cusp sits just past hi.
    """
    tau, lo, hi = (np.asarray(v, dtype=float).ravel() for v in np.broadcast_arrays(tau, lo, hi))
    if np.any(hi < lo):
        raise DomainError("cell upper limits must not be below lower limits")

    left = lo <= 0.0
    right = hi >= tau if graded_right is None else np.broadcast_to(np.asarray(graded_right, dtype=bool), tau.shape)
    p_left = singular_power(alpha)

    owners, nodes, weights = [], [], []
    for at_zero in (False, True):
        for at_tau in (False, True):
            idx = np.flatnonzero((left == at_zero) & (right == at_tau))
            if idx.size == 0:
                continue
            if at_zero or at_tau:
                x, w = graded_rule(q.node_count, p_left if at_zero else 1, CUSP_POWER if at_tau else 1)
            else:
                x, w = gauss_legendre(q.cell_nodes)
            width = (hi - lo)[idx]
            nodes.append((lo[idx, None] + width[:, None] * x).ravel())
            weights.append((width[:, None] * w).ravel())
            owners.append(np.repeat(idx, x.size))

    if not owners:
        empty = np.empty(0)
        return np.empty(0, dtype=np.intp), empty, empty
    owner = np.concatenate(owners)
    order = np.argsort(owner, kind="stable")
    return owner[order], np.concatenate(nodes)[order], np.concatenate(weights)[order]


def evaluate_chunked(fn: PointFunction, t: np.ndarray, s: np.ndarray, workers: int | None = None) -> np.ndarray:
    """Evaluate fn(t, s) over fixed-size chunks, optionally on a thread pool."""
    n = t.size
    if n == 0:
        return np.empty(0)
    starts = range(0, n, CHUNK_POINTS)
    workers = worker_count() if workers is None else workers

    def run(start: int) -> np.ndarray:
        stop = start + CHUNK_POINTS
        return np.asarray(fn(t[start:stop], s[start:stop]), dtype=float)

    if workers <= 1 or len(starts) == 1:
        parts = [run(start) for start in starts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    return np.concatenate(parts)


def integrate_cells(
    fn: PointFunction,
    tau: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    alpha: float,
    q: QuadratureSpec = DEFAULT_QUADRATURE,
    workers: int | None = None,
    graded_right: bool | np.ndarray | None = None,
) -> np.ndarray:
    """∫_{lo_i}^{hi_i} fn(tau_i, s) ds for every cell i (hi_i <= tau_i)."""
    tau_flat = np.asarray(np.broadcast_arrays(tau, lo, hi)[0], dtype=float).ravel()
    owner, s, w = cell_rule(tau, lo, hi, alpha, q, graded_right)
    logger.debug("integrating {} cells with {} nodes", tau_flat.size, s.size)
    values = evaluate_chunked(fn, tau_flat[owner], s, workers)
    return np.bincount(owner, weights=w * values, minlength=tau_flat.size)
