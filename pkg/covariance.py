from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from errors import DomainError
from kernels import ModelParams, c_of_h, check_hurst, kernel_mass, mg_kernel
from quadrature import (
    CUSP_POWER,
    DEFAULT_QUADRATURE,
    QuadratureSpec,
    gauss_legendre,
    graded_rule,
    integrate_cells,
    singular_power,
)


@dataclass(frozen=True)
class IncrementQuery:
    t0: float
    delta: float
    t: float

    def __post_init__(self) -> None:
        for name in ("t0", "delta", "t"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise DomainError(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        if self.delta <= 0.0:
            raise DomainError(f"delta must be positive, got {self.delta}")
        if self.t0 < 0.0 or self.t < 0.0:
            raise DomainError("increment start times must be nonnegative")


def _nonnegative(*values) -> list[np.ndarray]:
    arrays = [np.asarray(v, dtype=float) for v in values]
    if any(np.any(arr < 0.0) for arr in arrays):
        raise DomainError("times must be nonnegative")
    return arrays


def fbm_cov(hurst: float, t, s):
    """(t^2H + s^2H - |t-s|^2H) / 2; any H in (0, 1), so H = 1/2 gives min(t, s)."""
    h = float(hurst)
    if not 0.0 < h < 1.0:
        raise DomainError(f"Hurst index must lie in (0, 1), got {hurst}")
    t_arr, s_arr = _nonnegative(t, s)
    out = 0.5 * (t_arr ** (2 * h) + s_arr ** (2 * h) - np.abs(t_arr - s_arr) ** (2 * h))
    return float(out) if np.ndim(out) == 0 else out


def kernel_cell_integral(hurst: float, tau, lo, hi, q: QuadratureSpec = DEFAULT_QUADRATURE, graded_right=None):
    """∫_lo^min(hi, tau) K_H(tau, s) ds, elementwise."""
    h = check_hurst(hurst)
    tau_arr, lo_arr, hi_arr = np.broadcast_arrays(*_nonnegative(tau, lo, hi))
    shape = tau_arr.shape
    upper = np.minimum(hi_arr, tau_arr)
    lower = np.minimum(lo_arr, upper)
    out = integrate_cells(
        lambda t, s: mg_kernel(h, t, s, q), tau_arr, lower, upper, h - 0.5, q, graded_right=graded_right
    )
    out = out.reshape(shape)
    return float(out) if out.ndim == 0 else out


def cross_cov(hurst: float, t, s, q: QuadratureSpec = DEFAULT_QUADRATURE):
    """E[W_t B^H_s] = ∫_0^{t∧s} K_H(s, u) du."""
    h = check_hurst(hurst)
    t_arr, s_arr = np.broadcast_arrays(*_nonnegative(t, s))
    out = np.zeros(t_arr.shape)
    full = t_arr >= s_arr
    out[full] = kernel_mass(h, s_arr[full])
    part = ~full & (t_arr > 0.0)
    if part.any():
        # the cusp at u = s sits just past the upper limit t
        out[part] = kernel_cell_integral(h, s_arr[part], 0.0, t_arr[part], q, graded_right=True)
    return float(out) if out.ndim == 0 else out


def ccmfbm_cov(p: ModelParams, t, s, q: QuadratureSpec = DEFAULT_QUADRATURE):
    t_arr, s_arr = np.broadcast_arrays(*_nonnegative(t, s))
    out = p.a**2 * np.minimum(t_arr, s_arr)
    if p.b != 0.0:
        out = out + p.b**2 * fbm_cov(p.hurst, t_arr, s_arr)
        if p.a != 0.0:
            out = out + p.a * p.b * (cross_cov(p.hurst, s_arr, t_arr, q) + cross_cov(p.hurst, t_arr, s_arr, q))
    out = np.asarray(out, dtype=float)
    return float(out) if out.ndim == 0 else out


def cross_cov_table(hurst: float, nodes: np.ndarray, q: QuadratureSpec = DEFAULT_QUADRATURE) -> np.ndarray:
    """G[i, k] = E[W(n_i) B^H(n_k)] on increasing positive nodes, built from per-cell integrals."""
    h = check_hurst(hurst)
    nodes = np.asarray(nodes, dtype=float)
    if nodes.ndim != 1 or nodes.size == 0 or nodes[0] <= 0.0 or np.any(np.diff(nodes) <= 0.0):
        raise DomainError("nodes must be a strictly increasing sequence of positive times")
    n = nodes.size
    edges = np.concatenate([[0.0], nodes])
    rows, cols = np.tril_indices(n)
    cells = np.zeros((n, n))
    cells[rows, cols] = kernel_cell_integral(h, nodes[rows], edges[cols], edges[cols + 1], q)

    # G[i, k] = sum_{j <= i} cells[k, j] below the diagonal, closed form on and above it.
    partial = np.cumsum(cells, axis=1).T
    full = np.broadcast_to(kernel_mass(h, nodes), (n, n))
    on_or_below = np.arange(n)[:, None] >= np.arange(n)[None, :]
    return np.where(on_or_below, full, partial)


def covariance_table(p: ModelParams, nodes: np.ndarray, q: QuadratureSpec = DEFAULT_QUADRATURE) -> np.ndarray:
    nodes = np.asarray(nodes, dtype=float)
    t, s = np.meshgrid(nodes, nodes, indexing="ij")
    table = p.a**2 * np.minimum(t, s)
    if p.b != 0.0:
        table = table + p.b**2 * fbm_cov(p.hurst, t, s)
        if p.a != 0.0:
            g = cross_cov_table(p.hurst, nodes, q)
            table = table + p.a * p.b * (g + g.T)
    return table


def increment_covariance(table: np.ndarray) -> np.ndarray:
    """Covariance of successive increments from a sample covariance table (first node after 0)."""
    d = np.diff(np.asarray(table, dtype=float), axis=0, prepend=0.0)
    return np.diff(d, axis=1, prepend=0.0)


def kernel_product_integral(hurst: float, t, s, q: QuadratureSpec = DEFAULT_QUADRATURE, upper=None):
    """∫_0^U K_H(t, v) K_H(s, v) dv with U = upper (default t ∧ s).

    The product behaves like v^(1-2H) at 0 and has a cusp at t ∧ s, so the
    rule is graded toward both ends.
    """
    h = check_hurst(hurst)
    t_arr, s_arr = np.broadcast_arrays(*_nonnegative(t, s))
    top = np.minimum(t_arr, s_arr)
    u_arr = top if upper is None else np.broadcast_to(_nonnegative(upper)[0], top.shape)
    if np.any(u_arr > top * (1.0 + 1e-12)):
        raise DomainError("upper limit must not exceed min(t, s)")
    x, w = graded_rule(q.node_count, singular_power(2.0 * h - 1.0), CUSP_POWER)
    flat_u = u_arr.reshape(-1, 1)
    v = flat_u * x
    live = flat_u[:, 0] > 0.0
    out = np.zeros(flat_u.shape[0])
    if live.any():
        vt = np.broadcast_to(t_arr.reshape(-1, 1), v.shape)[live]
        vs = np.broadcast_to(s_arr.reshape(-1, 1), v.shape)[live]
        vv = v[live]
        prod = mg_kernel(h, vt, vv, q) * mg_kernel(h, vs, vv, q)
        out[live] = np.sum(prod * w, axis=1) * flat_u[live, 0]
    out = out.reshape(top.shape)
    return float(out) if out.ndim == 0 else out


def l_product_integral(p: ModelParams, t, s, upper, q: QuadratureSpec = DEFAULT_QUADRATURE):
    t_arr, s_arr, u_arr = np.broadcast_arrays(*_nonnegative(t, s, upper))
    out = p.a**2 * u_arr
    if p.b != 0.0:
        out = out + p.b**2 * kernel_product_integral(p.hurst, t_arr, s_arr, q, upper=u_arr)
        if p.a != 0.0:
            out = out + p.a * p.b * (cross_cov(p.hurst, u_arr, t_arr, q) + cross_cov(p.hurst, u_arr, s_arr, q))
    out = np.asarray(out, dtype=float)
    return float(out) if out.ndim == 0 else out


def _separated_increment(hurst: float, w_lo: float, w_hi: float, b_lo: float, b_hi: float, q: QuadratureSpec) -> float:
    """c ∫_{w_lo}^{w_hi} s^-alpha ∫_{b_lo}^{b_hi} u^alpha (u-s)^(alpha-1) du ds for w_hi < b_lo."""
    alpha = hurst - 0.5
    if w_lo == 0.0:
        xs, ws = graded_rule(q.node_count, singular_power(alpha), 1)
    else:
        xs, ws = gauss_legendre(q.node_count)
    xu, wu = gauss_legendre(q.node_count)
    s = w_lo + (w_hi - w_lo) * xs
    u = b_lo + (b_hi - b_lo) * xu
    inner = (u[None, :] ** alpha * (u[None, :] - s[:, None]) ** (alpha - 1.0)) @ wu * (b_hi - b_lo)
    return float(c_of_h(hurst) * np.sum(s ** (-alpha) * inner * ws) * (w_hi - w_lo))


def w_b_increment_cov(hurst: float, w_lo: float, w_hi: float, b_lo: float, b_hi: float,
                      q: QuadratureSpec = DEFAULT_QUADRATURE) -> float:
    """E[(W(w_hi) - W(w_lo)) (B^H(b_hi) - B^H(b_lo))] = ∫_{w_lo}^{w_hi} [K_H(b_hi, s) - K_H(b_lo, s)] ds."""
    h = check_hurst(hurst)
    if w_lo >= b_hi or w_hi <= w_lo:
        return 0.0
    separation = b_lo - w_hi
    if separation >= max(w_hi - w_lo, b_hi - b_lo):
        return _separated_increment(h, w_lo, w_hi, b_lo, b_hi, q)
    value = kernel_cell_integral(h, b_hi, w_lo, w_hi, q, graded_right=True)
    if b_lo > w_lo:
        value -= kernel_cell_integral(h, b_lo, w_lo, w_hi, q, graded_right=True)
    return float(value)


def incremental_cov(p: ModelParams, iq: IncrementQuery, q: QuadratureSpec = DEFAULT_QUADRATURE) -> float:
    """Covariance of X(t0+delta) - X(t0) and X(t+delta) - X(t).

    Equal to R(t0+d, t+d) - R(t0+d, t) - R(t0, t+d) + R(t0, t), assembled
    component by component so the far-lag values keep their precision.
    """
    t0, d, t = iq.t0, iq.delta, iq.t
    overlap = max(0.0, min(t0, t) + d - max(t0, t))
    value = p.a**2 * overlap
    if p.b != 0.0:
        lag = t - t0
        two_h = 2.0 * p.hurst
        value += p.b**2 * 0.5 * (abs(lag + d) ** two_h + abs(lag - d) ** two_h - 2.0 * abs(lag) ** two_h)
        if p.a != 0.0:
            cross = w_b_increment_cov(p.hurst, t0, t0 + d, t, t + d, q)
            cross += w_b_increment_cov(p.hurst, t, t + d, t0, t0 + d, q)
            value += p.a * p.b * cross
    return float(value)


def lrd_asymptote(p: ModelParams, iq: IncrementQuery) -> float:
    t0, d, t = iq.t0, iq.delta, iq.t
    if not t > t0 + d:
        raise DomainError("the asymptotic regime needs t > t0 + delta")
    if t0 <= 0.0 and p.a * p.b != 0.0:
        raise DomainError("the cross-term asymptote needs t0 > 0")
    h = p.hurst
    alpha = h - 0.5
    lag = t - t0
    value = p.b**2 * h * (2.0 * h - 1.0) * d**2 * lag ** (2.0 * h - 2.0)
    if p.a * p.b != 0.0:
        value += p.a * p.b * d**2 * c_of_h(h) * (t / t0) ** alpha * lag ** (alpha - 1.0)
    return float(value)
