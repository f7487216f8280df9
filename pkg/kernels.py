from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from loguru import logger
from numpy.polynomial import polynomial as npoly
from scipy.special import gamma, gammaln

from errors import DomainError, TruncationError
from quadrature import DEFAULT_QUADRATURE, QuadratureSpec, gauss_legendre

_POINT_CHUNK = 1 << 14
_EPS = float(np.finfo(float).eps)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def check_hurst(hurst: float) -> float:
    h = float(hurst)
    if not 0.5 < h < 1.0:
        raise DomainError(f"Hurst index must lie in the open interval (1/2, 1), got {hurst}")
    return h


@dataclass(frozen=True)
class ModelParams:
    """Mixture X = a W + b B^H where B^H is built from the same Brownian motion W."""

    a: float
    b: float
    hurst: float
    checked: bool = field(default=True, compare=False, repr=False)

    def __post_init__(self) -> None:
        for name in ("a", "b", "hurst"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise DomainError(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        check_hurst(self.hurst)
        if self.checked and self.a * self.b == 0.0:
            raise DomainError(f"a*b must be nonzero, got a={self.a}, b={self.b}")

    @classmethod
    def unchecked(cls, a: float, b: float, hurst: float) -> ModelParams:
        """Degenerate mixtures (a = 0 or b = 0), used by pure Bm / pure fBm oracles."""
        return cls(a, b, hurst, checked=False)

    @property
    def alpha(self) -> float:
        return self.hurst - 0.5

    @property
    def ratio(self) -> float:
        if self.a == 0.0:
            raise DomainError("the inverse transfer kernel needs a != 0")
        return self.b / self.a


@dataclass(frozen=True)
class SeriesSpec:
    tol: float = 1e-10
    max_terms: int = 60

    def __post_init__(self) -> None:
        if not (self.tol > 0.0 and math.isfinite(self.tol)):
            raise DomainError(f"series tol must be positive, got {self.tol}")
        if int(self.max_terms) != self.max_terms or self.max_terms < 1:
            raise DomainError(f"max_terms must be a positive integer, got {self.max_terms}")


DEFAULT_SERIES = SeriesSpec()


def c_of_h(hurst: float, allow_limit: bool = False) -> float:
    """Normalizing constant of the Molchan–Golosov kernel.

    ``allow_limit`` admits the endpoints H = 1/2 and H = 1, where the
    constant vanishes.
    """
    h = float(hurst)
    if allow_limit and h in (0.5, 1.0):
        return 0.0
    h = check_hurst(h)
    ratio = 2.0 * h * gamma(1.5 - h) / (gamma(h + 0.5) * gamma(2.0 - 2.0 * h))
    return float(math.sqrt(ratio) * (h - 0.5))


def _as_times(t, s) -> tuple[np.ndarray, np.ndarray, bool]:
    scalar = np.ndim(t) == 0 and np.ndim(s) == 0
    t_arr, s_arr = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(s, dtype=float))
    return np.array(t_arr, dtype=float), np.array(s_arr, dtype=float), scalar


def _finish(values: np.ndarray, scalar: bool):
    return float(values.reshape(-1)[0]) if scalar else values


def _require_positive_s(s: np.ndarray) -> None:
    if np.any(~(s > 0.0)):
        raise DomainError("kernel columns need s > 0; the s^-(H-1/2) prefactor is singular at 0")


def _tail_chunk(s: np.ndarray, t: np.ndarray, alpha: float, coeffs: np.ndarray, q: QuadratureSpec) -> np.ndarray:
    z, wz = gauss_legendre(q.node_count)
    gap = t - s

    # u - s in [0, min(gap, s)]: w = (u - s)^alpha.
    w_end = np.minimum(gap, s) ** alpha
    w = w_end[:, None] * z
    near = (s[:, None] + w ** (1.0 / alpha)) ** alpha * npoly.polyval(w, coeffs)
    out = (np.sum(near * wz, axis=1)) * w_end / alpha

    # u - s in [s, gap]: x = (u - s)^(2 alpha), only when gap > s.
    far = np.flatnonzero(gap > s)
    if far.size:
        sf = s[far]
        x0 = sf ** (2.0 * alpha)
        x1 = gap[far] ** (2.0 * alpha)
        x = x0[:, None] + (x1 - x0)[:, None] * z
        r = x ** (0.5 / alpha)
        vals = (1.0 + sf[:, None] / r) ** alpha * npoly.polyval(np.sqrt(x), coeffs)
        out[far] += np.sum(vals * wz, axis=1) * (x1 - x0) / (2.0 * alpha)
    return out


def _tail_integral(s: np.ndarray, t: np.ndarray, alpha: float, coeffs: np.ndarray, q: QuadratureSpec) -> np.ndarray:
    """∫_s^t u^alpha (u-s)^(alpha-1) P((u-s)^alpha) du for 0 < s < t, P = sum coeffs[m] w^m."""
    out = np.empty_like(s)
    for start in range(0, s.size, _POINT_CHUNK):
        part = slice(start, start + _POINT_CHUNK)
        out[part] = _tail_chunk(s[part], t[part], alpha, coeffs, q)
    return out


_UNIT = np.ones(1)


def mg_kernel(hurst: float, t, s, q: QuadratureSpec = DEFAULT_QUADRATURE):
    h = check_hurst(hurst)
    alpha = h - 0.5
    t_arr, s_arr, scalar = _as_times(t, s)
    _require_positive_s(s_arr)
    out = np.zeros(t_arr.shape)
    live = s_arr < t_arr
    if live.any():
        sl, tl = s_arr[live], t_arr[live]
        out[live] = c_of_h(h) * sl ** (-alpha) * _tail_integral(sl, tl, alpha, _UNIT, q)
    return _finish(out, scalar)


def mg_kernel_dt(hurst: float, t, s):
    h = check_hurst(hurst)
    alpha = h - 0.5
    t_arr, s_arr, scalar = _as_times(t, s)
    _require_positive_s(s_arr)
    if np.any(s_arr >= t_arr):
        raise DomainError("mg_kernel_dt needs s < t")
    out = c_of_h(h) * (t_arr / s_arr) ** alpha * (t_arr - s_arr) ** (alpha - 1.0)
    return _finish(out, scalar)


def kernel_mass(hurst: float, t):
    h = check_hurst(hurst)
    alpha = h - 0.5
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0.0):
        raise DomainError("times must be nonnegative")
    kappa = c_of_h(h) * gamma(alpha) * gamma(1.0 - alpha) / (alpha + 1.0)
    out = kappa * t_arr ** (alpha + 1.0)
    return float(out) if np.ndim(t) == 0 else out


def l_kernel(p: ModelParams, t, s, q: QuadratureSpec = DEFAULT_QUADRATURE):
    t_arr, s_arr, scalar = _as_times(t, s)
    _require_positive_s(s_arr)
    out = p.a * (s_arr < t_arr)
    if p.b != 0.0:
        out = out + p.b * mg_kernel(p.hurst, t_arr, s_arr, q)
    return _finish(np.asarray(out, dtype=float), scalar)


def _gamma_coefficient(hurst: float, k: int) -> float:
    alpha = hurst - 0.5
    return math.exp(k * math.log(c_of_h(hurst) * gamma(alpha)) - gammaln(k * alpha))


def gamma_k(hurst: float, k: int, t, s, q: QuadratureSpec = DEFAULT_QUADRATURE):
    h = check_hurst(hurst)
    if int(k) != k or k < 1:
        raise DomainError(f"k must be a positive integer, got {k}")
    k = int(k)
    alpha = h - 0.5
    t_arr, s_arr, scalar = _as_times(t, s)
    _require_positive_s(s_arr)
    coeffs = np.zeros(k)
    coeffs[-1] = 1.0
    out = np.zeros(t_arr.shape)
    live = s_arr < t_arr
    if live.any():
        sl, tl = s_arr[live], t_arr[live]
        out[live] = _gamma_coefficient(h, k) * sl ** (-alpha) * _tail_integral(sl, tl, alpha, coeffs, q)
    return _finish(out, scalar)


def _log_term_bounds(hurst: float, ratio: float, k: np.ndarray, log_t_over_s, log_gap) -> np.ndarray:
    alpha = hurst - 0.5
    log_c = math.log(ratio * c_of_h(hurst) * gamma(alpha)) + alpha
    ka = k * alpha
    return k * log_c - (ka + 0.5) * np.log(ka) - _LOG_SQRT_2PI + alpha * log_t_over_s + ka * log_gap


def gamma_k_bound(hurst: float, k: int, t, s, ratio: float = 1.0):
    """Stirling bound on |ratio^k gamma_k(t, s)|.

    From u^alpha <= t^alpha and Gamma(x+1) >= sqrt(2 pi) x^(x+1/2) e^-x:
    (|ratio| C)^k / (sqrt(2 pi) (k alpha)^(k alpha + 1/2)) (t/s)^alpha (t-s)^(k alpha)
    with C = c(H) Gamma(H - 1/2) e^(H - 1/2).
    """
    h = check_hurst(hurst)
    if int(k) != k or k < 1:
        raise DomainError(f"k must be a positive integer, got {k}")
    t_arr, s_arr, scalar = _as_times(t, s)
    _require_positive_s(s_arr)
    if np.any(s_arr >= t_arr):
        raise DomainError("gamma_k_bound needs s < t")
    if ratio == 0.0:
        return _finish(np.zeros(t_arr.shape), scalar)
    logs = _log_term_bounds(h, abs(ratio), np.full(t_arr.shape, float(k)), np.log(t_arr / s_arr), np.log(t_arr - s_arr))
    return _finish(np.exp(logs), scalar)


def _term_count(p: ModelParams, series: SeriesSpec, max_gap: float) -> int:
    ratio = abs(p.ratio)
    if ratio == 0.0 or max_gap <= 0.0:
        return 0
    k = np.arange(1, series.max_terms + 1, dtype=float)
    # tol is relative to the common (t/s)^alpha prefactor, which stays outside the sum
    logs = _log_term_bounds(p.hurst, ratio, k, 0.0, math.log(max_gap))
    log_tol = math.log(series.tol)

    above = np.flatnonzero(logs >= log_tol)
    if above.size and (above[-1] == k.size - 1 or (k.size > 1 and logs[-1] > logs[-2])):
        raise TruncationError(
            f"L^-1 series needs more than {series.max_terms} terms to reach tol={series.tol:g} "
            f"(H={p.hurst}, b/a={p.ratio:g}, t-s up to {max_gap:g}); raise max_terms"
        )
    n_terms = max(1, int(above[-1]) + 1 if above.size else 1)

    # The series alternates for b/a > 0: its largest term bounds the rounding error.
    peak = float(np.max(logs[:n_terms]))
    if math.exp(min(peak, 700.0)) * n_terms * _EPS > series.tol:
        raise TruncationError(
            f"L^-1 series terms reach {math.exp(min(peak, 700.0)):.3g}; cancellation exceeds tol={series.tol:g} "
            f"(H={p.hurst}, b/a={p.ratio:g}); use the triangular inversion instead"
        )
    logger.debug("L^-1 series truncated at {} terms (H={}, b/a={})", n_terms, p.hurst, p.ratio)
    return n_terms


def series_term_count(p: ModelParams, series: SeriesSpec, t_max: float, s_min: float) -> int:
    if not 0.0 < s_min < t_max:
        raise DomainError(f"need 0 < s_min < t_max, got s_min={s_min}, t_max={t_max}")
    return _term_count(p, series, t_max - s_min)


def series_coefficients(p: ModelParams, n_terms: int) -> np.ndarray:
    """Coefficients of P(w) = sum_{m=1..n} (-lambda)^m w^(m-1) / Gamma(m alpha), lambda = (b/a) c(H) Gamma(alpha)."""
    if n_terms == 0:
        return np.zeros(1)
    alpha = p.alpha
    lam = p.ratio * c_of_h(p.hurst) * gamma(alpha)
    m = np.arange(1, n_terms + 1, dtype=float)
    magnitude = np.exp(m * math.log(abs(lam)) - gammaln(m * alpha))
    return np.sign(-lam) ** m * magnitude


def l_inverse_continuous(p: ModelParams, t, s, series: SeriesSpec = DEFAULT_SERIES,
                         q: QuadratureSpec = DEFAULT_QUADRATURE, n_terms: int | None = None):
    """Absolutely continuous part of L^-1(t, s), i.e. (1/a) sum_k (-b/a)^k gamma_k(t, s)."""
    t_arr, s_arr, scalar = _as_times(t, s)
    _require_positive_s(s_arr)
    out = np.zeros(t_arr.shape)
    live = s_arr < t_arr
    if not live.any() or p.b == 0.0:
        if p.a == 0.0:
            raise DomainError("the inverse transfer kernel needs a != 0")
        return _finish(out, scalar)
    sl, tl = s_arr[live], t_arr[live]
    if n_terms is None:
        n_terms = _term_count(p, series, float(np.max(tl - sl)))
    coeffs = series_coefficients(p, n_terms)
    alpha = p.alpha
    out[live] = sl ** (-alpha) * _tail_integral(sl, tl, alpha, coeffs, q) / p.a
    return _finish(out, scalar)


def l_inverse_kernel(p: ModelParams, t, s, series: SeriesSpec = DEFAULT_SERIES,
                     q: QuadratureSpec = DEFAULT_QUADRATURE):
    """Inverse transfer kernel L^-1(t, s), the indicator convention 1_[0,t) included."""
    t_arr, s_arr, scalar = _as_times(t, s)
    if p.a == 0.0:
        raise DomainError("the inverse transfer kernel needs a != 0")
    continuous = np.asarray(l_inverse_continuous(p, t_arr, s_arr, series, q), dtype=float)
    out = (s_arr < t_arr) / p.a + continuous
    return _finish(out, scalar)


def inverse_kernel_mass(p: ModelParams, t, series: SeriesSpec = DEFAULT_SERIES):
    """∫_0^t L^-1(t, s) ds from the term-wise closed form of the series.

    Each gamma_k integrates to (c Gamma(alpha))^k Gamma(1-alpha) t^(k alpha+1)
    / (Gamma(1+(k-1) alpha) (k alpha+1)); the result equals t/a only when b = 0.
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0.0):
        raise DomainError("times must be nonnegative")
    if p.a == 0.0:
        raise DomainError("the inverse transfer kernel needs a != 0")
    out = t_arr / p.a
    t_max = float(np.max(t_arr)) if t_arr.size else 0.0
    if p.b == 0.0 or t_max == 0.0:
        return float(out) if np.ndim(t) == 0 else out

    alpha = p.alpha
    lam = p.ratio * c_of_h(p.hurst) * gamma(alpha)
    k = np.arange(1, series.max_terms + 1, dtype=float)
    exponent = k * alpha + 1.0
    log_coef = k * math.log(abs(lam)) + gammaln(1.0 - alpha) - gammaln(1.0 + (k - 1.0) * alpha) - np.log(exponent)
    if log_coef[-1] + exponent[-1] * math.log(t_max) >= math.log(series.tol):
        raise TruncationError(
            f"inverse kernel mass needs more than {series.max_terms} terms (H={p.hurst}, b/a={p.ratio:g}, t={t_max:g})"
        )
    coef = np.sign(-lam) ** k * np.exp(log_coef)
    out = out + (t_arr[..., None] ** exponent * coef).sum(axis=-1) / p.a
    return float(out) if np.ndim(t) == 0 else out
