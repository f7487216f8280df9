from __future__ import annotations


class CcmfbmError(Exception):
    """Root of every error raised by the toolkit."""

    exit_code = 4


class DomainError(CcmfbmError, ValueError):
    """Inputs outside the model's domain (H, a·b, times, grids, lags)."""

    exit_code = 3


class GridMismatchError(DomainError):
    """Two discretized objects live on different time grids."""


class NumericalError(CcmfbmError, ArithmeticError):
    exit_code = 4


class TruncationError(NumericalError):
    """The L^-1 series cannot reach the requested tolerance."""


class FactorizationError(NumericalError):
    """Cholesky factorization failed even after jitter."""


class DivergenceError(NumericalError):
    """Neumann series terms keep growing."""
