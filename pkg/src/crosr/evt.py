"""Weibull tail modelling of per-class distance distributions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DegenerateFitError, InputError, NumericalError

MAX_ITER = 100


@dataclass(frozen=True)
class WeibullParams:
    """Two-parameter Weibull: ``shape`` (m) and ``scale`` (eta)."""

    shape: float
    scale: float

    def __post_init__(self):
        for label, v in (("shape", self.shape), ("scale", self.scale)):
            if not (np.isfinite(v) and v > 0):
                raise NumericalError(f"Weibull {label} must be positive and finite, got {v}")


@dataclass(frozen=True)
class TailFitConfig:
    tail_size: int = 20
    alpha: int = 10
    # None: on only when there are more than ten known classes
    rank_calibration: bool | None = None

    def __post_init__(self):
        if self.tail_size < 2:
            raise ConfigurationError(f"tail_size must be at least 2, got {self.tail_size}")
        if self.alpha < 1:
            raise ConfigurationError(f"alpha must be at least 1, got {self.alpha}")

    def calibration_enabled(self, num_classes: int) -> bool:
        if self.rank_calibration is None:
            return num_classes > 10
        return self.rank_calibration


def weibull_cdf(d, params: WeibullParams):
    """``1 - exp(-(d / scale) ** shape)``; scalar in, scalar out."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0) or np.any(np.isnan(d)):
        raise InputError("Weibull CDF is defined for nonnegative distances only")
    with np.errstate(over="ignore"):  # overflow to inf is the CDF = 1 limit
        out = -np.expm1(-((d / params.scale) ** params.shape))
    return float(out) if out.ndim == 0 else out


def weibull_log_likelihood(x, shape: float, scale: float) -> float:
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    return float(n * np.log(shape) - n * shape * np.log(scale)
                 + (shape - 1.0) * np.sum(np.log(x)) - np.sum((x / scale) ** shape))


def _shape_equation(m: float, lu: np.ndarray) -> tuple[float, float]:
    """Profile score for the shape and its derivative, on data scaled to max 1."""
    um = np.exp(m * lu)
    s0 = um.sum()
    s1 = (um * lu).sum() / s0
    s2 = (um * lu * lu).sum() / s0
    g = s1 - 1.0 / m - lu.mean()
    dg = (s2 - s1 * s1) + 1.0 / (m * m)
    return g, dg


def fit_weibull(samples) -> WeibullParams:
    """Maximum-likelihood two-parameter Weibull fit.

    The shape solves the profile score equation by Newton's method, started
    from the coefficient-of-variation estimate and kept inside a sign-change
    bracket (a step that leaves the bracket is replaced by bisection). The
    data are divided by their maximum first, which makes the fit exactly
    scale-equivariant and keeps ``u ** m`` in range for steep tails.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 2:
        raise InputError("need at least two samples to fit a Weibull")
    if not np.all(np.isfinite(x)) or np.any(x < 0):
        raise InputError("Weibull samples must be finite and nonnegative")
    top = x.max()
    if np.all(x == top):
        raise DegenerateFitError(f"all {x.size} tail values equal {top}; the Weibull fit is degenerate")
    if np.any(x == 0):
        raise DegenerateFitError("tail contains zero distances; the Weibull likelihood is unbounded")
    lu = np.log(x / top)

    lo, hi = 0.01, 100.0
    while _shape_equation(lo, lu)[0] >= 0:
        lo /= 10.0
        if lo < 1e-12:
            raise NumericalError("could not bracket the Weibull shape from below")
    while _shape_equation(hi, lu)[0] <= 0:
        hi *= 10.0
        if hi > 1e12:
            raise NumericalError("could not bracket the Weibull shape from above")

    cv = x.std() / x.mean()
    m = float(np.clip(cv ** -1.086, lo, hi))
    for _ in range(MAX_ITER):
        g, dg = _shape_equation(m, lu)
        if g == 0.0:
            break
        if g < 0:
            lo = m
        else:
            hi = m
        step = g / dg
        nxt = m - step
        if not (lo < nxt < hi):
            nxt = 0.5 * (lo + hi)
        if abs(nxt - m) <= 1e-12 * m:
            m = nxt
            break
        m = nxt
    else:
        raise NumericalError(f"Weibull shape iteration did not converge in {MAX_ITER} steps")

    scale = top * float(np.mean(np.exp(m * lu))) ** (1.0 / m)
    return WeibullParams(shape=float(m), scale=float(scale))


def fit_weibull_tail(distances, tail_size: int) -> WeibullParams:
    """Fit the ``tail_size`` largest distances."""
    d = np.asarray(distances, dtype=np.float64).ravel()
    if tail_size < 2:
        raise ConfigurationError(f"tail_size must be at least 2, got {tail_size}")
    if d.size < tail_size:
        raise InputError(f"need at least {tail_size} distances for the tail, got {d.size}")
    tail = np.sort(d)[-tail_size:]
    return fit_weibull(tail)


def rank_calibrator(rank: int, alpha: int, enabled: bool = True) -> float:
    """``max(0, (alpha - rank) / alpha)`` for a 1-based rank; 1 when disabled."""
    if rank < 1:
        raise InputError(f"rank is 1-based, got {rank}")
    if not enabled:
        return 1.0
    return max(0.0, (alpha - rank) / alpha)


def class_belongingness(d, params: WeibullParams, weight: float):
    """``1 - weight * WeibullCDF(d)``, in ``[1 - weight, 1]``."""
    if not 0.0 <= weight <= 1.0:
        raise InputError(f"calibration weight must lie in [0, 1], got {weight}")
    return 1.0 - weight * weibull_cdf(d, params)
