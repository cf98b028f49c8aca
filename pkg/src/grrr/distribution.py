"""Split-lognormal approximation to the sampling distribution of theta-hat.

The plug-in estimate's two branches get separate lognormal approximations
glued at zero:

    ln(1 + theta-hat)  ~  N(mu1, sigma1^2)   on theta-hat < 0
    -ln(1 - theta-hat) ~  N(-mu2, sigma2^2)  on theta-hat >= 0

with sigma1, sigma2 from the delta method (``variance.delta_method_params``)
and, for inference about a hypothesised true effect theta, the means
substituted as

    mu1 = ln(1 + theta)            if theta < 0
    mu1 = -(sigma1/sigma2) ln(1 - theta)   otherwise
    mu2 = ln(1 - theta)            if theta >= 0
    mu2 = -(sigma2/sigma1) ln(1 + theta)   otherwise

which enforces mu1/sigma1 = -mu2/sigma2, the condition making the two
branch masses sum to one (P(theta-hat < 0) = Phi(-mu1/sigma1)).

Everything here is expressed in terms of (sigma1, sigma2) and theta; the
functions are the building blocks for p-values, confidence intervals by
quantile equating (with the sign-crossing recomputation), and the
random-effects likelihood in ``meta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import StudyTable
from .errors import DomainError
from .kernels import std_normal_cdf, std_normal_quantile
from .variance import delta_method_params

__all__ = [
    "SplitLognormalApprox",
    "pdf",
    "loglik",
    "cdf",
    "p_value",
    "confidence_interval",
]

_SQRT_TWO_PI = math.sqrt(2.0 * math.pi)
_THETA_CAP = 1.0 - 1e-12


@dataclass(frozen=True)
class SplitLognormalApprox:
    """The scale parameters of the two branches (standard deviations of the
    log transforms)."""

    sigma1: float
    sigma2: float

    def __post_init__(self):
        for name in ("sigma1", "sigma2"):
            v = getattr(self, name)
            if math.isnan(v) or math.isinf(v) or v <= 0.0:
                raise DomainError(f"{name} must be finite and > 0, got {v!r}")

    @classmethod
    def from_table(cls, table: StudyTable, zero_correction: float = 0.5) -> "SplitLognormalApprox":
        _, s1sq, _, s2sq = delta_method_params(table, zero_correction)
        return cls(math.sqrt(s1sq), math.sqrt(s2sq))


def _check_open_interval(name: str, value: float) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise DomainError(f"{name} must be a real number, got {value!r}")
    value = float(value)
    if math.isnan(value) or not (-1.0 < value < 1.0):
        raise DomainError(f"{name} must be in (-1, 1), got {value!r}")
    return value


def _mu_pair(theta: float, s1: float, s2: float):
    """Mean substitution for a hypothesised true theta."""
    if theta < 0.0:
        mu1 = math.log1p(theta)
        mu2 = -(s2 / s1) * mu1
    else:
        mu2 = math.log1p(-theta)
        mu1 = -(s1 / s2) * mu2
    return mu1, mu2


def loglik(theta_hat: float, theta: float, approx: SplitLognormalApprox) -> float:
    """Log density of observing theta-hat when the true effect is theta.
    Finite for all interior arguments."""
    theta_hat = _check_open_interval("theta_hat", theta_hat)
    theta = _check_open_interval("theta", theta)
    s1, s2 = approx.sigma1, approx.sigma2
    mu1, mu2 = _mu_pair(theta, s1, s2)
    if theta_hat < 0.0:
        x = math.log1p(theta_hat)
        z = (x - mu1) / s1
        return -0.5 * z * z - math.log(s1) - math.log(_SQRT_TWO_PI) - x
    x = math.log1p(-theta_hat)
    z = (x - mu2) / s2
    return -0.5 * z * z - math.log(s2) - math.log(_SQRT_TWO_PI) - x


def pdf(theta_hat: float, theta: float, approx: SplitLognormalApprox) -> float:
    """Density of theta-hat at a hypothesised true theta."""
    return math.exp(loglik(theta_hat, theta, approx))


def pdf_at_thetas(theta_hat: float, thetas: np.ndarray,
                  approx: SplitLognormalApprox) -> np.ndarray:
    """Vectorised ``pdf`` over an array of hypothesised thetas (one fixed
    observation). Used by the random-effects integrand."""
    theta_hat = _check_open_interval("theta_hat", theta_hat)
    s1, s2 = approx.sigma1, approx.sigma2
    thetas = np.asarray(thetas, dtype=float)
    neg = thetas < 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        log1p_pos = np.log1p(thetas)   # finite where theta > -1
        log1p_neg = np.log1p(-thetas)  # finite where theta < 1
    if theta_hat < 0.0:
        x = math.log1p(theta_hat)
        mu = np.where(neg, log1p_pos, -(s1 / s2) * log1p_neg)
        z = (x - mu) / s1
        return np.exp(-0.5 * z * z - x) / (s1 * _SQRT_TWO_PI)
    x = math.log1p(-theta_hat)
    mu = np.where(neg, -(s2 / s1) * log1p_pos, log1p_neg)
    z = (x - mu) / s2
    return np.exp(-0.5 * z * z - x) / (s2 * _SQRT_TWO_PI)


def cdf(theta_hat: float, theta: float, approx: SplitLognormalApprox) -> float:
    """P(estimate <= theta_hat) when the true effect is theta.

    Accepts theta_hat on the closed interval [-1, 1] (the endpoints return
    the exact limits 0 and 1)."""
    if isinstance(theta_hat, bool) or not isinstance(theta_hat, (int, float)):
        raise DomainError(f"theta_hat must be a real number, got {theta_hat!r}")
    theta_hat = float(theta_hat)
    if math.isnan(theta_hat) or not (-1.0 <= theta_hat <= 1.0):
        raise DomainError(f"theta_hat must be in [-1, 1], got {theta_hat!r}")
    theta = _check_open_interval("theta", theta)
    if theta_hat == -1.0:
        return 0.0
    if theta_hat == 1.0:
        return 1.0
    s1, s2 = approx.sigma1, approx.sigma2
    mu1, mu2 = _mu_pair(theta, s1, s2)
    if theta_hat < 0.0:
        return std_normal_cdf((math.log1p(theta_hat) - mu1) / s1)
    return std_normal_cdf((-math.log1p(-theta_hat) + mu2) / s2)


def p_value(theta_hat: float, approx: SplitLognormalApprox, sided: str = "two") -> float:
    """p-value against theta = 0.

    One-sided: tail probability beyond theta-hat in its own direction.
    Two-sided: Phi(ln(1-|theta-hat|)/sigma1) + Phi(ln(1-|theta-hat|)/sigma2),
    which is exactly 1 at theta-hat = 0."""
    if sided not in ("one", "two"):
        raise DomainError(f"sided must be 'one' or 'two', got {sided!r}")
    if isinstance(theta_hat, bool) or not isinstance(theta_hat, (int, float)):
        raise DomainError(f"theta_hat must be a real number, got {theta_hat!r}")
    theta_hat = float(theta_hat)
    if math.isnan(theta_hat) or not (-1.0 <= theta_hat <= 1.0):
        raise DomainError(f"theta_hat must be in [-1, 1], got {theta_hat!r}")
    s1, s2 = approx.sigma1, approx.sigma2
    if abs(theta_hat) == 1.0:
        return 0.0
    if sided == "one":
        if theta_hat >= 0.0:
            return std_normal_cdf(math.log1p(-theta_hat) / s2)
        return std_normal_cdf(math.log1p(theta_hat) / s1)
    if theta_hat == 0.0:
        return 1.0
    x = math.log1p(-abs(theta_hat))
    return std_normal_cdf(x / s1) + std_normal_cdf(x / s2)


def confidence_interval(theta_hat: float, approx: SplitLognormalApprox,
                        alpha: float = 0.05) -> tuple[float, float]:
    """Equal-tailed 100(1-alpha)% interval for theta by quantile equating.

    The primary limits stay on theta-hat's side of zero; a limit that
    crosses zero is recomputed with the other branch's transform:

      theta-hat >= 0: (1 - (1-theta-hat) e^{+sigma2 z}, 1 - (1-theta-hat) e^{-sigma2 z})
                      lower < 0 -> (1-theta-hat)^{-sigma1/sigma2} e^{-sigma1 z} - 1
      theta-hat <  0: ((1+theta-hat) e^{-sigma1 z} - 1, (1+theta-hat) e^{+sigma1 z} - 1)
                      upper > 0 -> 1 - (1+theta-hat)^{-sigma2/sigma1} e^{-sigma2 z}

    with z the upper alpha/2 normal quantile. The interval always contains
    theta-hat and satisfies cdf(theta_hat; lower) = 1 - alpha/2,
    cdf(theta_hat; upper) = alpha/2.
    """
    theta_hat = _check_open_interval("theta_hat", theta_hat)
    if isinstance(alpha, bool) or not isinstance(alpha, (int, float)):
        raise DomainError(f"alpha must be a real number, got {alpha!r}")
    alpha = float(alpha)
    if math.isnan(alpha) or not (0.0 < alpha < 1.0):
        raise DomainError(f"alpha must be in (0, 1), got {alpha!r}")
    s1, s2 = approx.sigma1, approx.sigma2
    z = std_normal_quantile(1.0 - 0.5 * alpha)
    if theta_hat >= 0.0:
        base = 1.0 - theta_hat
        lower = 1.0 - base * math.exp(s2 * z)
        upper = 1.0 - base * math.exp(-s2 * z)
        if lower < 0.0:
            lower = base ** (-s1 / s2) * math.exp(-s1 * z) - 1.0
    else:
        base = 1.0 + theta_hat
        lower = base * math.exp(-s1 * z) - 1.0
        upper = base * math.exp(s1 * z) - 1.0
        if upper > 0.0:
            upper = 1.0 - base ** (-s2 / s1) * math.exp(-s2 * z)
    return lower, upper
