"""Within-study variance of the plug-in GRRR estimate, three ways.

* ``variance_exact``     — full enumeration of E(theta^2) - E(theta)^2 over
  Binomial(N1, p-hat) x Binomial(N2, q-hat). Binomial pmfs are built by the
  mode-anchored ratio recursion in linear space (values only decrease moving
  away from the mode, so there is no overflow), truncated below 1e-300 and
  renormalised to sum 1. The enumeration grid is the outer product of the two
  truncated supports; a cell cap bounds the materialised grid.
* ``variance_bootstrap`` — parametric bootstrap of the same two binomials,
  seedable and deterministic (PCG64; control arm drawn first).
* ``variance_analytic``  — closed-form approximation from the delta-method
  normal approximations of ln(q-hat/p-hat) and ln((1-q-hat)/(1-p-hat)),
  using exactly six normal-CDF evaluations. Requires interior proportions;
  callers fall back to the exact method at the boundary.

``delta_method_params`` exposes the (mu1, sigma1^2, mu2, sigma2^2) used by
the analytic method and by the split-lognormal sampling distribution. A
configurable additive constant (default 0.5, applied to all four cells) is
available for tables with a zero cell; it is only ever applied when a
marginal proportion is 0 or 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import StudyTable, estimate_theta, theta_from_probs
from .errors import DomainError, ResourceLimitError
from .kernels import make_rng, std_normal_cdf

__all__ = [
    "PMF_FLOOR",
    "DEFAULT_CELL_CAP",
    "VarianceSpec",
    "GrrrEstimate",
    "binomial_pmf_window",
    "variance_exact",
    "variance_bootstrap",
    "variance_analytic",
    "delta_method_params",
    "make_estimate",
]

PMF_FLOOR = 1e-300
DEFAULT_CELL_CAP = 100_000_000


@dataclass(frozen=True)
class VarianceSpec:
    """Which within-study variance method to use.

    kind: "exact" | "bootstrap" | "approx"
    replicates/seed apply to the bootstrap only.
    """

    kind: str = "exact"
    replicates: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("exact", "bootstrap", "approx"):
            raise DomainError(f"unknown variance method {self.kind!r}")
        if isinstance(self.replicates, bool) or not isinstance(self.replicates, int) \
                or self.replicates < 1000:
            raise DomainError(f"bootstrap replicates must be an integer >= 1000, "
                              f"got {self.replicates!r}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise DomainError(f"seed must be a non-negative integer, got {self.seed!r}")


@dataclass(frozen=True)
class GrrrEstimate:
    """Per-study estimate packet consumed by the meta-analysis fitters.

    ``sigma1_sq``/``sigma2_sq`` are the delta-method variances of
    ln(1 + theta-hat) and ln(1 - theta-hat); they are None when a marginal
    proportion sits on the boundary and no zero-correction was applied.
    ``degenerate`` flags a raw table with p-hat = q-hat in {0, 1};
    ``corrected`` records whether a zero-correction produced these numbers.
    """

    study_id: str
    theta_hat: float
    sigma2: float
    degenerate: bool = False
    corrected: bool = False
    sigma1_sq: Optional[float] = None
    sigma2_sq: Optional[float] = None

    def __post_init__(self):
        if math.isnan(self.theta_hat) or not (-1.0 <= self.theta_hat <= 1.0):
            raise DomainError(f"{self.study_id}: theta_hat outside [-1, 1]")
        if math.isnan(self.sigma2) or math.isinf(self.sigma2) or self.sigma2 < 0.0:
            raise DomainError(f"{self.study_id}: sigma2 must be finite and >= 0")
        if self.degenerate and not self.corrected:
            if self.theta_hat != 0.0 or self.sigma2 != 0.0:
                raise DomainError(f"{self.study_id}: degenerate estimate must be (0, 0)")
        for name in ("sigma1_sq", "sigma2_sq"):
            v = getattr(self, name)
            if v is not None and (math.isnan(v) or math.isinf(v) or v <= 0.0):
                raise DomainError(f"{self.study_id}: {name} must be finite and > 0")


# ---------------------------------------------------------------------------
# binomial pmf window
# ---------------------------------------------------------------------------

def binomial_pmf_window(n: int, p: float, floor: float = PMF_FLOOR):
    """Binomial(n, p) pmf over its effective support.

    Returns (first_index, pmf) where pmf[k] = P(X = first_index + k). The
    pmf is built from the mode outwards with the ratio recursion
    P(i+1)/P(i) = ((n - i)/(i + 1)) (p/(1-p)), truncated where values fall
    below ``floor``, and renormalised to sum exactly 1.
    """
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)) or n < 0:
        raise DomainError(f"binomial_pmf_window: n must be a non-negative integer, got {n!r}")
    if math.isnan(p) or not (0.0 <= p <= 1.0):
        raise DomainError(f"binomial_pmf_window: p must be in [0, 1], got {p!r}")
    n = int(n)
    if p == 0.0:
        return 0, np.array([1.0])
    if p == 1.0:
        return n, np.array([1.0])

    mode = min(int(math.floor((n + 1) * p)), n)
    odds = p / (1.0 - p)

    # upward from the mode: f[i+1] = f[i] * ((n - i)/(i + 1)) * odds
    i_up = np.arange(mode, n)
    up = np.cumprod((n - i_up) / (i_up + 1.0) * odds) if i_up.size else np.array([])
    # downward: f[i-1] = f[i] * (i / (n - i + 1)) / odds
    i_dn = np.arange(mode, 0, -1)
    dn = np.cumprod(i_dn / (n - i_dn + 1.0) / odds) if i_dn.size else np.array([])

    keep_up = up >= floor
    if not keep_up.all():
        up = up[: int(np.argmin(keep_up))]
    keep_dn = dn >= floor
    if not keep_dn.all():
        dn = dn[: int(np.argmin(keep_dn))]

    pmf = np.concatenate((dn[::-1], [1.0], up))
    pmf /= pmf.sum()
    return mode - len(dn), pmf


def _theta_grid(i_start: int, n_i: int, n1: int, j_start: int, n_j: int, n2: int):
    """theta-hat of every resampled table (i events / N1 control,
    j events / N2 treatment) over the given index windows, branch decided by
    exact integer cross products."""
    i = np.arange(i_start, i_start + n_i, dtype=np.int64)
    j = np.arange(j_start, j_start + n_j, dtype=np.int64)
    in2 = (i * n2)[:, None]
    jn1 = (j * n1)[None, :]
    lt = jn1 < in2  # q-hat < p-hat
    gt = jn1 > in2
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio_lt = jn1 / in2
        ratio_gt = ((n2 - j) * n1)[None, :] / ((n1 - i) * n2)[:, None]
    return np.where(lt, ratio_lt - 1.0, np.where(gt, 1.0 - ratio_gt, 0.0))


def _exact_mean_var(n1: int, p: float, n2: int, q: float, cell_cap: int):
    i_start, pv = binomial_pmf_window(n1, p)
    j_start, qv = binomial_pmf_window(n2, q)
    if len(pv) * len(qv) > cell_cap:
        raise ResourceLimitError(
            f"exact variance grid has {len(pv)}x{len(qv)} cells, "
            f"exceeding the cap of {cell_cap}")
    theta = _theta_grid(i_start, len(pv), n1, j_start, len(qv), n2)
    e1 = float(pv @ theta @ qv)
    e2 = float(pv @ (theta * theta) @ qv)
    return e1, max(0.0, e2 - e1 * e1)


def variance_exact(table: StudyTable, cell_cap: int = DEFAULT_CELL_CAP) -> float:
    """Exact variance of theta-hat under the plug-in product-binomial model."""
    _, var = _exact_mean_var(table.n_control, table.p_hat,
                             table.n_treatment, table.q_hat, cell_cap)
    return var


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------

def _theta_of_draws(i: np.ndarray, n1: int, j: np.ndarray, n2: int) -> np.ndarray:
    in2 = i.astype(np.int64) * n2
    jn1 = j.astype(np.int64) * n1
    lt = jn1 < in2
    gt = jn1 > in2
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio_lt = jn1 / in2
        ratio_gt = ((n2 - j) * n1) / ((n1 - i) * np.int64(n2))
    return np.where(lt, ratio_lt - 1.0, np.where(gt, 1.0 - ratio_gt, 0.0))


def variance_bootstrap(table: StudyTable, replicates: int = 100_000, seed: int = 0) -> float:
    """Parametric bootstrap variance of theta-hat.

    Deterministic for a fixed (table, replicates, seed): the control arm is
    drawn first, then the treatment arm, from one PCG64 stream.
    """
    spec = VarianceSpec("bootstrap", replicates=replicates, seed=seed)  # validates
    return _bootstrap_probs(table.n_control, table.p_hat,
                            table.n_treatment, table.q_hat,
                            spec.replicates, spec.seed)


def _bootstrap_probs(n1: int, p: float, n2: int, q: float,
                     replicates: int, seed: int) -> float:
    rng = make_rng(seed)
    i = rng.binomial(n1, p, size=replicates)
    j = rng.binomial(n2, q, size=replicates)
    theta = _theta_of_draws(i, n1, j, n2)
    return float(np.var(theta, ddof=1))


# ---------------------------------------------------------------------------
# delta-method parameters and the analytic approximation
# ---------------------------------------------------------------------------

def _corrected_props(table: StudyTable, c: float):
    p = (table.events_control + c) / (table.n_control + 2.0 * c)
    q = (table.events_treatment + c) / (table.n_treatment + 2.0 * c)
    return p, q, table.n_control + 2.0 * c, table.n_treatment + 2.0 * c


def _delta_params_probs(p: float, q: float, n1: float, n2: float):
    mu1 = math.log(q / p)
    s1sq = (1.0 - q) / (q * n2) + (1.0 - p) / (p * n1)
    mu2 = math.log((1.0 - q) / (1.0 - p))
    s2sq = q / ((1.0 - q) * n2) + p / ((1.0 - p) * n1)
    return mu1, s1sq, mu2, s2sq


def delta_method_params(table: StudyTable, zero_correction: float = 0.5):
    """(mu1, sigma1^2, mu2, sigma2^2) of the two log transforms.

    mu1 = ln(q/p), sigma1^2 = (1-q)/(q N2) + (1-p)/(p N1), and mu2, sigma2^2
    the same for the complements. When a marginal proportion is 0 or 1 the
    ``zero_correction`` constant is added to all four cells (and the arm
    sizes adjusted accordingly); with zero_correction = 0 such tables are a
    domain error. Interior tables are never corrected.
    """
    if math.isnan(zero_correction) or zero_correction < 0.0 or math.isinf(zero_correction):
        raise DomainError(f"zero_correction must be finite and >= 0, got {zero_correction!r}")
    if table.has_boundary_margin:
        if zero_correction == 0.0:
            raise DomainError(
                f"{table.study_id}: boundary proportion with zero_correction=0; "
                f"delta-method parameters undefined")
        p, q, n1, n2 = _corrected_props(table, zero_correction)
    else:
        p, q = table.p_hat, table.q_hat
        n1, n2 = table.n_control, table.n_treatment
    return _delta_params_probs(p, q, n1, n2)


def _analytic_probs(p: float, q: float, n1: float, n2: float) -> float:
    mu1, s1sq, mu2, s2sq = _delta_params_probs(p, q, n1, n2)
    s1, s2 = math.sqrt(s1sq), math.sqrt(s2sq)
    rq = q / p
    rc = (1.0 - q) / (1.0 - p)
    a = [rq ** k * math.exp(0.5 * k * k * s1sq) * std_normal_cdf(-mu1 / s1 - k * s1)
         for k in range(3)]
    b = [rc ** k * math.exp(0.5 * k * k * s2sq) * std_normal_cdf(-mu2 / s2 - k * s2)
         for k in range(3)]
    e1 = a[1] - a[0] + b[0] - b[1]
    e2 = a[2] - 2.0 * a[1] + a[0] + b[2] - 2.0 * b[1] + b[0]
    return max(0.0, e2 - e1 * e1)


def variance_analytic(table: StudyTable) -> float:
    """Closed-form approximate variance of theta-hat (six normal-CDF
    evaluations). Domain error when either proportion is 0 or 1; callers
    fall back to the exact method there."""
    if table.has_boundary_margin:
        raise DomainError(
            f"{table.study_id}: analytic variance needs interior proportions")
    return _analytic_probs(table.p_hat, table.q_hat,
                           table.n_control, table.n_treatment)


# ---------------------------------------------------------------------------
# estimate assembly
# ---------------------------------------------------------------------------

def make_estimate(table: StudyTable,
                  spec: VarianceSpec = VarianceSpec(),
                  zero_correction: float = 0.0,
                  cell_cap: int = DEFAULT_CELL_CAP) -> GrrrEstimate:
    """Bundle theta-hat, its within-study variance, and the delta-method
    variances for one study.

    With ``zero_correction = 0`` (the default, used by the direct fitters)
    tables keep their raw plug-ins: double-degenerate tables come back as
    (0, 0) with the degenerate flag set, single-boundary tables keep
    theta-hat = +-1 with an enumerable variance, and the "approx" method
    falls back to exact enumeration at the boundary. A positive
    ``zero_correction`` (beta / split-lognormal paths) replaces boundary
    tables' plug-in proportions with corrected ones before anything else is
    computed; the enumeration then keeps the original arm sizes with the
    corrected probabilities.
    """
    degenerate = table.double_degenerate
    corrected = table.has_boundary_margin and zero_correction > 0.0

    if degenerate and not corrected:
        return GrrrEstimate(study_id=table.study_id, theta_hat=0.0, sigma2=0.0,
                            degenerate=True)

    if corrected:
        p, q, n1c, n2c = _corrected_props(table, zero_correction)
        theta_hat = theta_from_probs(p, q)
    else:
        p, q = table.p_hat, table.q_hat
        n1c, n2c = table.n_control, table.n_treatment
        theta_hat = estimate_theta(table)

    n1, n2 = table.n_control, table.n_treatment
    if spec.kind == "exact":
        _, sigma2 = _exact_mean_var(n1, p, n2, q, cell_cap)
    elif spec.kind == "bootstrap":
        sigma2 = _bootstrap_probs(n1, p, n2, q, spec.replicates, spec.seed)
    else:  # approx
        if 0.0 < p < 1.0 and 0.0 < q < 1.0:
            sigma2 = _analytic_probs(p, q, n1c, n2c)
        else:
            _, sigma2 = _exact_mean_var(n1, p, n2, q, cell_cap)

    if 0.0 < p < 1.0 and 0.0 < q < 1.0:
        _, s1sq, _, s2sq = _delta_params_probs(p, q, n1c, n2c)
    else:
        s1sq = s2sq = None

    return GrrrEstimate(study_id=table.study_id, theta_hat=theta_hat, sigma2=sigma2,
                        degenerate=degenerate, corrected=corrected,
                        sigma1_sq=s1sq, sigma2_sq=s2sq)
