"""Acceptance gate: one test per shipping criterion, one PASS/FAIL line each.

Pooled-estimate targets are checked on the bundled reconstructions of the
cited source tables.  The BCG reconstruction follows the 13-trial table of
Colditz et al. (1994) exactly; its pooled point estimates are known to differ
from the published analysis by more than the stated tolerances because one
extracted row differs (see README, "Dataset provenance").  Those sub-checks
fail honestly here; tolerances are not widened and the data are not adjusted.
The lamotrigine dataset is not reconstructable offline (network fetching is
out of scope), so its sub-checks are reported as skipped.
"""

import math
import time
from importlib import resources

import numpy as np
import pytest

from grrr.cli import parse_dataset
from grrr.core import StudyTable, estimate_theta, q_from_p_theta
from grrr.distribution import (
    SplitLognormalApprox,
    cdf,
    confidence_interval,
    p_value,
    pdf,
)
from grrr.kernels import integrate, make_rng
from grrr.meta import (
    beta_reparam,
    fit_beta_model,
    fit_direct_dl,
    fit_direct_ml,
    fit_split_lognormal_model,
)
from grrr.variance import (
    VarianceSpec,
    binomial_pmf_window,
    delta_method_params,
    make_estimate,
    variance_bootstrap,
    variance_exact,
)

_DISCREPANCY_NOTE = ("pooled centres differ from the published values by one "
                     "extracted source row; spread statistics meet their "
                     "tolerances (README, 'Dataset provenance')")


def _report(num, checks, skips=(), note=""):
    """Emit the criterion's single PASS/FAIL line and assert it."""
    failed = [f"{name} [{detail}]" for name, ok, detail in checks if not ok]
    line = f"CRITERION {num}: " + ("PASS" if not failed else "FAIL")
    if failed:
        line += " -- failed: " + "; ".join(failed)
    if skips:
        line += " -- skipped: " + "; ".join(skips)
    if note:
        line += f" -- {note}"
    print(line)
    assert not failed, line


def _load(name):
    return parse_dataset(str(resources.files("grrr.data") / name))


def _estimates(tables):
    return [make_estimate(t, VarianceSpec("exact", seed=i), zero_correction=0.5)
            for i, t in enumerate(tables)]


@pytest.fixture(scope="module")
def bcg_tables():
    return _load("bcg.csv")


@pytest.fixture(scope="module")
def strept_tables():
    return _load("streptokinase.csv")


@pytest.fixture(scope="module")
def bcg_fits(bcg_tables):
    """The three Table-2 fits on BCG, with wall-clock fit times."""
    estimates = _estimates(bcg_tables)
    out = {}
    for name, runner in (
        ("direct-ml", lambda: fit_direct_ml(estimates)),
        ("beta", lambda: fit_beta_model(estimates)),
        ("split-lognormal", lambda: fit_split_lognormal_model(bcg_tables)),
    ):
        start = time.perf_counter()
        fit = runner()
        out[name] = (fit, time.perf_counter() - start)
    return out


@pytest.fixture(scope="module")
def strept_fits(strept_tables):
    estimates = _estimates(strept_tables)
    return {
        "direct-ml": fit_direct_ml(estimates),
        "beta": fit_beta_model(estimates),
        "split-lognormal": fit_split_lognormal_model(strept_tables),
    }


def _within(value, target, tol):
    return abs(value - target) <= tol, f"got {value:.4f}, want {target}±{tol}"


class TestCriterion1:
    def test_table2_reproduction_bcg(self, bcg_fits):
        ml, t_ml = bcg_fits["direct-ml"]
        beta, t_beta = bcg_fits["beta"]
        sln, t_sln = bcg_fits["split-lognormal"]
        checks = []
        for name, got, target, tol in [
            ("direct-ML theta", ml.theta_hat, -0.496, 0.01),
            ("direct-ML se", ml.se_theta, 0.088, 0.005),
            ("direct-ML tau", ml.tau_hat, 0.292, 0.01),
            ("beta theta", beta.theta_hat, -0.489, 0.01),
            ("split-lognormal theta", sln.theta_hat, -0.505, 0.01),
            ("split-lognormal tau", sln.tau_hat, 0.239, 0.015),
        ]:
            ok, detail = _within(got, target, tol)
            checks.append((name, ok, detail))
        slowest = max(t_ml, t_beta, t_sln)
        checks.append(("runtime < 10 s each", slowest < 10.0,
                       f"slowest fit {slowest:.2f} s"))
        checks.append(("all fits converged",
                       ml.converged and beta.converged and sln.converged,
                       "converged flags"))
        _report(1, checks, note=_DISCREPANCY_NOTE)


class TestCriterion2:
    def test_table3_reproduction(self, bcg_tables):
        dl = fit_direct_dl(_estimates(bcg_tables))
        checks = []
        for name, got, target, tol in [
            ("direct-DL theta", dl.theta_hat, -0.493, 0.005),
            ("direct-DL se", dl.se_theta, 0.102, 0.005),
            ("direct-DL tau", dl.tau_hat, 0.345, 0.01),
            ("direct-DL I2", dl.i_squared, 97.6, 0.5),
        ]:
            ok, detail = _within(got, target, tol)
            checks.append((name, ok, detail))
        skips = ["lamotrigine tau=0, I2=0: source table not reconstructable "
                 "offline (network fetching is out of scope)"]
        _report(2, checks, skips=skips,
                note="re-extracting the one discrepant source row reproduces "
                     "theta, se and I2 within tolerance and tau within 0.013 "
                     "(README, 'Dataset provenance')")


class TestCriterion3:
    def test_streptokinase_boundary(self, strept_fits):
        sln = strept_fits["split-lognormal"]
        ok_theta, detail = _within(sln.theta_hat, -0.200, 0.01)
        checks = [
            ("tau-hat == 0", sln.tau_hat == 0.0, f"got {sln.tau_hat!r}"),
            ("se(tau) reported 0", sln.se_tau == 0.0, f"got {sln.se_tau!r}"),
            ("theta", ok_theta, detail),
            ("converged", sln.converged, "converged flag"),
        ]
        _report(3, checks)


def _brute_force_var(table):
    """Independent O(N^2) double summation over both binomial supports."""
    n_t, n_c = table.n_treatment, table.n_control
    q, p = table.q_hat, table.p_hat
    w_t = [math.comb(n_t, k) * q**k * (1.0 - q) ** (n_t - k)
           for k in range(n_t + 1)]
    w_c = [math.comb(n_c, k) * p**k * (1.0 - p) ** (n_c - k)
           for k in range(n_c + 1)]
    m1 = m2 = 0.0
    for i, wc in enumerate(w_c):
        for j, wt in enumerate(w_t):
            th = estimate_theta(StudyTable("b", j, n_t, i, n_c))
            m1 += wc * wt * th
            m2 += wc * wt * th * th
    return m2 - m1 * m1


def _exact_moments(table):
    """Mean, variance and fourth central moment of the plug-in estimator."""
    first_c, w_c = binomial_pmf_window(table.n_control, table.p_hat)
    first_t, w_t = binomial_pmf_window(table.n_treatment, table.q_hat)
    thetas = np.array([
        [estimate_theta(StudyTable("m", first_t + j, table.n_treatment,
                                   first_c + i, table.n_control))
         for j in range(len(w_t))]
        for i in range(len(w_c))])
    w = np.outer(w_c, w_t)
    mean = float((w * thetas).sum())
    centred = thetas - mean
    var = float((w * centred**2).sum())
    m4 = float((w * centred**4).sum())
    return mean, var, m4


class TestCriterion4:
    def test_variance_oracle_suite(self):
        start = time.perf_counter()
        rng = make_rng(40404)
        checks = []

        worst = 0.0
        for _ in range(50):
            n_t, n_c = int(rng.integers(2, 61)), int(rng.integers(2, 61))
            table = StudyTable("r", int(rng.integers(0, n_t + 1)), n_t,
                               int(rng.integers(0, n_c + 1)), n_c)
            worst = max(worst, abs(variance_exact(table)
                                   - _brute_force_var(table)))
        checks.append(("exact vs brute force (50 tables, 1e-10)",
                       worst <= 1e-10, f"worst |diff| {worst:.2e}"))

        worst_z = 0.0
        for seed, table in enumerate([
            StudyTable("b1", 12, 40, 20, 50),
            StudyTable("b2", 3, 25, 8, 30),
            StudyTable("b3", 45, 120, 33, 110),
        ]):
            _, var, m4 = _exact_moments(table)
            mc_se = math.sqrt((m4 - var * var) / 1_000_000)
            boot = variance_bootstrap(table, replicates=1_000_000, seed=seed)
            worst_z = max(worst_z, abs(boot - var) / mc_se)
        checks.append(("bootstrap 1e6 reps within 4 MC se",
                       worst_z <= 4.0, f"worst |z| {worst_z:.2f}"))

        from grrr.variance import variance_analytic
        worst_rel = 0.0
        worst_balanced = 0.0
        for _ in range(20):
            n_t, n_c = int(rng.integers(120, 401)), int(rng.integers(120, 401))
            e_t = int(rng.integers(math.ceil(0.15 * n_t),
                                   math.floor(0.85 * n_t)))
            e_c = int(rng.integers(math.ceil(0.15 * n_c),
                                   math.floor(0.85 * n_c)))
            table = StudyTable("a", e_t, n_t, e_c, n_c)
            exact = variance_exact(table)
            worst_rel = max(worst_rel,
                            abs(variance_analytic(table) - exact) / exact)
            # same proportions with both arms at the larger size: the
            # approximation degrades only under arm imbalance near ties
            n_b = max(n_t, n_c)
            balanced = StudyTable("a", round(table.q_hat * n_b), n_b,
                                  round(table.p_hat * n_b), n_b)
            worst_balanced = max(
                worst_balanced,
                abs(variance_analytic(balanced) - variance_exact(balanced))
                / variance_exact(balanced))
        checks.append(("analytic within 5% (interior, N>100)",
                       worst_rel <= 0.05,
                       f"worst rel {worst_rel:.4f} (unbalanced near-tie "
                       f"arms; same proportions balanced: "
                       f"{worst_balanced:.4f})"))

        elapsed = time.perf_counter() - start
        checks.append(("runtime < 60 s", elapsed < 60.0, f"{elapsed:.1f} s"))
        _report(4, checks)


class TestCriterion5:
    def test_distribution_suite(self):
        rng = make_rng(50505)
        checks = []

        worst_norm = 0.0
        worst_fd = 0.0
        worst_ci = 0.0
        configs = [(float(rng.uniform(-0.9, 0.9)),
                    float(rng.uniform(0.05, 0.8)),
                    float(rng.uniform(0.05, 0.8))) for _ in range(18)]
        configs += [(-0.05, 0.6, 0.45), (0.05, 0.45, 0.6)]  # sign-crossing CIs
        for theta_hat, s1, s2 in configs:
            approx = SplitLognormalApprox(s1, s2)
            res = integrate(lambda t: pdf(float(t), theta_hat, approx),
                            lower=-1.0, upper=1.0, tol=1e-10,
                            breakpoints=[0.0, theta_hat])
            worst_norm = max(worst_norm, abs(res.value - 1.0))

            # differentiate where the distribution carries mass: relative
            # fd consistency is meaningless below the cancellation floor
            candidates = [t for t in np.linspace(-0.9, 0.9, 25)
                          if abs(t) > 1e-3 and pdf(float(t), theta_hat,
                                                   approx) >= 1e-3]
            assert len(candidates) >= 3
            for t in candidates:
                h = 1e-5
                fd = (cdf(t + h, theta_hat, approx)
                      - cdf(t - h, theta_hat, approx)) / (2 * h)
                dens = pdf(t, theta_hat, approx)
                worst_fd = max(worst_fd, abs(fd - dens) / dens)

            lo, hi = confidence_interval(theta_hat, approx, alpha=0.05)
            worst_ci = max(worst_ci,
                           abs(cdf(theta_hat, lo, approx) - 0.975),
                           abs(cdf(theta_hat, hi, approx) - 0.025))

        checks.append(("pdf normalizes to 1 (20 configs, 1e-8)",
                       worst_norm <= 1e-8, f"worst {worst_norm:.2e}"))
        checks.append(("cdf/pdf finite-difference (1e-6)",
                       worst_fd <= 1e-6, f"worst rel {worst_fd:.2e}"))
        checks.append(("CI-cdf quantile consistency incl. sign crossing (1e-6)",
                       worst_ci <= 1e-6, f"worst {worst_ci:.2e}"))
        exact_one = p_value(0.0, SplitLognormalApprox(0.3, 0.4)) == 1.0
        checks.append(("two-sided p == 1 at theta-hat 0 exactly", exact_one,
                       "exact equality"))
        _report(5, checks)


class TestCriterion6:
    def test_measure_property_suite(self):
        from grrr.core import (
            odds_ratio_to_theta,
            phi_to_theta,
            probs_to_phi,
            theta_from_probs,
        )
        grid = np.linspace(0.005, 0.995, 100)
        worst_flip = worst_round = worst_or = 0.0
        for p in grid:
            for q in grid:
                th = theta_from_probs(p, q)
                worst_flip = max(worst_flip,
                                 abs(th + theta_from_probs(1 - p, 1 - q)))
                worst_round = max(worst_round,
                                  abs(q_from_p_theta(p, th) - q))
                odds_ratio = (q / (1 - q)) / (p / (1 - p))
                via_phi = phi_to_theta(probs_to_phi(p, q), p)
                worst_or = max(worst_or,
                               abs(odds_ratio_to_theta(odds_ratio, p) - th),
                               abs(via_phi - th))
        checks = [
            ("label-flip antisymmetry (1e4 grid, 1e-10)",
             worst_flip <= 1e-10, f"worst {worst_flip:.2e}"),
            ("forward/inverse round trip (1e-10)",
             worst_round <= 1e-10, f"worst {worst_round:.2e}"),
            ("OR -> phi -> theta consistency (1e-10)",
             worst_or <= 1e-10, f"worst {worst_or:.2e}"),
        ]
        _report(6, checks)


class TestCriterion7:
    def test_calibration(self):
        start = time.perf_counter()
        n = 200
        p_true = 0.4
        reps = 100_000
        rng = make_rng(70707)
        checks = []
        for theta_true in (-0.4, 0.0, 0.3):
            q_true = q_from_p_theta(p_true, theta_true)
            x_c = rng.binomial(n, p_true, size=reps)
            x_t = rng.binomial(n, q_true, size=reps)
            s1sq = (1 - q_true) / (q_true * n) + (1 - p_true) / (p_true * n)
            s2sq = q_true / ((1 - q_true) * n) + p_true / ((1 - p_true) * n)
            model = SplitLognormalApprox(math.sqrt(s1sq), math.sqrt(s2sq))

            covered = 0
            thetas = np.empty(reps)
            for i in range(reps):
                table = StudyTable("sim", int(x_t[i]), n, int(x_c[i]), n)
                th = estimate_theta(table)
                thetas[i] = th
                lo, hi = confidence_interval(
                    th, SplitLognormalApprox.from_table(table))
                covered += lo <= theta_true <= hi
            coverage = covered / reps

            values, counts = np.unique(thetas, return_counts=True)
            cum = np.cumsum(counts) / reps
            below = cum - counts / reps
            model_cdf = np.array([cdf(float(v), theta_true, model)
                                  for v in values])
            ks = max(float(np.abs(cum - model_cdf).max()),
                     float(np.abs(below - model_cdf).max()))
            atom = float(counts.max()) / reps

            checks.append((f"coverage in [.94, .96] at theta={theta_true}",
                           0.94 <= coverage <= 0.96, f"got {coverage:.4f}"))
            # with equal arms the estimate has a lattice atom at exact ties;
            # the empirical cdf then sits >= atom/2 away from ANY continuous
            # cdf, so the bound is infeasible once atom/2 exceeds it
            checks.append((f"KS < 0.02 at theta={theta_true}",
                           ks < 0.02,
                           f"got {ks:.4f}; largest lattice atom {atom:.4f} "
                           f"forces KS >= {atom / 2:.4f}"))
        elapsed = time.perf_counter() - start
        checks.append(("runtime < 5 min", elapsed < 300.0, f"{elapsed:.0f} s"))
        _report(7, checks)


def _ml_negll(theta, tau, estimates):
    total = 0.0
    for e in estimates:
        v = e.sigma2 + tau * tau
        total += 0.5 * (math.log(2 * math.pi * v)
                        + (e.theta_hat - theta) ** 2 / v)
    return total


def _beta_negll(theta, tau, estimates):
    total = 0.0
    for e in estimates:
        shapes = beta_reparam((1 + theta) / 2, (e.sigma2 + tau * tau) / 4)
        a, b = shapes.alpha, shapes.beta
        psi = (1 + e.theta_hat) / 2
        log_b = math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
        total -= ((a - 1) * math.log(psi) + (b - 1) * math.log1p(-psi) - log_b)
    return total


def _sln_negll(theta, tau, tables):
    import scipy.integrate

    from grrr.distribution import loglik
    total = 0.0
    shapes = beta_reparam((1 + theta) / 2, tau * tau / 4)
    a, b = shapes.alpha, shapes.beta
    log_b = math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
    mode = (a - 1) / (a + b - 2) if min(a, b) > 1 else 0.5
    for t in tables:
        approx = SplitLognormalApprox.from_table(t)
        th_i = estimate_theta(t)

        def integrand(psi):
            log_beta_pdf = ((a - 1) * math.log(psi)
                            + (b - 1) * math.log1p(-psi) - log_b)
            return math.exp(loglik(th_i, 2 * psi - 1, approx) + log_beta_pdf)

        # psi = 0.5 is a derivative kink of the split density (the two
        # branches of the mean substitution meet there); declaring it keeps
        # the quadrature error smooth in (theta, tau) so it cancels in the
        # central differences below
        pts = sorted({mode, (1 + th_i) / 2, 0.5})
        val, _ = scipy.integrate.quad(integrand, 0.0, 1.0, points=pts,
                                      epsabs=1e-11, epsrel=1e-11, limit=500)
        total -= math.log(val)
    return total


def _fd_gradient_norm(negll, theta, tau, h=1e-5):
    g_theta = (negll(theta + h, tau) - negll(theta - h, tau)) / (2 * h)
    g_tau = (negll(theta, tau + h) - negll(theta, tau - h)) / (2 * h)
    return math.hypot(g_theta, g_tau)


class TestCriterion8:
    def test_optimizer_quality(self, bcg_tables, strept_tables,
                               bcg_fits, strept_fits):
        checks = []
        all_fits = {("bcg", name): fit for name, (fit, _) in bcg_fits.items()}
        all_fits.update({("strept", name): fit
                         for name, fit in strept_fits.items()})

        worst_spread = 0.0
        for (ds, name), fit in all_fits.items():
            spread = max(abs(r - fit.theta_hat) for r in fit.restart_thetas)
            worst_spread = max(worst_spread, spread)
        checks.append(("restarts agree in theta to 1e-5 (all fits)",
                       worst_spread <= 1e-5, f"worst {worst_spread:.2e}"))

        estimates = {"bcg": _estimates(bcg_tables),
                     "strept": _estimates(strept_tables)}
        tables = {"bcg": bcg_tables, "strept": strept_tables}
        worst_grad = 0.0
        interior = []
        for (ds, name), fit in all_fits.items():
            if fit.tau_hat <= 1e-6:
                continue  # boundary optimum: no interior gradient condition
            if name == "direct-ml":
                negll = lambda th, ta, e=estimates[ds]: _ml_negll(th, ta, e)
            elif name == "beta":
                negll = lambda th, ta, e=estimates[ds]: _beta_negll(th, ta, e)
            else:
                negll = lambda th, ta, t=tables[ds]: _sln_negll(th, ta, t)
            grad = _fd_gradient_norm(negll, fit.theta_hat, fit.tau_hat)
            interior.append(f"{ds}/{name}")
            worst_grad = max(worst_grad, grad)
        checks.append((f"gradient norm < 1e-4 at interior optima "
                       f"({', '.join(interior)})",
                       worst_grad < 1e-4, f"worst {worst_grad:.2e}"))

        skips = ["third example dataset (lamotrigine) not reconstructable "
                 "offline"]
        _report(8, checks, skips=skips)
