"""Command-line front end: CSV ingestion, model dispatch, report emission.

Subcommands:

* ``grrr analyze``  — full meta-analysis (pooled fit + per-study records).
* ``grrr estimate`` — per-study estimates and CIs only, no pooling.
* ``grrr convert``  — odds ratio (with optional CI) to the GRRR scale.

All data goes to standard output (JSON or CSV, byte-stable for fixed input
and flags); diagnostics go to standard error. Exit status is 0 only when
parsing, fitting, and convergence all succeed. ``GRRR_THREADS`` caps
worker parallelism; the current implementation is single-threaded, so any
valid value is accepted and simply recorded.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .core import StudyTable, estimate_theta, odds_ratio_to_theta, theta_from_probs
from .distribution import SplitLognormalApprox, confidence_interval
from .errors import DatasetError, DomainError, GrrrError
from .kernels import std_normal_quantile
from .meta import (MetaFit, fit_beta_model, fit_direct_dl, fit_direct_ml,
                   fit_split_lognormal_model)
from .variance import VarianceSpec, _corrected_props, make_estimate

__all__ = [
    "AnalysisConfig",
    "AnalysisReport",
    "parse_dataset",
    "run_analysis",
    "render_plain_language",
    "emit_report",
    "convert_mode",
    "main",
]

_HEADER = ["study_id", "events_treatment", "n_treatment",
           "events_control", "n_control"]
_MODELS = ("direct-ml", "direct-dl", "beta", "split-lognormal")
_VARIANCES = ("exact", "bootstrap", "approx")


@dataclass(frozen=True)
class AnalysisConfig:
    model: str = "direct-ml"
    variance: str = "exact"
    zero_correction: float = 0.5
    bootstrap_reps: int = 100_000
    seed: int = 0
    alpha: float = 0.05
    baseline_risk: Optional[float] = None
    event_is_harm: bool = True

    def __post_init__(self):
        if self.model not in _MODELS:
            raise DomainError(f"unknown model {self.model!r}")
        if self.variance not in _VARIANCES:
            raise DomainError(f"unknown variance engine {self.variance!r}")
        if not (self.zero_correction >= 0.0 and math.isfinite(self.zero_correction)):
            raise DomainError("zero_correction must be a finite value >= 0")
        if self.bootstrap_reps < 1000:
            raise DomainError("bootstrap_reps must be >= 1000")
        if not (0.0 < self.alpha < 1.0):
            raise DomainError("alpha must be in (0, 1)")
        if self.baseline_risk is not None and not (0.0 < self.baseline_risk < 1.0):
            raise DomainError("baseline_risk must be in (0, 1)")


@dataclass(frozen=True)
class StudyRecord:
    study_id: str
    theta_hat: float
    sigma2: float
    ci_lower: Optional[float]
    ci_upper: Optional[float]
    ci_note: Optional[str]
    used: bool
    discard_reason: Optional[str]


@dataclass(frozen=True)
class AnalysisReport:
    fit: MetaFit
    per_study: tuple
    summary_text: str
    dataset_hash: str
    alpha: float
    pooled_ci: tuple

    def __post_init__(self):
        discarded = sum(1 for r in self.per_study if not r.used)
        if len(self.per_study) != self.fit.n_studies_used + discarded:
            raise DomainError("per-study record count does not tally")


def parse_dataset(source, swap_arms: bool = False) -> list[StudyTable]:
    """Read study tables from a CSV path or text stream.

    The header must be exactly ``study_id,events_treatment,n_treatment,
    events_control,n_control``. With ``swap_arms`` the two count pairs are
    interpreted in the opposite order (control first). Errors carry the
    1-based line number of the offending row.
    """
    if isinstance(source, (str, os.PathLike)):
        try:
            fh = open(source, "r", encoding="utf-8-sig", newline="")
        except OSError as exc:
            raise DatasetError(f"cannot read {source}: {exc.strerror}") from exc
        with fh:
            return parse_dataset(fh, swap_arms)

    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise DatasetError("no studies: input is empty") from None
    if [h.strip() for h in header] != _HEADER:
        raise DatasetError(
            f"line 1: bad header {','.join(header)!r}; "
            f"expected {','.join(_HEADER)!r}")

    tables = []
    seen = set()
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 5:
            raise DatasetError(f"line {lineno}: expected 5 fields, got {len(row)}")
        study_id = row[0].strip()
        if not study_id:
            raise DatasetError(f"line {lineno}: empty study_id")
        if study_id in seen:
            raise DatasetError(f"line {lineno}: duplicate study_id {study_id!r}")
        seen.add(study_id)
        counts = []
        for name, cell in zip(_HEADER[1:], row[1:]):
            text = cell.strip()
            try:
                value = int(text)
            except ValueError:
                raise DatasetError(
                    f"line {lineno}: {name} must be an integer, got {text!r}"
                    ) from None
            counts.append(value)
        et, nt, ec, nc = counts
        if swap_arms:
            et, nt, ec, nc = ec, nc, et, nt
        try:
            tables.append(StudyTable(study_id, et, nt, ec, nc))
        except DatasetError as exc:
            raise DatasetError(f"line {lineno}: {exc}") from None
    if not tables:
        raise DatasetError("no studies: file contains a header but no rows")
    return tables


def _study_ci(table: StudyTable, zero_correction: float, alpha: float):
    """Per-study split-lognormal CI; (None, None, reason) when the table
    needs a zero-correction that was not granted."""
    try:
        approx = SplitLognormalApprox.from_table(table, zero_correction)
    except DomainError:
        return None, None, "zero margin; rerun with --zero-correction > 0"
    if table.has_boundary_margin and zero_correction > 0.0:
        p, q, _, _ = _corrected_props(table, zero_correction)
        theta = theta_from_probs(p, q)
    else:
        theta = estimate_theta(table)
    lo, hi = confidence_interval(theta, approx, alpha)
    return lo, hi, None


def run_analysis(config: AnalysisConfig, tables: Sequence[StudyTable],
                 dataset_hash: str = "") -> AnalysisReport:
    """Dispatch to the selected fitter and assemble the report.

    The split-lognormal model ignores the variance flag (its likelihood
    carries its own dispersion); per-study variances are still reported
    with the selected engine. The pooled CI is the normal-approximation
    interval theta-hat +/- z se, clipped to [-1, 1].
    """
    tables = list(tables)
    if len(tables) < 2:
        raise DomainError(f"need at least 2 studies, got {len(tables)}")

    estimates = [
        make_estimate(t, VarianceSpec(config.variance, config.bootstrap_reps,
                                      config.seed + i),
                      zero_correction=config.zero_correction)
        for i, t in enumerate(tables)
    ]

    if config.model == "direct-ml":
        fit = fit_direct_ml(estimates)
    elif config.model == "direct-dl":
        fit = fit_direct_dl(estimates)
    elif config.model == "beta":
        fit = fit_beta_model(estimates)
    else:
        fit = fit_split_lognormal_model(tables, config.zero_correction)

    records = []
    for table, est in zip(tables, estimates):
        used = not (est.degenerate and not est.corrected)
        reason = None if used else ("double-degenerate table "
                                    "(no events or all events in both arms)")
        lo, hi, note = _study_ci(table, config.zero_correction, config.alpha)
        records.append(StudyRecord(table.study_id, est.theta_hat, est.sigma2,
                                   lo, hi, note, used, reason))

    z = std_normal_quantile(1.0 - config.alpha / 2.0)
    pooled_ci = (max(-1.0, fit.theta_hat - z * fit.se_theta),
                 min(1.0, fit.theta_hat + z * fit.se_theta))
    summary = render_plain_language(fit, config.event_is_harm,
                                    ci=pooled_ci)
    return AnalysisReport(fit=fit, per_study=tuple(records),
                          summary_text=summary, dataset_hash=dataset_hash,
                          alpha=config.alpha, pooled_ci=pooled_ci)


def render_plain_language(fit: MetaFit, event_is_harm: bool = True,
                          ci: Optional[tuple] = None,
                          alpha: float = 0.05) -> str:
    """Lay-audience sentence for a pooled fit.

    Percentages are the rounded magnitude of theta; the CI clause uses the
    same transform applied to both interval ends.
    """
    theta = fit.theta_hat
    if ci is None:
        z = std_normal_quantile(1.0 - alpha / 2.0)
        ci = (max(-1.0, theta - z * fit.se_theta),
              min(1.0, theta + z * fit.se_theta))
    if theta == 0.0:
        return ("There is no estimated difference between the treated and "
                "untreated in the probability of the event.")
    if theta < 0.0:
        pct = round(-100.0 * theta)
        lo, hi = sorted((round(-100.0 * ci[1]), round(-100.0 * ci[0])))
        text = (f"An estimated {pct}% of those who experience the event "
                f"without treatment would avoid it under treatment; allowing "
                f"for uncertainty, this percentage could in fact be between "
                f"around {lo}%-{hi}%.")
        favours = "treatment" if event_is_harm else "control"
    else:
        pct = round(100.0 * theta)
        lo, hi = sorted((round(100.0 * ci[0]), round(100.0 * ci[1])))
        text = (f"A further {pct}% of those who would not experience the "
                f"event without treatment would experience it under "
                f"treatment; allowing for uncertainty, this percentage could "
                f"be between around {lo}%-{hi}%.")
        favours = "control" if event_is_harm else "treatment"
    return text + f" On balance this favours the {favours}."


def _num(x):
    # floats serialize via repr (shortest round-trip), so reparse is exact
    return None if x is None else x


def emit_report(report: AnalysisReport, fmt: str = "json",
                model: str = "") -> bytes:
    """Serialize a report. JSON keys are emitted in a fixed documented
    order; CSV is the per-study rows plus one row flagged POOLED."""
    fit = report.fit
    if fmt == "json":
        obj = {
            "model": fit.method if not model else model,
            "pooled": {
                "theta": fit.theta_hat,
                "se": fit.se_theta,
                "ci_lower": report.pooled_ci[0],
                "ci_upper": report.pooled_ci[1],
            },
            "tau": {"estimate": fit.tau_hat, "se": _num(fit.se_tau)},
            "i_squared": _num(fit.i_squared),
            "studies": [
                {
                    "study_id": r.study_id,
                    "theta_hat": r.theta_hat,
                    "sigma2": r.sigma2,
                    "ci_lower": _num(r.ci_lower),
                    "ci_upper": _num(r.ci_upper),
                    "ci_note": r.ci_note,
                    "used": r.used,
                    "discard_reason": r.discard_reason,
                }
                for r in report.per_study
            ],
            "summary": report.summary_text,
            "alpha": report.alpha,
            "loglik": _num(fit.loglik),
            "n_studies_used": fit.n_studies_used,
            "converged": fit.converged,
            "dataset_sha256": report.dataset_hash,
        }
        return (json.dumps(obj, indent=2) + "\n").encode("utf-8")
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["study_id", "theta", "se", "sigma2", "ci_lower",
                         "ci_upper", "used", "note", "tau", "i_squared"])

        def cell(x):
            return "" if x is None else (repr(x) if isinstance(x, float) else x)

        for r in report.per_study:
            note = r.discard_reason or r.ci_note
            writer.writerow([r.study_id, cell(r.theta_hat),
                             cell(math.sqrt(r.sigma2)), cell(r.sigma2),
                             cell(r.ci_lower), cell(r.ci_upper),
                             "yes" if r.used else "no", cell(note), "", ""])
        writer.writerow(["POOLED", cell(fit.theta_hat), cell(fit.se_theta),
                         "", cell(report.pooled_ci[0]), cell(report.pooled_ci[1]),
                         "yes", "", cell(fit.tau_hat), cell(fit.i_squared)])
        return buf.getvalue().encode("utf-8")
    raise DomainError(f"unknown output format {fmt!r}")


def convert_mode(or_value: float, or_ci: Optional[tuple],
                 baseline_risk: float):
    """Map an odds ratio (and optional CI) onto the GRRR scale at the given
    baseline risk. The transform is monotone in the odds ratio for fixed
    baseline, so interval endpoints map to interval endpoints."""
    theta = odds_ratio_to_theta(or_value, baseline_risk)
    if or_ci is None:
        return theta, None
    lo, hi = or_ci
    if not (0.0 < lo <= or_value <= hi):
        raise DomainError(
            "odds-ratio CI must satisfy 0 < lower <= OR <= upper")
    return theta, (odds_ratio_to_theta(lo, baseline_risk),
                   odds_ratio_to_theta(hi, baseline_risk))


def _check_threads_env() -> Optional[int]:
    raw = os.environ.get("GRRR_THREADS")
    if raw is None:
        return None
    try:
        value = int(raw)
    except ValueError:
        raise DomainError(f"GRRR_THREADS must be a positive integer, got {raw!r}"
                          ) from None
    if value < 1:
        raise DomainError(f"GRRR_THREADS must be a positive integer, got {raw!r}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grrr",
        description="Meta-analysis of 2x2 outcome tables on the generalised "
                    "relative risk reduction scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--input", required=True, help="CSV dataset path")
        p.add_argument("--variance", choices=_VARIANCES, default="exact",
                       help="within-study variance engine (default exact)")
        p.add_argument("--zero-correction", type=float, default=0.5,
                       metavar="C",
                       help="added to all four cells of tables with a zero "
                            "margin where a method needs interior values "
                            "(default 0.5)")
        p.add_argument("--bootstrap-reps", type=int, default=100_000)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--alpha", type=float, default=0.05)
        p.add_argument("--format", choices=("json", "csv"), default="json")
        p.add_argument("--control-first", action="store_true",
                       help="interpret the two CSV count pairs as control "
                            "arm first, treatment arm second")

    analyze = sub.add_parser("analyze", help="pooled meta-analysis")
    add_common(analyze)
    analyze.add_argument("--model", choices=_MODELS, default="direct-ml")
    direction = analyze.add_mutually_exclusive_group()
    direction.add_argument("--harm", dest="event_is_harm",
                           action="store_true", default=True,
                           help="the event is undesirable (default)")
    direction.add_argument("--benefit", dest="event_is_harm",
                           action="store_false",
                           help="the event is desirable")

    estimate = sub.add_parser("estimate", help="per-study estimates only")
    add_common(estimate)

    convert = sub.add_parser("convert",
                             help="odds ratio to the GRRR scale")
    convert.add_argument("--or", dest="or_value", type=float, required=True)
    convert.add_argument("--or-ci", metavar="L,U", default=None,
                         help="comma-separated odds-ratio CI bounds")
    convert.add_argument("--baseline-risk", type=float, required=True)
    return parser


def _hash_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _cmd_analyze(args) -> int:
    config = AnalysisConfig(model=args.model, variance=args.variance,
                            zero_correction=args.zero_correction,
                            bootstrap_reps=args.bootstrap_reps,
                            seed=args.seed, alpha=args.alpha,
                            event_is_harm=args.event_is_harm)
    tables = parse_dataset(args.input, swap_arms=args.control_first)
    report = run_analysis(config, tables, dataset_hash=_hash_file(args.input))
    sys.stdout.buffer.write(emit_report(report, args.format,
                                        model=config.model))
    sys.stdout.buffer.flush()
    if not report.fit.converged:
        print("warning: fit did not converge", file=sys.stderr)
        return 1
    return 0


def _cmd_estimate(args) -> int:
    tables = parse_dataset(args.input, swap_arms=args.control_first)
    records = []
    for i, table in enumerate(tables):
        spec = VarianceSpec(args.variance, args.bootstrap_reps, args.seed + i)
        est = make_estimate(table, spec, zero_correction=args.zero_correction)
        lo, hi, note = _study_ci(table, args.zero_correction, args.alpha)
        records.append({
            "study_id": table.study_id,
            "theta_hat": est.theta_hat,
            "sigma2": est.sigma2,
            "ci_lower": lo,
            "ci_upper": hi,
            "ci_note": note,
            "degenerate": est.degenerate,
        })
    if args.format == "json":
        obj = {"studies": records, "alpha": args.alpha,
               "dataset_sha256": _hash_file(args.input)}
        sys.stdout.buffer.write((json.dumps(obj, indent=2) + "\n"
                                 ).encode("utf-8"))
    else:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["study_id", "theta_hat", "sigma2", "ci_lower",
                         "ci_upper", "note"])
        for r in records:
            writer.writerow([r["study_id"], repr(r["theta_hat"]),
                             repr(r["sigma2"]),
                             "" if r["ci_lower"] is None else repr(r["ci_lower"]),
                             "" if r["ci_upper"] is None else repr(r["ci_upper"]),
                             r["ci_note"] or ""])
        sys.stdout.buffer.write(buf.getvalue().encode("utf-8"))
    sys.stdout.buffer.flush()
    return 0


def _cmd_convert(args) -> int:
    ci = None
    if args.or_ci is not None:
        parts = args.or_ci.split(",")
        if len(parts) != 2:
            raise DomainError("--or-ci expects two comma-separated numbers")
        try:
            ci = (float(parts[0]), float(parts[1]))
        except ValueError:
            raise DomainError(f"--or-ci expects numbers, got {args.or_ci!r}"
                              ) from None
    theta, theta_ci = convert_mode(args.or_value, ci, args.baseline_risk)
    obj = {
        "odds_ratio": args.or_value,
        "baseline_risk": args.baseline_risk,
        "theta": theta,
        "ci_lower": None if theta_ci is None else theta_ci[0],
        "ci_upper": None if theta_ci is None else theta_ci[1],
    }
    sys.stdout.buffer.write((json.dumps(obj, indent=2) + "\n").encode("utf-8"))
    sys.stdout.buffer.flush()
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _check_threads_env()
        if args.command == "analyze":
            return _cmd_analyze(args)
        if args.command == "estimate":
            return _cmd_estimate(args)
        return _cmd_convert(args)
    except GrrrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
