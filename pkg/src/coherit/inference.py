"""Parametric bootstrap confidence intervals and coverage experiments.

Bootstrap cohorts are drawn from the fitted model on the observed design
(continuous: Y* ~ N(X beta, V(theta)); binary slots dichotomized at zero),
refit with the matching algorithm, and summarized by percentile intervals.
Replicate RNG streams derive from (seed, replicate index), so results are
bitwise independent of the worker count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._parallel import ordered_map_shared
from .errors import CoheritError, DomainError, InferenceUnreliableError
from .estimate import EstimateResult, PackedCohort, fit, fit_packed, pack_cohort
from .model import ModelSpec
from .pedigree import Cohort
from .simulate import (
    draw_flat_responses,
    gen_phenotypes,
    make_cohort,
    param_rng,
    target_setting,
    truth_params,
)

DEFAULT_BOOTSTRAP_N = 100
MAX_FAILURE_FRACTION = 0.20

# stream id for deriving inner bootstrap seeds inside coverage replicates
_BOOT_STREAM = 2**41


@dataclass(frozen=True)
class ParamSummary:
    estimate: float
    ci_lo: float
    ci_hi: float
    boot_sd: float


@dataclass
class BootstrapReport:
    params: dict[str, ParamSummary]
    n_requested: int
    n_success: int
    seed: int

    def covers(self, name: str, value: float) -> bool:
        s = self.params[name]
        return s.ci_lo <= value <= s.ci_hi

    def to_rows(self) -> list[dict]:
        return [
            {
                "parameter": name,
                "estimate": s.estimate,
                "ci_lo": s.ci_lo,
                "ci_hi": s.ci_hi,
                "boot_sd": s.boot_sd,
                "n_success": self.n_success,
            }
            for name, s in self.params.items()
        ]


def _bootstrap_replicate(shared, replicate: int):
    packed, beta_flat, theta, seed = shared
    rng = np.random.default_rng(np.random.SeedSequence((seed, replicate)))
    y_star = draw_flat_responses(packed, beta_flat, theta, rng)
    try:
        return fit_packed(packed.with_responses(y_star)).params()
    except CoheritError:
        return None


def parametric_bootstrap(
    cohort: Cohort,
    fitted: EstimateResult,
    N: int = DEFAULT_BOOTSTRAP_N,
    seed: int = 0,
    *,
    threads: int = 1,
) -> BootstrapReport:
    """Percentile bootstrap over N synthetic refits of the fitted model.

    Raises InferenceUnreliableError (carrying the partial report) when more
    than 20% of the refits fail.
    """
    if N < 2:
        raise DomainError("bootstrap needs at least 2 replicates")
    if not fitted.converged:
        raise DomainError("refusing to bootstrap a non-converged fit")
    packed = pack_cohort(cohort)
    shared = (packed, fitted.beta.flatten(), fitted.theta, seed)
    results = ordered_map_shared(_bootstrap_replicate, shared, range(N), threads)
    draws = [r for r in results if r is not None]
    report = _summarize(fitted.params(), draws, N, seed)
    if N - len(draws) > MAX_FAILURE_FRACTION * N:
        raise InferenceUnreliableError(
            f"{N - len(draws)} of {N} bootstrap refits failed", report=report
        )
    return report


def _summarize(point: dict, draws: list[dict], n_requested: int, seed: int) -> BootstrapReport:
    params = {}
    for name, est in point.items():
        vals = np.array([d[name] for d in draws if name in d and np.isfinite(d[name])])
        if vals.size >= 2:
            lo, hi = np.percentile(vals, [2.5, 97.5])
            sd = float(vals.std(ddof=1))
        else:
            lo = hi = sd = float("nan")
        params[name] = ParamSummary(float(est), float(lo), float(hi), sd)
    return BootstrapReport(params, n_requested, len(draws), seed)


def save_bootstrap_csv(report: BootstrapReport, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("parameter,estimate,ci_lo,ci_hi,boot_sd,n_success\n")
        for row in report.to_rows():
            fh.write(
                f"{row['parameter']},{row['estimate']!r},{row['ci_lo']!r},"
                f"{row['ci_hi']!r},{row['boot_sd']!r},{row['n_success']}\n"
            )


# ---------------------------------------------------------------------------
# Coverage experiments
# ---------------------------------------------------------------------------

@dataclass
class CoverageResult:
    truth: dict[str, float]
    hits: dict[str, int]
    n_effective: dict[str, int]
    M: int
    N: int
    seed: int
    n_failures: int = 0

    def coverage(self) -> dict[str, float]:
        return {
            name: self.hits[name] / self.n_effective[name]
            for name in self.hits
            if self.n_effective[name] > 0
        }


def _coverage_replicate(shared, m: int):
    spec, label, n_families, N, seed, beta, theta = shared
    rng = np.random.default_rng(np.random.SeedSequence((seed, m)))
    template = make_cohort(spec, n_families, rng)
    cohort = gen_phenotypes(template, beta, theta, rng)
    boot_seed = int(np.random.SeedSequence((seed, m, _BOOT_STREAM)).generate_state(1)[0])
    try:
        fitted = fit(cohort)
        report = parametric_bootstrap(cohort, fitted, N=N, seed=boot_seed)
    except CoheritError:
        return None
    return {name: (s.ci_lo, s.ci_hi) for name, s in report.params.items()}


def coverage_experiment(
    label: str,
    spec: ModelSpec,
    n_families: int,
    M: int,
    N: int,
    seed: int,
    *,
    threads: int = 1,
) -> CoverageResult:
    """M independent simulate -> fit -> bootstrap runs; per-parameter fraction
    of 95% CIs containing the generating truth."""
    if M < 1 or N < 1:
        raise DomainError("M and N must be positive")
    beta, theta = target_setting(label, spec, param_rng(seed))
    truth = truth_params(spec, beta, theta)
    shared = (spec, label, n_families, N, seed, beta, theta)
    results = ordered_map_shared(_coverage_replicate, shared, range(M), threads)
    hits = {name: 0 for name in truth}
    n_eff = {name: 0 for name in truth}
    failures = 0
    for res in results:
        if res is None:
            failures += 1
            continue
        for name, (lo, hi) in res.items():
            if name in truth and np.isfinite(lo) and np.isfinite(hi):
                n_eff[name] += 1
                if lo <= truth[name] <= hi:
                    hits[name] += 1
    return CoverageResult(truth, hits, n_eff, M, N, seed, failures)


def save_coverage_csv(result: CoverageResult, path) -> None:
    cov = result.coverage()
    with open(path, "w", newline="") as fh:
        fh.write("parameter,truth,coverage,n_effective,M,N\n")
        for name in result.truth:
            c = cov.get(name, float("nan"))
            fh.write(
                f"{name},{result.truth[name]!r},{c!r},"
                f"{result.n_effective[name]},{result.M},{result.N}\n"
            )
