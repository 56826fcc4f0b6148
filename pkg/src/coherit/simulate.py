"""Simulation designs: covariates, parameter targets, phenotype generation,
and RMSE comparison tables.

Four heritability/genetic-correlation settings are supported, phenotypes are
drawn family-wise from the model covariance (with optional generative
kinship perturbations for reporting-error experiments), and binary
phenotypes arise by thresholding the latent draw at zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from ._parallel import ordered_map
from .errors import ConvergenceError, DomainError
from .estimate import EstimateResult, fit, pack_cohort, PackedCohort
from .model import (
    FixedEffects,
    ModelSpec,
    PhenotypeKind,
    VarianceComponents,
    build_covariance,
    coheritability,
    heritability,
)
from .pedigree import (
    Cohort,
    CrossLink,
    FamilyRecord,
    MemberRole,
    N_SLOTS,
    ROLE_INDEX,
    ROLE_ORDER,
    ReportingErrorMode,
    apply_reporting_error,
    cross_family_coefficient,
)

N_COVARIATES = 4


@dataclass(frozen=True)
class SimSetting:
    label: str
    h2_1: float
    h2_2: float
    rho: float


SETTINGS = {
    "high,high,low": SimSetting("high,high,low", 0.61, 0.54, 0.3),
    "high,low,low": SimSetting("high,low,low", 0.54, 0.35, 0.3),
    "low,low,low": SimSetting("low,low,low", 0.46, 0.35, 0.3),
    "high,high,high": SimSetting("high,high,high", 0.61, 0.54, 0.6),
}


def get_setting(label: str) -> SimSetting:
    try:
        return SETTINGS[label]
    except KeyError:
        raise DomainError(
            f"unknown setting {label!r}; choose from {sorted(SETTINGS)}"
        ) from None


# stream id for the true-parameter draw, outside the replicate-index range
_PARAM_STREAM = 2**40


def param_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, _PARAM_STREAM)))


def gen_covariates(
    n_members: int,
    rng: np.random.Generator,
    *,
    p1: float = 0.5,
    p2: float = 0.5,
    exp_rate: float = 1.0,
) -> np.ndarray:
    """Two Bernoulli, one standard normal, one exponential column."""
    return np.column_stack(
        [
            rng.binomial(1, p1, n_members).astype(float),
            rng.binomial(1, p2, n_members).astype(float),
            rng.standard_normal(n_members),
            rng.exponential(1.0 / exp_rate, n_members),
        ]
    )


def target_setting(
    label: str, spec: ModelSpec, rng: np.random.Generator
) -> tuple[FixedEffects, VarianceComponents]:
    """Draw nuisance parameters uniformly, then rescale the genetic standard
    deviations so the heritabilities hit the setting's targets exactly.

    Binary phenotypes get sigma_eps pinned at 1 (the estimation scale), so
    generative and estimated components are directly comparable.
    """
    setting = get_setting(label)
    if spec.K not in (1, 2):
        raise DomainError("settings are defined for one or two phenotypes")
    intercepts = rng.uniform(0, 1, spec.K)
    slopes = tuple(rng.uniform(0, 1, p) for p in spec.covariate_dims)
    gamma = np.ones(spec.K)
    if spec.K == 2:
        gamma[1] = rng.uniform(0, 1)
    sigma_b = rng.uniform(0, 1)
    sigma_eps = np.array(
        [
            1.0 if spec.is_binary(k) else rng.uniform(0, 1)
            for k in range(1, spec.K + 1)
        ]
    )
    rng.uniform(0, 1, spec.K)  # nominal sigma draw, replaced by the rescaling
    targets = [setting.h2_1, setting.h2_2][: spec.K]
    sigma_g = np.array(
        [
            math.sqrt(
                t / (1.0 - t) * (gamma[k] ** 2 * sigma_b**2 + sigma_eps[k] ** 2)
            )
            for k, t in enumerate(targets)
        ]
    )
    rho = np.eye(spec.K)
    if spec.K == 2:
        rho[0, 1] = rho[1, 0] = setting.rho
    theta = VarianceComponents(
        gamma=gamma, sigma_g=sigma_g, sigma_b=sigma_b, sigma_eps=sigma_eps, rho=rho
    )
    theta.validate(spec)
    return FixedEffects(intercepts, slopes), theta


def truth_params(spec: ModelSpec, beta: FixedEffects, theta: VarianceComponents) -> dict:
    """Flat true-parameter map matching EstimateResult.params() keys."""
    out = beta.to_dict(spec)
    out.update(theta.to_dict())
    sbk = theta.sigma_bk()
    for k in range(1, spec.K + 1):
        out[f"sigma_b{k}"] = float(sbk[k - 1])
        out[f"h2_{k}"] = heritability(theta, k)
    for k in range(1, spec.K + 1):
        for m in range(k + 1, spec.K + 1):
            out[f"h2_{k}{m}"] = coheritability(theta, k, m)
    return out


def make_cohort(
    spec: ModelSpec,
    n_families: int,
    rng: np.random.Generator,
    *,
    missing_parent_rate: float = 0.0,
) -> Cohort:
    """Cohort template: four-member families with covariates, no phenotypes.

    ``missing_parent_rate`` drops one random parent from that fraction of
    families to exercise the missing-member paths.
    """
    if any(p != N_COVARIATES for p in spec.covariate_dims):
        raise DomainError("the simulation design uses exactly 4 covariates")
    families = []
    for i in range(n_families):
        roles = list(ROLE_ORDER)
        if missing_parent_rate > 0.0 and rng.random() < missing_parent_rate:
            drop = MemberRole.PARENT1 if rng.random() < 0.5 else MemberRole.PARENT2
            roles.remove(drop)
        X = gen_covariates(len(roles), rng)
        families.append(
            FamilyRecord(
                family_id=f"fam{i:06d}",
                roles=tuple(roles),
                covariates=tuple(X for _ in range(spec.K)),
                phenotypes=np.full((len(roles), spec.K), np.nan),
            )
        )
    return Cohort(spec=spec, families=families)


# ---------------------------------------------------------------------------
# Phenotype generation
# ---------------------------------------------------------------------------

def _dichotomize(spec: ModelSpec, y_slots: np.ndarray) -> np.ndarray:
    """Threshold binary phenotype slots of a (..., S) phenotype-major block."""
    out = y_slots.copy()
    for k in range(1, spec.K + 1):
        if spec.is_binary(k):
            cols = slice((k - 1) * N_SLOTS, k * N_SLOTS)
            out[..., cols] = (y_slots[..., cols] > 0.0).astype(float)
    return out


def draw_flat_responses(
    packed: PackedCohort,
    beta_flat: np.ndarray,
    theta: VarianceComponents,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw phenotype slots from the declared model, grouped by missingness
    pattern; binary slots are dichotomized.  Used by the bootstrap."""
    V = build_covariance(theta, packed.kinship)
    mu = packed.design @ beta_flat
    out = np.zeros_like(packed.y)
    patterns, inverse = np.unique(packed.obs, axis=0, return_inverse=True)
    for pid in range(patterns.shape[0]):
        slots = np.flatnonzero(patterns[pid])
        rows = np.flatnonzero(inverse == pid)
        if slots.size == 0:
            continue
        L = np.linalg.cholesky(V[np.ix_(slots, slots)])
        z = rng.standard_normal((rows.size, slots.size))
        draw = mu[np.ix_(rows, slots)] + z @ L.T
        block = np.zeros((rows.size, packed.y.shape[1]))
        block[:, slots] = draw
        out[rows] = _dichotomize(packed.spec, block)
    return np.where(packed.obs, out, 0.0)


def _family_block_cov(fam: FamilyRecord, theta: VarianceComponents) -> np.ndarray:
    C = fam.generative_kinship()
    n = fam.n_members
    shared = theta.sigma_b**2 * np.outer(theta.gamma, theta.gamma)
    return (
        np.kron(shared, np.ones((n, n)))
        + np.kron(theta.genetic_cov(), C)
        + np.kron(np.diag(theta.sigma_eps**2), np.eye(n))
    )


def _cross_block_cov(
    fam_a: FamilyRecord, fam_b: FamilyRecord, link: CrossLink, theta: VarianceComponents
) -> np.ndarray:
    """Cross-family genetic covariance block (phenotype-major per family)."""
    Sigma = theta.genetic_cov()
    C = np.zeros((fam_a.n_members, fam_b.n_members))
    for u, role_u in enumerate(fam_a.roles):
        for v, role_v in enumerate(fam_b.roles):
            C[u, v] = cross_family_coefficient(role_u, role_v, link)
    return np.kron(Sigma, C)


def _safe_cholesky(V: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        w, Q = np.linalg.eigh(V)
        w = np.maximum(w, 0.0)
        return Q @ np.diag(np.sqrt(w))


def gen_phenotypes(
    template: Cohort,
    beta: FixedEffects,
    theta: VarianceComponents,
    rng: np.random.Generator,
) -> Cohort:
    """Fill a cohort template with model draws.

    Families carrying a generative-kinship override, and groups tied by
    cross-family links, are drawn jointly from their generative covariance;
    everything else goes through the vectorized declared-model path.
    Binary phenotype slots are thresholded at zero.
    """
    theta.validate()
    spec = template.spec
    n = template.n_families

    linked = {}
    for li, link in enumerate(template.cross_links):
        linked.setdefault(link.family_a, set()).add(li)
        linked.setdefault(link.family_b, set()).add(li)
    slow = {
        i
        for i, fam in enumerate(template.families)
        if fam.gen_kinship is not None or i in linked
    }

    new_phen: list[Optional[np.ndarray]] = [None] * n

    fast_idx = [i for i in range(n) if i not in slow]
    if fast_idx:
        fast_cohort = Cohort(
            spec, [template.families[i] for i in fast_idx], (), template.kinship_template
        )
        packed = pack_cohort_all_observed(fast_cohort)
        flat = draw_flat_responses(packed, beta.flatten(), theta, rng)
        for row, i in enumerate(fast_idx):
            fam = template.families[i]
            vals = np.empty((fam.n_members, spec.K))
            for m, role in enumerate(fam.roles):
                for k in range(spec.K):
                    vals[m, k] = flat[row, k * N_SLOTS + ROLE_INDEX[role]]
            new_phen[i] = vals

    # connected components of the link graph, plus solitary perturbed families
    comp: dict[int, list[int]] = {}
    assigned: dict[int, int] = {}
    for i in sorted(slow):
        if i in assigned:
            continue
        stack, members = [i], []
        while stack:
            j = stack.pop()
            if j in assigned:
                continue
            assigned[j] = i
            members.append(j)
            for li in linked.get(j, ()):
                link = template.cross_links[li]
                stack.extend((link.family_a, link.family_b))
        comp[i] = sorted(members)

    for members in comp.values():
        fams = [template.families[j] for j in members]
        sizes = [f.n_members * spec.K for f in fams]
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        D = offsets[-1]
        V = np.zeros((D, D))
        mu = np.zeros(D)
        for a, fam in enumerate(fams):
            sl = slice(offsets[a], offsets[a + 1])
            V[sl, sl] = _family_block_cov(fam, theta)
            for k in range(spec.K):
                vals = beta.intercepts[k] + fam.covariates[k] @ beta.slopes[k]
                mu[offsets[a] + k * fam.n_members : offsets[a] + (k + 1) * fam.n_members] = vals
        for link in template.cross_links:
            if link.family_a in members and link.family_b in members:
                a = members.index(link.family_a)
                b = members.index(link.family_b)
                blk = _cross_block_cov(fams[a], fams[b], link, theta)
                V[offsets[a] : offsets[a + 1], offsets[b] : offsets[b + 1]] += blk
                V[offsets[b] : offsets[b + 1], offsets[a] : offsets[a + 1]] += blk.T
        L = _safe_cholesky(V)
        draw = mu + L @ rng.standard_normal(D)
        for a, (j, fam) in enumerate(zip(members, fams)):
            vals = np.empty((fam.n_members, spec.K))
            for k in range(spec.K):
                seg = draw[offsets[a] + k * fam.n_members : offsets[a] + (k + 1) * fam.n_members]
                vals[:, k] = (seg > 0.0).astype(float) if spec.is_binary(k + 1) else seg
            new_phen[j] = vals

    families = [
        replace(fam, phenotypes=new_phen[i])
        for i, fam in enumerate(template.families)
    ]
    return Cohort(spec, families, template.cross_links, template.kinship_template)


def pack_cohort_all_observed(cohort: Cohort) -> PackedCohort:
    """Packed view that treats every present-member slot as observed,
    regardless of phenotype values (used to generate them)."""
    filled = []
    for fam in cohort.families:
        filled.append(replace(fam, phenotypes=np.zeros((fam.n_members, cohort.spec.K))))
    return pack_cohort(Cohort(cohort.spec, filled, (), cohort.kinship_template))


# ---------------------------------------------------------------------------
# Replicated experiments and RMSE tables
# ---------------------------------------------------------------------------

BETA_BLOCK = "beta"
THETA_BLOCK = "theta"
H2_BLOCK = "heritability"


def param_block(name: str) -> str:
    if name.startswith(("alpha", "beta")):
        return BETA_BLOCK
    if name.startswith("h2"):
        return H2_BLOCK
    return THETA_BLOCK


@dataclass
class SimReport:
    """True values and per-replicate estimates for one experiment arm."""

    truth: dict[str, float]
    estimates: list[dict[str, float]]
    n_failures: int = 0

    def rmse(self) -> dict[str, float]:
        out = {}
        for name, true_val in self.truth.items():
            vals = np.array([e[name] for e in self.estimates if name in e])
            if vals.size:
                out[name] = float(np.sqrt(np.mean((vals - true_val) ** 2)))
        return out

    def medians(self) -> dict[str, float]:
        return {
            name: float(np.median([e[name] for e in self.estimates]))
            for name in self.truth
            if all(name in e for e in self.estimates)
        }


def rmse_table(truth: dict, estimates: list[dict]) -> SimReport:
    return SimReport(truth=dict(truth), estimates=list(estimates))


def percent_difference(report_a: SimReport, report_b: SimReport) -> dict[str, float]:
    """100 * (RMSE_a - RMSE_b) / RMSE_a per common parameter, plus block and
    overall averages of the per-parameter differences."""
    ra, rb = report_a.rmse(), report_b.rmse()
    common = [k for k in ra if k in rb and ra[k] > 0]
    out = {}
    blocks: dict[str, list[float]] = {}
    for k in common:
        pct = 100.0 * (ra[k] - rb[k]) / ra[k]
        out[k] = pct
        blocks.setdefault(param_block(k), []).append(pct)
    for blk, vals in blocks.items():
        out[f"avg_{blk}"] = float(np.mean(vals))
    out["avg_all"] = float(np.mean([v for k, v in out.items() if not k.startswith("avg_")]))
    return out


def single_phenotype_view(cohort: Cohort, k: int) -> Cohort:
    """Restrict a cohort to phenotype ``k`` (1-based) for separated fits."""
    spec = cohort.spec
    sub_spec = ModelSpec((spec.kinds[k - 1],), (spec.covariate_dims[k - 1],))
    fams = [
        FamilyRecord(
            family_id=f.family_id,
            roles=f.roles,
            covariates=(f.covariates[k - 1],),
            phenotypes=f.phenotypes[:, [k - 1]],
            weight=f.weight,
        )
        for f in cohort.families
    ]
    return Cohort(sub_spec, fams, (), cohort.kinship_template)


def single_phenotype_truth(
    spec: ModelSpec, beta: FixedEffects, theta: VarianceComponents, k: int
) -> tuple[ModelSpec, FixedEffects, VarianceComponents]:
    """Project the joint truth onto one phenotype's single-trait model."""
    sub_spec = ModelSpec((spec.kinds[k - 1],), (spec.covariate_dims[k - 1],))
    sub_beta = FixedEffects(
        np.array([beta.intercepts[k - 1]]), (beta.slopes[k - 1].copy(),)
    )
    sub_theta = VarianceComponents(
        gamma=np.array([1.0]),
        sigma_g=np.array([theta.sigma_g[k - 1]]),
        sigma_b=abs(float(theta.sigma_bk()[k - 1])),
        sigma_eps=np.array([theta.sigma_eps[k - 1]]),
        rho=np.eye(1),
    )
    return sub_spec, sub_beta, sub_theta


@dataclass(frozen=True)
class ReplicateTask:
    spec: ModelSpec
    beta: FixedEffects
    theta: VarianceComponents
    n_families: int
    seed: int
    replicate: int
    missing_parent_rate: float = 0.0
    reporting_error_rate: float = 0.0
    reporting_error_mode: Optional[ReportingErrorMode] = None


def run_replicate(task: ReplicateTask) -> Optional[dict[str, float]]:
    """Simulate one cohort and fit it; None when the fit fails to converge."""
    rng = np.random.default_rng(np.random.SeedSequence((task.seed, task.replicate)))
    template = make_cohort(
        task.spec, task.n_families, rng, missing_parent_rate=task.missing_parent_rate
    )
    if task.reporting_error_rate > 0.0:
        template = apply_reporting_error(
            template, task.reporting_error_rate, task.reporting_error_mode, rng
        )
    cohort = gen_phenotypes(template, task.beta, task.theta, rng)
    try:
        return fit(cohort).params()
    except ConvergenceError:
        return None


def run_replicates(
    spec: ModelSpec,
    label: str,
    n_families: int,
    n_reps: int,
    seed: int,
    *,
    threads: int = 1,
    missing_parent_rate: float = 0.0,
    reporting_error_rate: float = 0.0,
    reporting_error_mode: Optional[ReportingErrorMode] = None,
) -> SimReport:
    """The full simulate -> fit pipeline, a pure function of the seed."""
    beta, theta = target_setting(label, spec, param_rng(seed))
    tasks = [
        ReplicateTask(
            spec, beta, theta, n_families, seed, r,
            missing_parent_rate, reporting_error_rate, reporting_error_mode,
        )
        for r in range(n_reps)
    ]
    results = ordered_map(run_replicate, tasks, threads)
    estimates = [r for r in results if r is not None]
    return SimReport(
        truth=truth_params(spec, beta, theta),
        estimates=estimates,
        n_failures=n_reps - len(estimates),
    )
