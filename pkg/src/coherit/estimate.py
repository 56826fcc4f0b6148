"""Moment-based estimators for the family covariance model.

The continuous-phenotype path alternates a GEE update of the mean
coefficients with the empirical residual covariance, then recovers the
variance components by weighted nonlinear least squares on the
kinship-class moment system.  Binary and mixed phenotypes go through the
liability representation: observed indicators are mapped to conditional
first/second latent moments (pairwise, under the current parameter
estimates) and fed through the same moment solver, iterating to a joint
fixed point.

All estimators consume a :class:`PackedCohort`, a dense template view of the
family list (4 member slots x K phenotypes, phenotype-major), so missing
members and missing phenotype values reduce to zero rows and observation
masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
from scipy.optimize import least_squares
from scipy.special import log_ndtr, ndtr, ndtri

from .errors import (
    ConvergenceError,
    DomainError,
    RankDeficiencyError,
    SeparationError,
)
from .gaussian import halfplane_moments, quadrant_moments, uni_moments
from .model import (
    FixedEffects,
    ModelSpec,
    PhenotypeKind,
    VarianceComponents,
    build_covariance,
    coheritability,
    heritability,
    pair_covariance,
)
from .pedigree import Cohort, N_SLOTS, ROLE_INDEX, kinship_classes

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 100
RIDGE_CONDITION_LIMIT = 1e12


# ---------------------------------------------------------------------------
# Packing
# ---------------------------------------------------------------------------

@dataclass
class PackedCohort:
    """Dense template view of a cohort: slot = phenotype * 4 + member."""

    spec: ModelSpec
    design: np.ndarray  # (n, S, P), zero rows at unobserved slots
    y: np.ndarray  # (n, S), zero-filled at unobserved slots
    obs: np.ndarray  # (n, S) bool
    present: np.ndarray  # (n, 4) bool
    weights: np.ndarray  # (n,)
    kinship: np.ndarray  # declared 4x4 template

    @property
    def n(self) -> int:
        return self.design.shape[0]

    @property
    def n_slots(self) -> int:
        return self.design.shape[1]

    def with_responses(self, y: np.ndarray) -> "PackedCohort":
        """Same structure with new response values (same observation mask)."""
        return PackedCohort(
            self.spec, self.design, np.where(self.obs, y, 0.0), self.obs,
            self.present, self.weights, self.kinship,
        )


def pack_cohort(cohort: Cohort) -> PackedCohort:
    spec = cohort.spec
    K, S, P = spec.K, spec.K * N_SLOTS, spec.beta_dim()
    n = cohort.n_families
    design = np.zeros((n, S, P))
    y = np.zeros((n, S))
    obs = np.zeros((n, S), dtype=bool)
    present = np.zeros((n, N_SLOTS), dtype=bool)
    weights = np.empty(n)
    offsets = np.concatenate([[0], np.cumsum([1 + p for p in spec.covariate_dims])])
    for i, fam in enumerate(cohort.families):
        weights[i] = fam.weight
        member_idx = [ROLE_INDEX[r] for r in fam.roles]
        present[i, member_idx] = True
        for k in range(K):
            off = offsets[k]
            pk = spec.covariate_dims[k]
            for m, j in enumerate(member_idx):
                val = fam.phenotypes[m, k]
                if math.isnan(val):
                    continue
                slot = k * N_SLOTS + j
                obs[i, slot] = True
                y[i, slot] = val
                design[i, slot, off] = 1.0
                design[i, slot, off + 1 : off + 1 + pk] = fam.covariates[k][m]
    return PackedCohort(spec, design, y, obs, present, weights, cohort.kinship_template.values)


# ---------------------------------------------------------------------------
# Moment system
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EquationTemplate:
    """One kinship-class moment equation on the 4-member template.

    ``slot_pairs`` lists the (slot of phenotype k, slot of phenotype m)
    products averaged into the statistic; for cross-phenotype cross-member
    classes both orderings are included and ``dir_mult`` is 2 so the
    objective weight still counts unordered pairs.
    """

    k: int  # 1-based
    m: int
    kind: str  # "var" | "same" | "kin"
    c: Optional[float]
    slot_pairs: tuple[tuple[int, int], ...]
    dir_mult: int


@dataclass
class MomentEquation:
    template: EquationTemplate
    value: float
    weight: float

    @property
    def key(self):
        t = self.template
        return (t.kind, t.k, t.m, t.c)


@dataclass
class MomentSystem:
    spec: ModelSpec
    equations: list[MomentEquation]
    dropped: list[tuple] = field(default_factory=list)
    n_excluded_pairs: int = 0

    def values(self) -> np.ndarray:
        return np.array([e.value for e in self.equations])

    def weights(self) -> np.ndarray:
        return np.array([e.weight for e in self.equations])

    def by_key(self) -> dict:
        return {e.key: e.value for e in self.equations}


def equation_templates(K: int, kinship: np.ndarray) -> list[EquationTemplate]:
    """Canonical equation order: variances, same-member covariances, then
    per phenotype-pair kinship classes by descending coefficient."""
    classes = kinship_classes(_as_kinship(kinship))
    out = []
    for k in range(1, K + 1):
        pairs = tuple(((k - 1) * N_SLOTS + j,) * 2 for j in range(N_SLOTS))
        out.append(EquationTemplate(k, k, "var", None, pairs, 1))
    for k in range(1, K + 1):
        for m in range(k + 1, K + 1):
            pairs = tuple(
                ((k - 1) * N_SLOTS + j, (m - 1) * N_SLOTS + j) for j in range(N_SLOTS)
            )
            out.append(EquationTemplate(k, m, "same", None, pairs, 1))
    pheno_pairs = [(k, k) for k in range(1, K + 1)]
    pheno_pairs += [(k, m) for k in range(1, K + 1) for m in range(k + 1, K + 1)]
    for k, m in pheno_pairs:
        for c, member_pairs in classes.classes.items():
            slot_pairs = []
            for (j, s) in member_pairs:
                slot_pairs.append(((k - 1) * N_SLOTS + j, (m - 1) * N_SLOTS + s))
                if k != m:
                    slot_pairs.append(((k - 1) * N_SLOTS + s, (m - 1) * N_SLOTS + j))
            out.append(
                EquationTemplate(k, m, "kin", float(c), tuple(slot_pairs), 2 if k != m else 1)
            )
    return out


def _as_kinship(kinship):
    from .pedigree import KinshipMatrix

    if isinstance(kinship, KinshipMatrix):
        return kinship
    return KinshipMatrix(np.asarray(kinship, dtype=float))


def _assemble_system(
    spec: ModelSpec,
    templates: Sequence[EquationTemplate],
    items_fn,
    weights: np.ndarray,
) -> MomentSystem:
    """Average per-item statistics into one equation per kinship class.

    ``items_fn(t)`` returns (items, mask) arrays of shape (n, n_pairs); the
    equation weight is the weighted mean count of unordered contributing
    pairs per family.
    """
    total_w = weights.sum()
    eqs = []
    dropped = []
    excluded = 0
    for t in templates:
        items, mask, bad = items_fn(t)
        excluded += bad
        wcol = weights[:, None]
        cnt = float((wcol * mask).sum())
        if cnt <= 0.0:
            dropped.append((t.kind, t.k, t.m, t.c))
            continue
        value = float((wcol * np.where(mask, items, 0.0)).sum() / cnt)
        weight = cnt / (t.dir_mult * total_w)
        eqs.append(MomentEquation(t, value, weight))
    return MomentSystem(spec, eqs, dropped, excluded)


def residual_moment_system(packed: PackedCohort, resid: np.ndarray) -> MomentSystem:
    """Kinship-class averages of residual cross-products (pairwise complete)."""
    obs = packed.obs
    templates = equation_templates(packed.spec.K, packed.kinship)

    def items(t):
        p = np.array([a for a, _ in t.slot_pairs])
        q = np.array([b for _, b in t.slot_pairs])
        mask = obs[:, p] & obs[:, q]
        return resid[:, p] * resid[:, q], mask, 0

    return _assemble_system(packed.spec, templates, items, packed.weights)


def empirical_cov_continuous(cohort: Cohort, beta: FixedEffects) -> MomentSystem:
    """Residual-covariance moment statistics for all-continuous cohorts."""
    if not cohort.spec.all_continuous:
        raise DomainError("empirical_cov_continuous requires continuous phenotypes")
    packed = pack_cohort(cohort)
    resid = np.where(packed.obs, packed.y - _fitted_means(packed, beta.flatten()), 0.0)
    return residual_moment_system(packed, resid)


def _fitted_means(packed: PackedCohort, beta_flat: np.ndarray) -> np.ndarray:
    return packed.design @ beta_flat


def latent_moment_system(
    packed: PackedCohort, beta_flat: np.ndarray, theta: VarianceComponents
) -> MomentSystem:
    """Moment statistics with latent slots replaced by conditional moments.

    Continuous-continuous entries use residual cross-products; binary-binary
    entries condition on the two indicators (quadrant moments of the
    pair-implied bivariate law); continuous-binary entries condition only on
    the binary indicator (half-plane moments).
    """
    spec = packed.spec
    kinds = spec.kinds
    mu = _fitted_means(packed, beta_flat)
    obs, y, w = packed.obs, packed.y, packed.weights
    sd = np.array([math.sqrt(theta.total_var(k)) for k in range(1, spec.K + 1)])
    templates = equation_templates(spec.K, packed.kinship)

    def items(t):
        p = np.array([a for a, _ in t.slot_pairs])
        q = np.array([b for _, b in t.slot_pairs])
        mask = obs[:, p] & obs[:, q]
        bin_k = kinds[t.k - 1] is PhenotypeKind.BINARY
        bin_m = kinds[t.m - 1] is PhenotypeKind.BINARY
        mu_p, mu_q = mu[:, p], mu[:, q]
        y_p, y_q = y[:, p], y[:, q]
        bad = 0
        if t.kind == "var":
            if not bin_k:
                item = (y_p - mu_p) ** 2
            else:
                ey, ey2, _ = uni_moments(mu_p, sd[t.k - 1], y_p)
                item = ey2 - 2.0 * ey * mu_p + mu_p * mu_p
        elif not bin_k and not bin_m:
            item = (y_p - mu_p) * (y_q - mu_q)
        else:
            c = t.c if t.kind == "kin" else None
            cov = pair_covariance(theta, t.k, t.m, c)
            r = cov / (sd[t.k - 1] * sd[t.m - 1])
            r = min(max(r, -1.0), 1.0)
            if bin_k and bin_m:
                e1, e2, e12, _ = quadrant_moments(
                    mu_p, mu_q, sd[t.k - 1], sd[t.m - 1], r, y_p, y_q
                )
                item = e12 - e1 * mu_q - e2 * mu_p + mu_p * mu_q
            else:
                # one observed continuous value, one latent slot: average the
                # residual product with the latent conditional mean given the
                # observed value and the indicator
                if bin_m:  # k continuous observed, m binary latent
                    yc, mu_c, s_c = y_p, mu_p, sd[t.k - 1]
                    z, mu_b, s_b = y_q, mu_q, sd[t.m - 1]
                else:
                    yc, mu_c, s_c = y_q, mu_q, sd[t.m - 1]
                    z, mu_b, s_b = y_p, mu_p, sd[t.k - 1]
                cond_mean = mu_b + r * s_b / s_c * (yc - mu_c)
                cond_sd = s_b * math.sqrt(max(1.0 - r * r, 1e-12))
                ey_b, _, _ = uni_moments(cond_mean, cond_sd, z)
                item = (yc - mu_c) * (ey_b - mu_b)
        finite = np.isfinite(item)
        bad = int((mask & ~finite).sum())
        return np.where(finite, item, 0.0), mask & finite, bad

    return _assemble_system(spec, templates, items, w)


def latent_cov_binary(
    cohort: Cohort, beta: FixedEffects, theta: VarianceComponents
) -> MomentSystem:
    if not cohort.spec.all_binary:
        raise DomainError("latent_cov_binary requires all-binary phenotypes")
    return latent_moment_system(pack_cohort(cohort), beta.flatten(), theta)


def latent_cov_mixed(
    cohort: Cohort, beta: FixedEffects, theta: VarianceComponents
) -> MomentSystem:
    spec = cohort.spec
    if spec.all_binary or spec.all_continuous:
        raise DomainError("latent_cov_mixed requires mixed phenotype kinds")
    return latent_moment_system(pack_cohort(cohort), beta.flatten(), theta)


# ---------------------------------------------------------------------------
# Variance-component solver
# ---------------------------------------------------------------------------

@dataclass
class _ThetaParam:
    """Index map of the reparameterized vector (sigma_bk, sigma_k, free eps, rho)."""

    K: int
    pinned_eps: tuple[bool, ...]

    def __post_init__(self):
        K = self.K
        self.i_sb = list(range(K))
        self.i_s = list(range(K, 2 * K))
        self.i_eps = {}
        pos = 2 * K
        for k in range(K):
            if not self.pinned_eps[k]:
                self.i_eps[k] = pos
                pos += 1
        self.i_rho = {}
        for k in range(K):
            for m in range(k + 1, K):
                self.i_rho[(k, m)] = pos
                pos += 1
        self.dim = pos

    def unpack(self, x):
        sb = x[self.i_sb]
        s = x[self.i_s]
        eps = np.array(
            [x[self.i_eps[k]] if k in self.i_eps else 1.0 for k in range(self.K)]
        )
        rho = np.eye(self.K)
        for (k, m), i in self.i_rho.items():
            rho[k, m] = rho[m, k] = x[i]
        return sb, s, eps, rho

    def bounds(self, var_caps=None):
        """Box bounds; ``var_caps`` are per-phenotype total-variance upper
        limits implied by the variance equations (no component's loading can
        exceed its phenotype's total standard deviation)."""
        lo = np.full(self.dim, -np.inf)
        hi = np.full(self.dim, np.inf)
        caps = (
            np.sqrt(np.maximum(np.asarray(var_caps, dtype=float), 1e-12)) * 1.3
            if var_caps is not None
            else np.full(self.K, np.inf)
        )
        lo[self.i_sb[0]] = 0.0  # sigma_b1 = sigma_b >= 0 pins the sign
        for k, i in enumerate(self.i_sb):
            hi[i] = caps[k]
            if k > 0:
                lo[i] = -caps[k]
        for k, i in enumerate(self.i_s):
            lo[i], hi[i] = 0.0, caps[k]
        for k, i in self.i_eps.items():
            lo[i], hi[i] = 0.0, caps[k]
        for i in self.i_rho.values():
            lo[i], hi[i] = -1.0, 1.0
        return lo, hi


def _gamma_from_loadings(sb: np.ndarray, scale: float) -> tuple[np.ndarray, float, list]:
    """Map shared-environment loadings (gamma_k sigma_b) to (gamma, sigma_b).

    gamma_1 = 1 forces sigma_b = sb_1; when sb_1 sits at (or near) its zero
    bound while other loadings are nonzero, the ratio is unidentified -- the
    products gamma_k * sigma_b are preserved exactly via a floored sigma_b
    and the result is flagged.
    """
    sb = np.asarray(sb, dtype=float)
    K = sb.size
    if K == 1:
        return np.ones(1), abs(float(sb[0])), []
    if np.max(np.abs(sb)) < 1e-7 * scale:
        # shared component absent: the loading ratios are meaningless
        return np.ones(K), abs(float(sb[0])), ["gamma_unidentified"]
    if sb[0] < 1e-7 * scale:
        sigma_b = max(float(sb[0]), 1e-12)
        gamma = np.concatenate([[1.0], sb[1:] / sigma_b])
        return gamma, sigma_b, ["gamma_unidentified"]
    return np.concatenate([[1.0], sb[1:] / sb[0]]), float(sb[0]), []


def _model_moments(x, param: _ThetaParam, eqs: list[MomentEquation]) -> np.ndarray:
    sb, s, eps, rho = param.unpack(x)
    out = np.empty(len(eqs))
    for i, eq in enumerate(eqs):
        t = eq.template
        k, m = t.k - 1, t.m - 1
        gen = s[k] ** 2 if k == m else rho[k, m] * s[k] * s[m]
        if t.kind == "var":
            out[i] = sb[k] ** 2 + s[k] ** 2 + eps[k] ** 2
        elif t.kind == "same":
            out[i] = sb[k] * sb[m] + gen
        else:
            out[i] = sb[k] * sb[m] + t.c * gen
    return out


def _model_moment_jac(x, param: _ThetaParam, eqs: list[MomentEquation]) -> np.ndarray:
    sb, s, eps, rho = param.unpack(x)
    J = np.zeros((len(eqs), param.dim))
    for i, eq in enumerate(eqs):
        t = eq.template
        k, m = t.k - 1, t.m - 1
        mult = 1.0 if t.kind != "kin" else t.c
        if k == m:
            J[i, param.i_sb[k]] = 2.0 * sb[k]
            J[i, param.i_s[k]] = 2.0 * mult * s[k]
            if t.kind == "var" and k in param.i_eps:
                J[i, param.i_eps[k]] = 2.0 * eps[k]
        else:
            J[i, param.i_sb[k]] = sb[m]
            J[i, param.i_sb[m]] = sb[k]
            J[i, param.i_s[k]] = mult * rho[k, m] * s[m]
            J[i, param.i_s[m]] = mult * rho[k, m] * s[k]
            J[i, param.i_rho[(k, m)]] = mult * s[k] * s[m]
    return J


def _reparam_from_theta(theta: VarianceComponents, param: _ThetaParam) -> np.ndarray:
    x = np.zeros(param.dim)
    x[param.i_sb] = theta.sigma_bk()
    x[param.i_s] = theta.sigma_g
    for k, i in param.i_eps.items():
        x[i] = theta.sigma_eps[k]
    for (k, m), i in param.i_rho.items():
        x[i] = theta.rho[k, m]
    return x


def _seed_from_moments(system: MomentSystem, param: _ThetaParam) -> np.ndarray:
    K = param.K
    stats = system.by_key()

    def get(kind, k, m, c=None, default=None):
        return stats.get((kind, k, m, c), default)

    var = np.array([get("var", k, k, None, 1.0) for k in range(1, K + 1)])
    var = np.maximum(var, 1e-8)
    sb = np.empty(K)
    for k in range(K):
        a0 = get("kin", k + 1, k + 1, 0.0)
        sb[k] = math.sqrt(max(a0, 0.0)) if a0 is not None else 0.3 * math.sqrt(var[k])
    for k in range(1, K):
        cross0 = get("kin", 1, k + 1, 0.0)
        if cross0 is not None and cross0 < 0.0:
            sb[k] = -sb[k]
    s = np.empty(K)
    for k in range(K):
        ahalf = get("kin", k + 1, k + 1, 0.5)
        if ahalf is not None:
            s[k] = math.sqrt(max(2.0 * (ahalf - sb[k] ** 2), 1e-4 * var[k]))
        else:
            s[k] = math.sqrt(0.5 * var[k])
    x = np.zeros(param.dim)
    x[param.i_sb] = sb
    x[param.i_s] = s
    for k, i in param.i_eps.items():
        x[i] = math.sqrt(max(var[k] - sb[k] ** 2 - s[k] ** 2, 1e-4 * var[k]))
    for (k, m), i in param.i_rho.items():
        same = get("same", k + 1, m + 1)
        if same is not None and s[k] > 1e-8 and s[m] > 1e-8:
            x[i] = min(max((same - sb[k] * sb[m]) / (s[k] * s[m]), -0.95), 0.95)
    return x


def solve_theta(
    system: MomentSystem,
    spec: ModelSpec,
    *,
    pin_binary_eps: bool = True,
    n_restarts: int = 5,
    tol: float = 1e-12,
    warm_start: Optional[VarianceComponents] = None,
) -> VarianceComponents:
    """Recover variance components by weighted nonlinear least squares.

    Works in the (sigma_b1..sigma_bK) reparameterization of the shared
    component, then maps back via sigma_b = sigma_b1 and
    gamma_k = sigma_bk / sigma_b1.  For binary phenotypes the latent error
    scale sigma_eps is pinned to 1 (unless ``pin_binary_eps`` is off).
    """
    K = spec.K
    pinned = tuple(
        pin_binary_eps and kind is PhenotypeKind.BINARY for kind in spec.kinds
    )
    param = _ThetaParam(K, pinned)
    eqs = system.equations
    if len(eqs) < param.dim:
        raise DomainError(
            f"{len(eqs)} moment equations cannot identify {param.dim} parameters"
        )
    sqw = np.sqrt(np.array([e.weight for e in eqs]))
    a = np.array([e.value for e in eqs])

    def resid(x):
        return sqw * (_model_moments(x, param, eqs) - a)

    def jac(x):
        return sqw[:, None] * _model_moment_jac(x, param, eqs)

    stats = system.by_key()
    var_caps = [
        max(stats.get(("var", k, k, None), 1.0), 1e-8) for k in range(1, K + 1)
    ]
    lo, hi = param.bounds(var_caps)
    x_seed = np.clip(_seed_from_moments(system, param), lo, hi)
    starts = [x_seed]
    if warm_start is not None:
        starts.insert(0, np.clip(_reparam_from_theta(warm_start, param), lo, hi))
    rng = np.random.default_rng(0)
    while len(starts) < n_restarts:
        jitter = rng.uniform(0.5, 1.5, param.dim)
        starts.append(
            np.clip(x_seed * jitter + rng.normal(0, 0.05, param.dim), lo, hi)
        )
    best = None
    for x0 in starts:
        sol = least_squares(resid, x0, jac=jac, bounds=(lo, hi), method="trf",
                            xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=2000)
        if not np.all(np.isfinite(sol.x)):
            continue
        if best is None or sol.cost < best.cost:
            best = sol
        if best.cost < tol:
            break
    if best is None:
        raise ConvergenceError("moment solver produced no finite solution", best=None)

    sb, s, eps, rho = param.unpack(best.x)
    scale = math.sqrt(max(float(np.max(s**2 + sb**2 + eps**2)), 1e-12))
    gamma, sigma_b, flags = _gamma_from_loadings(sb, scale)
    for (k, m) in param.i_rho:
        if abs(rho[k, m]) > 1.0 - 1e-6:
            flags.append(f"rho{k + 1}{m + 1}_boundary")
    if K > 1:
        ev = np.linalg.eigvalsh(rho)
        if ev.min() < -1e-10:
            # project onto the PSD cone, keeping the unit diagonal
            w_, V_ = np.linalg.eigh(rho)
            rho = V_ @ np.diag(np.maximum(w_, 0.0)) @ V_.T
            d = np.sqrt(np.diag(rho))
            rho = rho / np.outer(d, d)
            flags.append("rho_projected")
    theta = VarianceComponents(
        gamma=gamma,
        sigma_g=np.abs(s),
        sigma_b=sigma_b,
        sigma_eps=np.abs(eps),
        rho=rho,
        flags=tuple(flags),
    )
    theta.validate()
    theta.objective_residual = float(2.0 * best.cost)  # sum w (m - a)^2
    return theta


# ---------------------------------------------------------------------------
# GEE for the mean coefficients
# ---------------------------------------------------------------------------

def _safe_inverse(V: np.ndarray) -> np.ndarray:
    cond = np.linalg.cond(V)
    if not np.isfinite(cond) or cond > RIDGE_CONDITION_LIMIT:
        ridge = 1e-8 * np.trace(V) / V.shape[0] + 1e-12
        V = V + ridge * np.eye(V.shape[0])
    return np.linalg.inv(V)


def gee_beta_packed(
    packed: PackedCohort, V: np.ndarray, responses: np.ndarray
) -> np.ndarray:
    Vi = _safe_inverse(V)
    X = packed.design
    Gw = np.matmul(X.transpose(0, 2, 1), Vi) * packed.weights[:, None, None]
    A = np.einsum("npq,nqr->pr", Gw, X)
    b = np.einsum("npq,nq->p", Gw, responses)
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > 1e14:
        _raise_rank_deficiency(A, packed.spec)
    beta = np.linalg.solve(A, b)
    if not np.all(np.isfinite(beta)):
        _raise_rank_deficiency(A, packed.spec)
    return beta


def _raise_rank_deficiency(A: np.ndarray, spec: ModelSpec):
    names = FixedEffects.names(spec)
    _, _, perm = scipy.linalg.qr(A, pivoting=True)
    rank = np.linalg.matrix_rank(A)
    collinear = [names[i] for i in perm[rank:]]
    raise RankDeficiencyError(
        f"normal equations are rank-deficient; collinear columns: {collinear}",
        columns=collinear,
    )


def gee_beta(cohort: Cohort, V: np.ndarray, responses=None) -> FixedEffects:
    """One weighted GLS step for the mean coefficients.

    ``responses`` defaults to the observed phenotype slots (zero-filled where
    unobserved); pass conditional expectations for latent phenotypes.
    """
    packed = pack_cohort(cohort)
    y = packed.y if responses is None else np.asarray(responses, dtype=float)
    flat = gee_beta_packed(packed, np.asarray(V, dtype=float), y)
    return FixedEffects.from_flat(flat, cohort.spec)


def _pairwise_residual_cov(packed: PackedCohort, resid: np.ndarray) -> np.ndarray:
    """Weighted pairwise-complete covariance on the template slots."""
    w = packed.weights
    Rw = resid * packed.obs
    num = (Rw * w[:, None]).T @ Rw
    den = (packed.obs * w[:, None]).T.astype(float) @ packed.obs.astype(float)
    V = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    # keep never-observed slots invertible
    d = np.diag(V).copy()
    d[d <= 0] = 1.0
    np.fill_diagonal(V, d)
    return V


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------

@dataclass
class EstimateResult:
    spec: ModelSpec
    beta: FixedEffects
    theta: VarianceComponents
    h2: np.ndarray
    h2_cross: np.ndarray
    iterations: int
    converged: bool
    objective_residual: float
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def assemble(cls, spec, beta, theta, iterations, converged, diagnostics):
        K = spec.K
        h2 = np.array([heritability(theta, k) for k in range(1, K + 1)])
        cross = np.diag(h2).astype(float)
        for k in range(1, K + 1):
            for m in range(1, K + 1):
                if k != m:
                    cross[k - 1, m - 1] = coheritability(theta, k, m)
        return cls(
            spec=spec,
            beta=beta,
            theta=theta,
            h2=h2,
            h2_cross=cross,
            iterations=iterations,
            converged=converged,
            objective_residual=float(getattr(theta, "objective_residual", math.nan)),
            diagnostics=diagnostics,
        )

    def params(self) -> dict[str, float]:
        """Flat parameter map: beta, theta, and derived quantities."""
        out = self.beta.to_dict(self.spec)
        out.update(self.theta.to_dict())
        sbk = self.theta.sigma_bk()
        for k in range(1, self.spec.K + 1):
            out[f"sigma_b{k}"] = float(sbk[k - 1])
            out[f"h2_{k}"] = float(self.h2[k - 1])
        for k in range(1, self.spec.K + 1):
            for m in range(k + 1, self.spec.K + 1):
                out[f"h2_{k}{m}"] = float(self.h2_cross[k - 1, m - 1])
        return out

    def to_json_dict(self) -> dict:
        return {
            "model": {
                "kinds": [k.value for k in self.spec.kinds],
                "covariate_dims": list(self.spec.covariate_dims),
            },
            "beta": self.beta.to_dict(self.spec),
            "theta": self.theta.to_dict(),
            "derived": {
                k: v
                for k, v in self.params().items()
                if k.startswith(("sigma_b", "h2_")) and k != "sigma_b"
            },
            "diagnostics": {
                "iterations": self.iterations,
                "converged": self.converged,
                "objective_residual": self.objective_residual,
                **{
                    k: v
                    for k, v in self.diagnostics.items()
                    if k in ("dropped_equations", "dropped_pairs", "flags",
                             "objective_trace")
                },
            },
        }


# ---------------------------------------------------------------------------
# Fitting: continuous phenotypes
# ---------------------------------------------------------------------------

def _rel_change(new: np.ndarray, old: np.ndarray) -> float:
    return float(np.max(np.abs(new - old)) / max(1.0, float(np.max(np.abs(old)))))


def fit_continuous(
    cohort: Cohort, *, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER
) -> EstimateResult:
    """GEE/moment estimation for all-continuous cohorts.

    Initializes the working covariance from mean deviations, alternates the
    GEE coefficient update with the residual covariance until the
    coefficients converge, solves the kinship-class moment system for the
    variance components, and refits the coefficients once against the
    model-implied covariance.
    """
    if not cohort.spec.all_continuous:
        raise DomainError("fit_continuous requires all-continuous phenotypes")
    return _fit_continuous_packed(pack_cohort(cohort), tol=tol, max_iter=max_iter)


def _fit_continuous_packed(
    packed: PackedCohort, *, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER
) -> EstimateResult:
    w = packed.weights
    ybar = (packed.y * packed.obs * w[:, None]).sum(axis=0) / np.maximum(
        (packed.obs * w[:, None]).sum(axis=0), 1e-300
    )
    V = _pairwise_residual_cov(packed, np.where(packed.obs, packed.y - ybar, 0.0))

    beta_flat = None
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        beta_new = gee_beta_packed(packed, V, packed.y)
        resid = np.where(packed.obs, packed.y - _fitted_means(packed, beta_new), 0.0)
        V = _pairwise_residual_cov(packed, resid)
        if beta_flat is not None and _rel_change(beta_new, beta_flat) <= tol:
            beta_flat = beta_new
            converged = True
            break
        beta_flat = beta_new
    if not converged:
        raise ConvergenceError(
            f"GEE loop did not converge in {max_iter} iterations", best=beta_flat
        )

    system = residual_moment_system(packed, resid)
    theta = solve_theta(system, packed.spec)
    V_model = build_covariance(theta, packed.kinship)
    beta_flat = gee_beta_packed(packed, V_model, packed.y)
    beta = FixedEffects.from_flat(beta_flat, packed.spec)
    diag = {
        "dropped_equations": system.dropped,
        "dropped_pairs": system.n_excluded_pairs,
        "flags": list(theta.flags),
        "objective_trace": [float(getattr(theta, "objective_residual", math.nan))],
    }
    return EstimateResult.assemble(packed.spec, beta, theta, iterations, True, diag)


# ---------------------------------------------------------------------------
# Fitting: binary and mixed phenotypes
# ---------------------------------------------------------------------------

def _probit_data_from_packed(packed: PackedCohort, k: int):
    """Pooled (design-with-intercept, indicator) rows for phenotype k."""
    spec = packed.spec
    cols = slice((k - 1) * N_SLOTS, k * N_SLOTS)
    obs = packed.obs[:, cols]
    offsets = np.concatenate([[0], np.cumsum([1 + p for p in spec.covariate_dims])])
    off = offsets[k - 1]
    block = packed.design[:, cols, off : off + 1 + spec.covariate_dims[k - 1]]
    X = block[obs]
    z = packed.y[:, cols][obs]
    return X, z


def _probit_mle(X: np.ndarray, z: np.ndarray, names, max_iter=100, tol=1e-10):
    n, p = X.shape
    beta = np.zeros(p)
    beta[0] = float(np.clip(ndtri(np.clip(z.mean(), 1e-6, 1 - 1e-6)), -5, 5))

    def loglik(b):
        eta = X @ b
        return float(np.sum(np.where(z > 0.5, log_ndtr(eta), log_ndtr(-eta))))

    ll = loglik(beta)
    for _ in range(max_iter):
        eta = X @ beta
        P = np.clip(ndtr(eta), 1e-12, 1 - 1e-12)
        f = np.exp(-0.5 * eta**2) / math.sqrt(2 * math.pi)
        W = f * f / (P * (1 - P))
        score = X.T @ (f * (z - P) / (P * (1 - P)))
        H = (X * W[:, None]).T @ X
        try:
            step = np.linalg.solve(H, score)
        except np.linalg.LinAlgError:
            raise RankDeficiencyError("singular information matrix in probit fit")
        # damped Newton: halve until the log-likelihood improves
        lam = 1.0
        for _ in range(30):
            cand = beta + lam * step
            ll_new = loglik(cand)
            if ll_new >= ll - 1e-12:
                break
            lam *= 0.5
        beta = beta + lam * step
        moved = float(np.max(np.abs(lam * step)))
        if np.max(np.abs(beta)) > 40.0:
            worst = int(np.argmax(np.abs(beta)))
            raise SeparationError(
                f"probit diverging; separating covariate {names[worst]}",
                column=names[worst],
            )
        if abs(ll_new - ll) < tol * (1 + abs(ll)) and moved < 1e-8:
            break
        ll = ll_new
    return beta


def init_probit(cohort: Cohort, k: int) -> tuple[float, np.ndarray]:
    """Probit coefficients for phenotype ``k`` (1-based), members pooled iid."""
    if not cohort.spec.is_binary(k):
        raise DomainError(f"phenotype {k} is not binary")
    return _init_probit_packed(pack_cohort(cohort), k)


def _init_probit_packed(packed: PackedCohort, k: int) -> tuple[float, np.ndarray]:
    X, z = _probit_data_from_packed(packed, k)
    names = ["intercept"] + [f"x{j + 1}" for j in range(X.shape[1] - 1)]
    coef = _probit_mle(X, z, names)
    return float(coef[0]), coef[1:]


def _ols_beta(packed: PackedCohort) -> np.ndarray:
    return gee_beta_packed(packed, np.eye(packed.n_slots), packed.y)


class _BetaInitializer:
    """Initial mean coefficients for latent fits.

    The probit fit identifies binary-phenotype coefficients only up to the
    latent scale (it lands on the unit-total-variance convention), while the
    moment solver pins sigma_eps = 1.  ``scaled_to`` multiplies each binary
    phenotype's probit coefficients by the total latent standard deviation
    implied by a given theta, so the fixed-beta stage stays on one scale.
    """

    def __init__(self, packed: PackedCohort):
        spec = packed.spec
        self.spec = spec
        base = FixedEffects.from_flat(_ols_beta(packed), spec)
        self.intercepts = base.intercepts.copy()
        self.slopes = list(base.slopes)
        for k in range(1, spec.K + 1):
            if spec.is_binary(k):
                a, b = _init_probit_packed(packed, k)
                self.intercepts[k - 1] = a
                self.slopes[k - 1] = b

    def scaled_to(self, theta: VarianceComponents) -> np.ndarray:
        intercepts = self.intercepts.copy()
        slopes = [s.copy() for s in self.slopes]
        for k in range(1, self.spec.K + 1):
            if self.spec.is_binary(k):
                c = math.sqrt(theta.total_var(k))
                intercepts[k - 1] *= c
                slopes[k - 1] *= c
        return FixedEffects(intercepts, tuple(slopes)).flatten()

    def unit_scale(self) -> np.ndarray:
        return FixedEffects(self.intercepts.copy(), tuple(self.slopes)).flatten()


def _init_theta(packed: PackedCohort, beta_flat: np.ndarray, spec: ModelSpec) -> VarianceComponents:
    """Moment solve treating indicators as outcomes (linear-probability
    residuals), normalized to unit total variance per binary phenotype so it
    starts on the scale the fixed probit coefficients imply."""
    resid = np.where(packed.obs, packed.y - _fitted_means(packed, beta_flat), 0.0)
    system = residual_moment_system(packed, resid)
    raw = solve_theta(system, spec, pin_binary_eps=False)
    scale = np.array(
        [
            1.0 / math.sqrt(max(raw.total_var(k), 1e-4)) if spec.is_binary(k) else 1.0
            for k in range(1, spec.K + 1)
        ]
    )
    sbk = raw.sigma_bk() * scale
    sigma_g = raw.sigma_g * scale
    sigma_eps = raw.sigma_eps * scale
    ref = math.sqrt(max(float(np.max(sbk**2 + sigma_g**2 + sigma_eps**2)), 1e-12))
    gamma, sigma_b, _ = _gamma_from_loadings(sbk, ref)
    theta = VarianceComponents(
        gamma=gamma, sigma_g=sigma_g, sigma_b=sigma_b, sigma_eps=sigma_eps, rho=raw.rho
    )
    theta.validate()
    return theta


def _pseudo_responses(
    packed: PackedCohort, beta_flat: np.ndarray, theta: VarianceComponents
) -> tuple[np.ndarray, int]:
    """Observed values for continuous slots, E[Y|X,Z] for binary slots."""
    spec = packed.spec
    mu = _fitted_means(packed, beta_flat)
    out = packed.y.copy()
    n_underflow = 0
    for k in range(1, spec.K + 1):
        if not spec.is_binary(k):
            continue
        cols = slice((k - 1) * N_SLOTS, k * N_SLOTS)
        sdk = math.sqrt(theta.total_var(k))
        ey, _, _ = uni_moments(mu[:, cols], sdk, packed.y[:, cols])
        bad = packed.obs[:, cols] & ~np.isfinite(ey)
        n_underflow += int(bad.sum())
        vals = np.where(np.isfinite(ey), ey, mu[:, cols])
        out[:, cols] = np.where(packed.obs[:, cols], vals, 0.0)
    return out, n_underflow


def _theta_vec(theta: VarianceComponents) -> np.ndarray:
    """Iteration state on the stable scale: shared-environment loadings
    (gamma_k sigma_b) instead of the near-unidentified (gamma, sigma_b) pair."""
    K = theta.K
    rho_off = [theta.rho[k, m] for k in range(K) for m in range(k + 1, K)]
    return np.concatenate(
        [theta.sigma_bk(), theta.sigma_g, theta.sigma_eps, rho_off]
    )


def _theta_from_vec(
    vec: np.ndarray, spec: ModelSpec, pin_eps: bool = True
) -> VarianceComponents:
    K = spec.K
    sbk = np.asarray(vec[:K], dtype=float)
    if sbk[0] < 0:
        sbk = -sbk
    sigma_g = np.abs(vec[K : 2 * K])
    sigma_eps = np.abs(vec[2 * K : 3 * K]).copy()
    if pin_eps:
        for k in range(1, K + 1):
            if spec.is_binary(k):
                sigma_eps[k - 1] = 1.0
    rho = np.eye(K)
    pos = 3 * K
    for k in range(K):
        for m in range(k + 1, K):
            rho[k, m] = rho[m, k] = min(max(float(vec[pos]), -1.0), 1.0)
            pos += 1
    scale = math.sqrt(max(float(np.max(sbk**2 + sigma_g**2 + sigma_eps**2)), 1e-12))
    gamma, sigma_b, flags = _gamma_from_loadings(sbk, scale)
    theta = VarianceComponents(
        gamma=gamma, sigma_g=sigma_g, sigma_b=sigma_b, sigma_eps=sigma_eps,
        rho=rho, flags=tuple(flags),
    )
    theta.validate()
    return theta


class _AndersonAccel:
    """Anderson mixing for a fixed-point iteration x -> F(x).

    Proposes the next iterate from the least-squares combination of recent
    Picard residuals; falls back to the plain update while history is short
    or the extrapolation looks unstable.  Handles several slow linear modes
    at once, which the scalar geometric extrapolation cannot.
    """

    def __init__(self, window: int = 4):
        self.window = window
        self.X: list[np.ndarray] = []
        self.F: list[np.ndarray] = []

    def reset(self) -> None:
        self.X.clear()
        self.F.clear()

    def next_iterate(self, x: np.ndarray, fx: np.ndarray) -> np.ndarray:
        self.X.append(np.asarray(x, dtype=float))
        self.F.append(np.asarray(fx, dtype=float))
        del self.X[: -(self.window + 1)]
        del self.F[: -(self.window + 1)]
        k = len(self.X)
        if k < 3:
            return fx
        R = [f - xi for f, xi in zip(self.F, self.X)]
        dR = np.stack([R[i + 1] - R[i] for i in range(k - 1)], axis=1)
        dF = np.stack([self.F[i + 1] - self.F[i] for i in range(k - 1)], axis=1)
        gamma, *_ = np.linalg.lstsq(dR, R[-1], rcond=1e-10)
        if not np.all(np.isfinite(gamma)) or float(np.linalg.norm(gamma)) > 100.0:
            return fx
        return self.F[-1] - dF @ gamma


class _GeomAccel:
    """Extrapolate a linearly-converging fixed-point iterate sequence.

    Once the last three steps are nearly parallel with a stable contraction
    ratio r, the remaining geometric tail sums to step * r / (1 - r).
    """

    def __init__(self):
        self.hist: list[np.ndarray] = []

    def push(self, x: np.ndarray) -> None:
        self.hist.append(np.asarray(x, dtype=float))
        del self.hist[:-4]

    def reset(self) -> None:
        self.hist.clear()

    def extrapolate(self):
        if len(self.hist) < 4:
            return None
        x0, x1, x2, x3 = self.hist
        steps = [x1 - x0, x2 - x1, x3 - x2]
        norms = [float(np.linalg.norm(d)) for d in steps]
        scale = max(1.0, float(np.max(np.abs(x3))))
        if min(norms) < 1e-14 or norms[2] > 1e-2 * scale:
            return None
        r_a, r_b = norms[1] / norms[0], norms[2] / norms[1]
        for da, db, na, nb in ((steps[0], steps[1], norms[0], norms[1]),
                               (steps[1], steps[2], norms[1], norms[2])):
            if float(da @ db) / (na * nb) < 0.95:
                return None
        if not (0.2 < r_b < 0.999 and abs(r_a - r_b) < 0.05):
            return None
        # a long jump needs strong evidence that the contraction is stable;
        # otherwise cover the tail with repeated short jumps
        cap = 100.0 if abs(r_a - r_b) < 0.02 else 25.0
        return x3 + steps[2] * min(r_b / (1.0 - r_b), cap)


def _rescale_to_latent(
    spec: ModelSpec, theta: VarianceComponents
) -> VarianceComponents:
    """Map theta onto the pinned sigma_eps = 1 scale for binary phenotypes."""
    scale = np.array(
        [
            1.0 / max(float(theta.sigma_eps[k - 1]), 0.05) if spec.is_binary(k) else 1.0
            for k in range(1, spec.K + 1)
        ]
    )
    sbk = theta.sigma_bk() * scale
    sigma_g = theta.sigma_g * scale
    sigma_eps = np.where(
        [spec.is_binary(k) for k in range(1, spec.K + 1)], 1.0, theta.sigma_eps
    )
    ref = math.sqrt(max(float(np.max(sbk**2 + sigma_g**2 + sigma_eps**2)), 1e-12))
    gamma, sigma_b, flags = _gamma_from_loadings(sbk, ref)
    out = VarianceComponents(
        gamma=gamma,
        sigma_g=sigma_g,
        sigma_b=sigma_b,
        sigma_eps=sigma_eps,
        rho=theta.rho,
        flags=tuple(set(theta.flags) | set(flags)),
    )
    out.validate()
    if hasattr(theta, "objective_residual"):
        out.objective_residual = theta.objective_residual
    return out


def _fit_latent(
    cohort: Cohort, *, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER
) -> EstimateResult:
    return _fit_latent_packed(pack_cohort(cohort), tol=tol, max_iter=max_iter)


def _fit_latent_packed(
    packed: PackedCohort, *, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER
) -> EstimateResult:
    spec = packed.spec
    init = _BetaInitializer(packed)
    beta_flat = init.unit_scale()
    theta = _init_theta(packed, beta_flat, spec)

    dropped_pairs = 0
    trace: list[float] = []
    iterations = 0
    n_accel = 0
    converged_theta = False
    accel = _GeomAccel()
    accel.push(_theta_vec(theta))
    # stage 1: beta held fixed at the probit/OLS initializer while theta
    # iterates to convergence.  The error scale stays free here: the fixed
    # beta pins the latent scale of each binary phenotype, and pinning
    # sigma_eps at the same time would fight that anchor.  This stage only
    # warms up stage 2, which owns the final tolerance.
    theta_budget = max_iter // 2
    inner_tol = max(tol, 1e-3)
    for _ in range(theta_budget):
        iterations += 1
        system = latent_moment_system(packed, beta_flat, theta)
        dropped_pairs = system.n_excluded_pairs
        theta_new = solve_theta(
            system, spec, pin_binary_eps=False, warm_start=theta, n_restarts=1
        )
        trace.append(float(getattr(theta_new, "objective_residual", math.nan)))
        delta = _rel_change(_theta_vec(theta_new), _theta_vec(theta))
        theta = theta_new
        accel.push(_theta_vec(theta))
        if delta <= inner_tol:
            converged_theta = True
            break
        rho_interior = np.max(np.abs(theta.rho - np.eye(spec.K))) < 0.98
        jump = accel.extrapolate() if rho_interior else None
        if jump is not None:
            theta = _theta_from_vec(jump, spec, pin_eps=False)
            accel.reset()
            accel.push(_theta_vec(theta))
            n_accel += 1
    # move to the reporting scale (sigma_eps = 1 for binary phenotypes)
    theta = _rescale_to_latent(spec, theta)
    beta_flat = init.scaled_to(theta)

    # stage 2: joint updates until both beta and theta converge.  The theta
    # solve runs with a free error scale and is rescaled exactly onto the
    # sigma_eps = 1 convention: the latent moment map is scale-equivariant,
    # so the rescale enforces the identification constraint in one step
    # rather than letting the near-unidentified scale direction creep.
    converged = False
    last_system = None
    n_theta = _theta_vec(theta).size
    anderson = _AndersonAccel()
    while iterations < max_iter:
        iterations += 1
        x_cur = np.concatenate([_theta_vec(theta), beta_flat])
        system = latent_moment_system(packed, beta_flat, theta)
        last_system = system
        dropped_pairs = system.n_excluded_pairs
        theta_new = _rescale_to_latent(
            spec,
            solve_theta(
                system, spec, pin_binary_eps=False, warm_start=theta, n_restarts=1
            ),
        )
        trace.append(float(getattr(theta_new, "objective_residual", math.nan)))
        responses, _ = _pseudo_responses(packed, beta_flat, theta_new)
        V_model = build_covariance(theta_new, packed.kinship)
        beta_new = gee_beta_packed(packed, V_model, responses)
        d_theta = _rel_change(_theta_vec(theta_new), _theta_vec(theta))
        d_beta = _rel_change(beta_new, beta_flat)
        fx = np.concatenate([_theta_vec(theta_new), beta_new])
        if d_theta <= tol and d_beta <= tol:
            theta, beta_flat = theta_new, beta_new
            converged = True
            break
        # theta and beta creep jointly, so the mixing state carries both;
        # extrapolation is invalid once a correlation pins to its boundary
        if np.max(np.abs(theta_new.rho - np.eye(spec.K))) < 0.98:
            proposal = anderson.next_iterate(x_cur, fx)
        else:
            anderson.reset()
            proposal = fx
        if proposal is not fx:
            n_accel += 1
        theta = _theta_from_vec(proposal[:n_theta], spec)
        beta_flat = proposal[n_theta:]
    if not converged:
        raise ConvergenceError(
            f"latent fit did not converge in {max_iter} iterations "
            f"(theta stage converged: {converged_theta})",
            trace=trace,
        )

    beta = FixedEffects.from_flat(beta_flat, spec)
    diag = {
        "dropped_equations": last_system.dropped if last_system else [],
        "dropped_pairs": dropped_pairs,
        "flags": list(theta.flags),
        "objective_trace": trace[-5:],
        "n_accelerations": n_accel,
    }
    return EstimateResult.assemble(spec, beta, theta, iterations, True, diag)


def fit_binary(cohort: Cohort, *, tol: float = DEFAULT_TOL,
               max_iter: int = DEFAULT_MAX_ITER) -> EstimateResult:
    """Liability-scale estimation for all-binary cohorts."""
    if not cohort.spec.all_binary:
        raise DomainError("fit_binary requires all-binary phenotypes")
    return _fit_latent(cohort, tol=tol, max_iter=max_iter)


def fit_mixed(cohort: Cohort, *, tol: float = DEFAULT_TOL,
              max_iter: int = DEFAULT_MAX_ITER) -> EstimateResult:
    """Estimation for cohorts mixing continuous and binary phenotypes."""
    spec = cohort.spec
    if spec.all_continuous or spec.all_binary:
        raise DomainError("fit_mixed requires mixed phenotype kinds")
    return _fit_latent(cohort, tol=tol, max_iter=max_iter)


def fit(cohort: Cohort, **kw) -> EstimateResult:
    """Dispatch on the cohort's phenotype kinds."""
    if cohort.spec.all_continuous:
        return fit_continuous(cohort, **kw)
    if cohort.spec.all_binary:
        return fit_binary(cohort, **kw)
    return fit_mixed(cohort, **kw)


def fit_packed(packed: PackedCohort, **kw) -> EstimateResult:
    """Packed-cohort fit dispatch (used by the bootstrap to avoid repacking)."""
    if packed.spec.all_continuous:
        return _fit_continuous_packed(packed, **kw)
    return _fit_latent_packed(packed, **kw)
