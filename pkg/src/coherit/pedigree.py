"""Family data model, kinship construction, and pedigree perturbation.

Families are nuclear: up to two parents and two children in the canonical
order Parent1, Parent2, Child1, Child2, so covariance blocks are
position-stable across families.  The declared kinship is always derived
from the member roles; sensitivity experiments attach a *generative*
kinship override (and cross-family sibling links) that only the simulator
sees -- estimators stay blind to it.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Iterable, Optional, Sequence

import numpy as np

from .errors import DomainError, PedigreeError

if TYPE_CHECKING:  # pragma: no cover
    from .model import ModelSpec


class MemberRole(enum.Enum):
    PARENT1 = "Parent1"
    PARENT2 = "Parent2"
    CHILD1 = "Child1"
    CHILD2 = "Child2"


ROLE_ORDER = (
    MemberRole.PARENT1,
    MemberRole.PARENT2,
    MemberRole.CHILD1,
    MemberRole.CHILD2,
)
ROLE_INDEX = {role: i for i, role in enumerate(ROLE_ORDER)}
PARENT_ROLES = frozenset({MemberRole.PARENT1, MemberRole.PARENT2})
CHILD_ROLES = frozenset({MemberRole.CHILD1, MemberRole.CHILD2})
N_SLOTS = len(ROLE_ORDER)


@dataclass(frozen=True)
class KinshipMatrix:
    """Symmetric kinship-coefficient matrix with unit diagonal."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1] or v.shape[0] == 0:
            raise PedigreeError("kinship matrix must be square and non-empty")
        if not np.allclose(v, v.T):
            raise PedigreeError("kinship matrix must be symmetric")
        if not np.allclose(np.diag(v), 1.0):
            raise PedigreeError("kinship diagonal must be 1")
        if np.any(v < -1e-12) or np.any(v > 1.0 + 1e-12):
            raise PedigreeError("kinship coefficients must lie in [0, 1]")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]


def kinship_coefficient(a: MemberRole, b: MemberRole) -> float:
    if a == b:
        return 1.0
    if a in PARENT_ROLES and b in PARENT_ROLES:
        return 0.0
    # parent-child and full siblings both carry 1/2
    return 0.5


def build_kinship(roles: Sequence[MemberRole]) -> KinshipMatrix:
    """Declared kinship for a nuclear-family member list.

    Parent-parent pairs get 0, parent-child and sibling pairs get 1/2.
    """
    roles = list(roles)
    if not roles:
        raise PedigreeError("empty role list")
    if len(set(roles)) != len(roles):
        raise PedigreeError(f"duplicate roles in {[r.value for r in roles]}")
    n = len(roles)
    out = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = kinship_coefficient(roles[i], roles[j])
    return KinshipMatrix(out)


@dataclass(frozen=True)
class KinshipClasses:
    """Partition of off-diagonal pairs by kinship value.

    ``classes`` maps each coefficient to the tuple of unordered (j, s)
    index pairs (j < s) carrying it.
    """

    classes: dict[float, tuple[tuple[int, int], ...]]

    @property
    def counts(self) -> dict[float, int]:
        return {c: len(pairs) for c, pairs in self.classes.items()}


def kinship_classes(kinship: KinshipMatrix) -> KinshipClasses:
    """Group off-diagonal member pairs by kinship coefficient."""
    v = kinship.values
    grouped: dict[float, list[tuple[int, int]]] = {}
    for j in range(kinship.n):
        for s in range(j + 1, kinship.n):
            grouped.setdefault(float(v[j, s]), []).append((j, s))
    return KinshipClasses({c: tuple(p) for c, p in sorted(grouped.items(), reverse=True)})


NUCLEAR_KINSHIP = build_kinship(ROLE_ORDER)


@dataclass(frozen=True)
class CrossLink:
    """Sibling tie between one member of family ``a`` and one of family ``b``.

    Used only by the data generator: the two linked members share kinship
    1/2, their respective children 1/4 across households, children-children
    1/8, and everyone else 0.
    """

    family_a: int
    family_b: int
    role_a: MemberRole
    role_b: MemberRole


@dataclass(frozen=True)
class FamilyRecord:
    """One family: present members with covariates and (optional) phenotypes.

    ``covariates`` holds one (n_members, p_k) array per phenotype;
    ``phenotypes`` is (n_members, K) with NaN marking a missing value.
    ``gen_kinship`` optionally overrides the declared kinship at data
    generation (reporting-error experiments); estimators never read it.
    """

    family_id: str
    roles: tuple[MemberRole, ...]
    covariates: tuple[np.ndarray, ...]
    phenotypes: np.ndarray
    weight: float = 1.0
    gen_kinship: Optional[np.ndarray] = None

    def __post_init__(self):
        if not 1 <= len(self.roles) <= N_SLOTS:
            raise PedigreeError(
                f"family {self.family_id}: needs 1..4 present members, got {len(self.roles)}"
            )
        if len(set(self.roles)) != len(self.roles):
            raise PedigreeError(f"family {self.family_id}: duplicate roles")
        if not (self.weight > 0 and math.isfinite(self.weight)):
            raise PedigreeError(f"family {self.family_id}: weight must be positive")
        n = len(self.roles)
        phen = np.asarray(self.phenotypes, dtype=float)
        if phen.ndim != 2 or phen.shape[0] != n:
            raise PedigreeError(
                f"family {self.family_id}: phenotypes must be (n_members, K)"
            )
        object.__setattr__(self, "phenotypes", phen)
        covs = tuple(np.asarray(x, dtype=float) for x in self.covariates)
        if len(covs) != phen.shape[1]:
            raise PedigreeError(
                f"family {self.family_id}: one covariate block per phenotype required"
            )
        for x in covs:
            if x.ndim != 2 or x.shape[0] != n:
                raise PedigreeError(
                    f"family {self.family_id}: covariates must be (n_members, p_k)"
                )
        object.__setattr__(self, "covariates", covs)

    @property
    def n_members(self) -> int:
        return len(self.roles)

    @property
    def n_phenotypes(self) -> int:
        return self.phenotypes.shape[1]

    def declared_kinship(self) -> KinshipMatrix:
        return build_kinship(self.roles)

    def generative_kinship(self) -> np.ndarray:
        if self.gen_kinship is not None:
            return self.gen_kinship
        return self.declared_kinship().values


@dataclass
class Cohort:
    """A list of families sharing one model specification."""

    spec: "ModelSpec"
    families: list[FamilyRecord]
    cross_links: tuple[CrossLink, ...] = ()
    kinship_template: KinshipMatrix = field(default_factory=lambda: NUCLEAR_KINSHIP)

    def __post_init__(self):
        for fam in self.families:
            if fam.n_phenotypes != self.spec.K:
                raise PedigreeError(
                    f"family {fam.family_id}: {fam.n_phenotypes} phenotypes, "
                    f"spec has {self.spec.K}"
                )
            for k, x in enumerate(fam.covariates):
                if x.shape[1] != self.spec.covariate_dims[k]:
                    raise PedigreeError(
                        f"family {fam.family_id}: covariate dim {x.shape[1]} != "
                        f"{self.spec.covariate_dims[k]} for phenotype {k + 1}"
                    )

    @property
    def n_families(self) -> int:
        return len(self.families)

    def weights(self) -> np.ndarray:
        return np.array([f.weight for f in self.families])

    def with_weights(self, weights: Iterable[float]) -> "Cohort":
        fams = [replace(f, weight=float(w)) for f, w in zip(self.families, weights)]
        return Cohort(self.spec, fams, self.cross_links, self.kinship_template)


class ReportingErrorMode(enum.Enum):
    CROSS_FAMILY_PARENT = "cross_family_parent"
    UNRELATED_CHILDREN = "unrelated_children"


def _step_sibling_kinship(roles: Sequence[MemberRole]) -> np.ndarray:
    """Generative kinship where the children are not biologically related.

    Child1 stays the offspring of Parent1 only, Child2 of Parent2 only:
    child-child 0, each child 0 to the other parent.
    """
    keep = {
        frozenset({MemberRole.PARENT1, MemberRole.CHILD1}),
        frozenset({MemberRole.PARENT2, MemberRole.CHILD2}),
    }
    n = len(roles)
    out = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            pair = frozenset({roles[i], roles[j]})
            out[i, j] = out[j, i] = 0.5 if pair in keep else 0.0
    return out


def apply_reporting_error(
    cohort: Cohort,
    rate: float,
    mode: ReportingErrorMode,
    rng: np.random.Generator,
) -> Cohort:
    """Perturb the generative kinship of a fraction ``rate`` of families.

    The declared kinship (roles, template) is untouched, so estimators remain
    blind to the perturbation.  Mode ``cross_family_parent`` marks pairs of
    selected families whose Parent1 members are siblings; mode
    ``unrelated_children`` rewires each selected family so its two children
    are biologically unrelated (step-sibling structure).
    """
    if not 0.0 <= rate <= 1.0:
        raise DomainError(f"reporting-error rate {rate} outside [0, 1]")
    n = cohort.n_families
    n_perturb = int(round(rate * n))
    if n_perturb == 0:
        return Cohort(
            cohort.spec, list(cohort.families), cohort.cross_links, cohort.kinship_template
        )
    chosen = rng.choice(n, size=n_perturb, replace=False)

    families = list(cohort.families)
    links: list[CrossLink] = list(cohort.cross_links)
    if mode is ReportingErrorMode.UNRELATED_CHILDREN:
        for idx in chosen:
            fam = families[idx]
            families[idx] = replace(fam, gen_kinship=_step_sibling_kinship(fam.roles))
    else:
        def linked_role(fam: FamilyRecord) -> MemberRole:
            for role in (MemberRole.PARENT1, MemberRole.PARENT2):
                if role in fam.roles:
                    return role
            raise PedigreeError(
                f"family {fam.family_id}: cross_family_parent mode needs a present parent"
            )

        chosen = list(chosen)
        if len(chosen) < 2:
            raise DomainError(
                "cross_family_parent mode needs at least 2 selected families"
            )
        pairs = [chosen[i : i + 2] for i in range(0, len(chosen) - 1, 2)]
        if len(chosen) % 2 == 1:
            # odd count: tie the leftover family into the last pair
            pairs.append([pairs[-1][0], chosen[-1]])
        for a, b in pairs:
            links.append(
                CrossLink(int(a), int(b), linked_role(families[a]), linked_role(families[b]))
            )
    return Cohort(cohort.spec, families, tuple(links), cohort.kinship_template)


def cross_family_coefficient(
    role_u: MemberRole, role_v: MemberRole, link: CrossLink
) -> float:
    """Generative kinship between members of two sibling-linked families."""
    def tier(role, linked):
        if role == linked:
            return 0  # the linked sibling parent
        if role in CHILD_ROLES:
            return 1  # offspring of the linked parent's household
        return None  # the unrelated spouse

    ta = tier(role_u, link.role_a)
    tb = tier(role_v, link.role_b)
    if ta is None or tb is None:
        return 0.0
    # sibling parents 1/2, halved per generation step down on either side
    return 0.5 * 0.5 ** (ta + tb)


# ---------------------------------------------------------------------------
# CSV interface
# ---------------------------------------------------------------------------

def save_cohort_csv(cohort: Cohort, path) -> None:
    """One row per present member; empty cells mark missing phenotypes."""
    K = cohort.spec.K
    dims = cohort.spec.covariate_dims
    p = dims[0]
    if any(d != p for d in dims):
        raise DomainError("CSV schema requires a common covariate dimension")
    header = (
        ["family_id", "role", "weight", "present"]
        + [f"x{i + 1}" for i in range(p)]
        + [f"y{k + 1}" for k in range(K)]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for fam in cohort.families:
            for m, role in enumerate(fam.roles):
                row = [fam.family_id, role.value, repr(float(fam.weight)), "1"]
                row += [repr(float(v)) for v in fam.covariates[0][m]]
                for k in range(K):
                    v = fam.phenotypes[m, k]
                    row.append("" if np.isnan(v) else repr(float(v)))
                writer.writerow(row)


def load_cohort_csv(path, spec: Optional["ModelSpec"] = None) -> Cohort:
    """Read the cohort schema; infers the model spec when not supplied.

    Without an explicit spec, a phenotype whose observed values are all in
    {0, 1} is taken as binary.
    """
    from .model import ModelSpec, PhenotypeKind

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PedigreeError(f"{path}: empty file") from None
        rows = list(reader)

    required = ["family_id", "role", "weight", "present"]
    if header[: len(required)] != required:
        raise PedigreeError(
            f"{path}: header must start with {required}, got {header[:4]}"
        )
    x_cols = [i for i, h in enumerate(header) if h.startswith("x")]
    y_cols = [i for i, h in enumerate(header) if h.startswith("y")]
    if not y_cols:
        raise PedigreeError(f"{path}: no phenotype columns")
    p, K = len(x_cols), len(y_cols)

    role_by_value = {r.value: r for r in MemberRole}
    groups: dict[str, list] = {}
    order: list[str] = []
    for ln, row in enumerate(rows, start=2):
        if not row or all(not c for c in row):
            continue
        fid, role_s, weight_s, present_s = row[0], row[1], row[2], row[3]
        if present_s.strip() in ("0", "false", "False"):
            continue
        if role_s not in role_by_value:
            raise PedigreeError(f"{path}:{ln}: unknown role {role_s!r}")
        try:
            xs = [float(row[i]) for i in x_cols]
            ys = [float(row[i]) if row[i].strip() != "" else math.nan for i in y_cols]
            weight = float(weight_s)
        except ValueError as exc:
            raise PedigreeError(f"{path}:{ln}: {exc}") from None
        if fid not in groups:
            groups[fid] = []
            order.append(fid)
        groups[fid].append((role_by_value[role_s], xs, ys, weight))

    if spec is None:
        kinds = []
        for k in range(K):
            vals = [m[2][k] for fam in groups.values() for m in fam if not math.isnan(m[2][k])]
            binary = len(vals) > 0 and all(v in (0.0, 1.0) for v in vals)
            kinds.append(PhenotypeKind.BINARY if binary else PhenotypeKind.CONTINUOUS)
        spec = ModelSpec(kinds=tuple(kinds), covariate_dims=(p,) * K)

    families = []
    for fid in order:
        members = sorted(groups[fid], key=lambda m: ROLE_INDEX[m[0]])
        roles = tuple(m[0] for m in members)
        X = np.array([m[1] for m in members], dtype=float)
        Y = np.array([m[2] for m in members], dtype=float)
        weights = {m[3] for m in members}
        if len(weights) != 1:
            raise PedigreeError(f"{path}: family {fid}: inconsistent weights")
        families.append(
            FamilyRecord(
                family_id=fid,
                roles=roles,
                covariates=tuple(X for _ in range(spec.K)),
                phenotypes=Y,
                weight=weights.pop(),
            )
        )
    return Cohort(spec=spec, families=families)
