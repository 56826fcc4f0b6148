"""Model parameters and the family-level covariance decomposition.

The phenotype vector of one family stacks phenotype-major
(Y_11..Y_1n, Y_21..Y_2n, ...), and its covariance is

    sigma_b^2 (gamma gamma^T) (x) J J^T  +  Sigma (x) C  +  diag(eps^2) (x) I

with C the kinship matrix, Sigma the genetic covariance, and (x) the
Kronecker product.  Heritability of phenotype k is
sigma_k^2 / (sigma_k^2 + gamma_k^2 sigma_b^2 + sigma_eps_k^2), on the latent
liability scale for binary phenotypes (sigma_eps pinned to 1 there).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .errors import DomainError

if TYPE_CHECKING:  # pragma: no cover
    from .pedigree import FamilyRecord

from .pedigree import KinshipMatrix, N_SLOTS, ROLE_INDEX


class PhenotypeKind(enum.Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"


@dataclass(frozen=True)
class ModelSpec:
    """Phenotype count, kinds, and per-phenotype covariate dimensions."""

    kinds: tuple[PhenotypeKind, ...]
    covariate_dims: tuple[int, ...]

    def __post_init__(self):
        if len(self.kinds) < 1:
            raise DomainError("need at least one phenotype")
        if len(self.covariate_dims) != len(self.kinds):
            raise DomainError("covariate_dims must match phenotype count")
        if any(d < 0 for d in self.covariate_dims):
            raise DomainError("covariate dimensions must be nonnegative")

    @property
    def K(self) -> int:
        return len(self.kinds)

    @property
    def all_continuous(self) -> bool:
        return all(k is PhenotypeKind.CONTINUOUS for k in self.kinds)

    @property
    def all_binary(self) -> bool:
        return all(k is PhenotypeKind.BINARY for k in self.kinds)

    def is_binary(self, k: int) -> bool:
        """1-based phenotype index."""
        return self.kinds[k - 1] is PhenotypeKind.BINARY

    def beta_dim(self) -> int:
        return sum(1 + p for p in self.covariate_dims)


def continuous_spec(K: int = 2, p: int = 4) -> ModelSpec:
    return ModelSpec((PhenotypeKind.CONTINUOUS,) * K, (p,) * K)


def binary_spec(K: int = 2, p: int = 4) -> ModelSpec:
    return ModelSpec((PhenotypeKind.BINARY,) * K, (p,) * K)


def mixed_spec(p: int = 4) -> ModelSpec:
    return ModelSpec((PhenotypeKind.BINARY, PhenotypeKind.CONTINUOUS), (p, p))


@dataclass
class FixedEffects:
    """Per-phenotype intercept and slope vector of the mean model."""

    intercepts: np.ndarray
    slopes: tuple[np.ndarray, ...]

    def __post_init__(self):
        self.intercepts = np.asarray(self.intercepts, dtype=float)
        self.slopes = tuple(np.asarray(s, dtype=float) for s in self.slopes)
        if self.intercepts.ndim != 1 or len(self.slopes) != self.intercepts.size:
            raise DomainError("one intercept and one slope vector per phenotype")

    @property
    def K(self) -> int:
        return self.intercepts.size

    def flatten(self) -> np.ndarray:
        parts = []
        for k in range(self.K):
            parts.append([self.intercepts[k]])
            parts.append(self.slopes[k])
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, flat, spec: ModelSpec) -> "FixedEffects":
        flat = np.asarray(flat, dtype=float)
        if flat.size != spec.beta_dim():
            raise DomainError(f"expected {spec.beta_dim()} coefficients, got {flat.size}")
        intercepts = np.empty(spec.K)
        slopes = []
        pos = 0
        for k, p in enumerate(spec.covariate_dims):
            intercepts[k] = flat[pos]
            slopes.append(flat[pos + 1 : pos + 1 + p].copy())
            pos += 1 + p
        return cls(intercepts, tuple(slopes))

    @staticmethod
    def names(spec: ModelSpec) -> list[str]:
        out = []
        for k, p in enumerate(spec.covariate_dims, start=1):
            out.append(f"alpha{k}")
            out.extend(f"beta{k}_{j}" for j in range(1, p + 1))
        return out

    def to_dict(self, spec: ModelSpec) -> dict[str, float]:
        return dict(zip(self.names(spec), self.flatten().tolist()))

    @classmethod
    def from_dict(cls, d, spec: ModelSpec) -> "FixedEffects":
        return cls.from_flat([d[name] for name in cls.names(spec)], spec)


@dataclass
class VarianceComponents:
    """All covariance parameters of the family model.

    gamma[0] is pinned to 1 for identifiability; rho is the K x K genetic
    correlation matrix with unit diagonal.
    """

    gamma: np.ndarray
    sigma_g: np.ndarray
    sigma_b: float
    sigma_eps: np.ndarray
    rho: np.ndarray
    flags: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=float)
        self.sigma_g = np.asarray(self.sigma_g, dtype=float)
        self.sigma_eps = np.asarray(self.sigma_eps, dtype=float)
        self.rho = np.asarray(self.rho, dtype=float)
        self.sigma_b = float(self.sigma_b)

    @property
    def K(self) -> int:
        return self.gamma.size

    def validate(self, spec: ModelSpec | None = None) -> None:
        K = self.K
        if not (self.sigma_g.size == self.sigma_eps.size == K and self.rho.shape == (K, K)):
            raise DomainError("component dimensions disagree")
        if abs(self.gamma[0] - 1.0) > 1e-12:
            raise DomainError("gamma_1 must equal 1")
        if self.sigma_b < 0 or np.any(self.sigma_g < 0) or np.any(self.sigma_eps < 0):
            raise DomainError("standard deviations must be nonnegative")
        if not np.allclose(self.rho, self.rho.T) or not np.allclose(np.diag(self.rho), 1.0):
            raise DomainError("rho must be symmetric with unit diagonal")
        if np.any(np.abs(self.rho) > 1.0 + 1e-12):
            raise DomainError("genetic correlations must lie in [-1, 1]")
        if np.linalg.eigvalsh(self.rho).min() < -1e-8:
            raise DomainError("rho must be positive semidefinite")
        if spec is not None:
            for k in range(1, K + 1):
                if spec.is_binary(k) and abs(self.sigma_eps[k - 1] - 1.0) > 1e-9:
                    raise DomainError(
                        f"binary phenotype {k} requires sigma_eps = 1 (latent scale)"
                    )

    def sigma_bk(self) -> np.ndarray:
        """Shared-environment loadings gamma_k * sigma_b."""
        return self.gamma * self.sigma_b

    def genetic_cov(self) -> np.ndarray:
        return self.rho * np.outer(self.sigma_g, self.sigma_g)

    def total_var(self, k: int) -> float:
        """Variance of one phenotype slot; 1-based index."""
        i = k - 1
        return float(
            self.gamma[i] ** 2 * self.sigma_b**2
            + self.sigma_g[i] ** 2
            + self.sigma_eps[i] ** 2
        )

    @staticmethod
    def names(K: int) -> list[str]:
        out = [f"gamma{k}" for k in range(2, K + 1)]
        out += [f"sigma{k}" for k in range(1, K + 1)]
        out.append("sigma_b")
        out += [f"sigma_eps{k}" for k in range(1, K + 1)]
        out += [f"rho{k}{m}" for k in range(1, K + 1) for m in range(k + 1, K + 1)]
        return out

    def to_dict(self) -> dict[str, float]:
        K = self.K
        vals = (
            [float(self.gamma[k]) for k in range(1, K)]
            + [float(v) for v in self.sigma_g]
            + [self.sigma_b]
            + [float(v) for v in self.sigma_eps]
            + [float(self.rho[k, m]) for k in range(K) for m in range(k + 1, K)]
        )
        return dict(zip(self.names(K), vals))

    @classmethod
    def from_dict(cls, d, K: int) -> "VarianceComponents":
        gamma = np.array([1.0] + [d[f"gamma{k}"] for k in range(2, K + 1)])
        rho = np.eye(K)
        for k in range(1, K + 1):
            for m in range(k + 1, K + 1):
                rho[k - 1, m - 1] = rho[m - 1, k - 1] = d[f"rho{k}{m}"]
        return cls(
            gamma=gamma,
            sigma_g=np.array([d[f"sigma{k}"] for k in range(1, K + 1)]),
            sigma_b=d["sigma_b"],
            sigma_eps=np.array([d[f"sigma_eps{k}"] for k in range(1, K + 1)]),
            rho=rho,
        )


def heritability(theta: VarianceComponents, k: int) -> float:
    """Genetic fraction of phenotype k's total variance; 1-based index."""
    if not 1 <= k <= theta.K:
        raise DomainError(f"phenotype index {k} out of range")
    total = theta.total_var(k)
    if total <= 0.0:
        raise DomainError("zero total variance")
    return float(theta.sigma_g[k - 1] ** 2 / total)


def coheritability(theta: VarianceComponents, k: int, m: int) -> float:
    """rho_km * h_k * h_m with h the root heritabilities; 1-based indices."""
    if k == m:
        raise DomainError("coheritability needs two distinct phenotypes")
    hk = math.sqrt(heritability(theta, k))
    hm = math.sqrt(heritability(theta, m))
    return float(theta.rho[k - 1, m - 1] * hk * hm)


def build_covariance(theta: VarianceComponents, kinship) -> np.ndarray:
    """(nK x nK) phenotype-major family covariance for a kinship matrix."""
    theta.validate()
    C = kinship.values if isinstance(kinship, KinshipMatrix) else np.asarray(kinship, float)
    n = C.shape[0]
    shared = theta.sigma_b**2 * np.outer(theta.gamma, theta.gamma)
    noise = np.diag(theta.sigma_eps**2)
    return (
        np.kron(shared, np.ones((n, n)))
        + np.kron(theta.genetic_cov(), C)
        + np.kron(noise, np.eye(n))
    )


def pair_covariance(theta: VarianceComponents, k: int, m: int, c: float | None) -> float:
    """Model covariance between slots of phenotypes k, m (1-based).

    ``c`` is the kinship coefficient for a cross-member pair, or None for a
    same-member pair.
    """
    i, j = k - 1, m - 1
    shared = theta.gamma[i] * theta.gamma[j] * theta.sigma_b**2
    gen = theta.genetic_cov()[i, j]
    if c is None:
        val = shared + gen
        if k == m:  # same slot: full variance
            val += theta.sigma_eps[i] ** 2
        return float(val)
    return float(shared + c * gen)


def mean_vector(beta: FixedEffects, family: "FamilyRecord") -> np.ndarray:
    """Template-aligned mean X beta, phenotype-major; absent slots are zero."""
    K = beta.K
    if family.n_phenotypes != K:
        raise DomainError("phenotype count mismatch between beta and family")
    out = np.zeros(K * N_SLOTS)
    for k in range(K):
        x = family.covariates[k]
        if x.shape[1] != beta.slopes[k].size:
            raise DomainError(
                f"covariate dim {x.shape[1]} != slope dim {beta.slopes[k].size} "
                f"for phenotype {k + 1}"
            )
        vals = beta.intercepts[k] + x @ beta.slopes[k]
        for m, role in enumerate(family.roles):
            out[k * N_SLOTS + ROLE_INDEX[role]] = vals[m]
    return out
