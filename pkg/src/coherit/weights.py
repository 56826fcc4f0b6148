"""Inverse-probability weights for family missingness.

A logistic model (one phenotype observed / not) or a three-category
multinomial model (none / one / both phenotypes missing) is fit to
subject-level covariates by iteratively reweighted least squares; each
family's weight is the reciprocal predicted probability of one randomly
chosen present parent's observed category, clipped and normalized to mean 1.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DomainError, RankDeficiencyError, SeparationError
from .pedigree import Cohort, PARENT_ROLES

DEFAULT_WEIGHT_CLIP = (1.0, 50.0)


class MissingnessKind(enum.Enum):
    LOGISTIC = "logistic"
    MULTINOMIAL3 = "multinomial3"


MULTINOMIAL_CATEGORIES = ("none_missing", "one_missing", "both_missing")


@dataclass
class MissingnessModel:
    """Fitted missingness model; `coefficients` has one row per non-reference
    category (logistic: a single row for P(observed))."""

    kind: MissingnessKind
    coefficients: np.ndarray
    deviance_trace: tuple[float, ...]

    def predict_proba(self, design: np.ndarray) -> np.ndarray:
        """Category probabilities per subject.

        Logistic: columns (not_observed, observed).  Multinomial: columns in
        MULTINOMIAL_CATEGORIES order, with none_missing the reference.
        """
        X = _add_intercept(design)
        if self.kind is MissingnessKind.LOGISTIC:
            p = expit(X @ self.coefficients[0])
            return np.column_stack([1.0 - p, p])
        eta = X @ self.coefficients.T  # (n, 2) for the non-reference categories
        eta = np.column_stack([np.zeros(len(X)), eta])
        eta -= eta.max(axis=1, keepdims=True)
        ex = np.exp(eta)
        return ex / ex.sum(axis=1, keepdims=True)


def _add_intercept(design: np.ndarray) -> np.ndarray:
    design = np.asarray(design, dtype=float)
    return np.column_stack([np.ones(len(design)), design])


def _check_rank(X: np.ndarray):
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficiencyError("missingness design matrix is rank-deficient")


def _fit_logistic(X: np.ndarray, y: np.ndarray, max_iter=200, tol=1e-10):
    beta = np.zeros(X.shape[1])
    dev_trace = []
    dev = math.inf
    for _ in range(max_iter):
        eta = X @ beta
        p = np.clip(expit(eta), 1e-12, 1 - 1e-12)
        new_dev = -2.0 * float(np.sum(y * np.log(p) + (1 - y) * np.log(1 - p)))
        W = p * (1 - p)
        score = X.T @ (y - p)
        H = (X * W[:, None]).T @ X
        try:
            step = np.linalg.solve(H, score)
        except np.linalg.LinAlgError:
            raise RankDeficiencyError("singular information matrix in logistic fit")
        # step halving keeps the deviance monotone
        lam = 1.0
        while lam > 1e-8:
            cand = beta + lam * step
            pc = np.clip(expit(X @ cand), 1e-12, 1 - 1e-12)
            cand_dev = -2.0 * float(np.sum(y * np.log(pc) + (1 - y) * np.log(1 - pc)))
            if cand_dev <= new_dev + 1e-10:
                break
            lam *= 0.5
        beta = beta + lam * step
        if np.max(np.abs(beta)) > 50.0:
            worst = int(np.argmax(np.abs(beta)))
            raise SeparationError(
                f"logistic fit diverging; separating column {worst}", column=worst
            )
        dev_trace.append(cand_dev)
        if abs(dev - cand_dev) < tol * (1 + abs(cand_dev)):
            break
        dev = cand_dev
    return beta[None, :], tuple(dev_trace)


def _fit_multinomial(X: np.ndarray, y_idx: np.ndarray, max_iter=200, tol=1e-10):
    """Newton-Raphson on the 3-category logit with the first category as
    reference."""
    n, p = X.shape
    n_free = len(MULTINOMIAL_CATEGORIES) - 1
    beta = np.zeros((n_free, p))
    onehot = np.zeros((n, n_free))
    for j in range(n_free):
        onehot[:, j] = y_idx == j + 1

    def probs(b):
        eta = np.column_stack([np.zeros(n), X @ b.T])
        eta -= eta.max(axis=1, keepdims=True)
        ex = np.exp(eta)
        return ex / ex.sum(axis=1, keepdims=True)

    def deviance(P):
        ll = np.log(np.clip(P[np.arange(n), y_idx], 1e-12, None)).sum()
        return -2.0 * float(ll)

    dev_trace = []
    dev = math.inf
    for _ in range(max_iter):
        P = probs(beta)
        new_dev = deviance(P)
        score = np.concatenate(
            [X.T @ (onehot[:, j] - P[:, j + 1]) for j in range(n_free)]
        )
        H = np.zeros((n_free * p, n_free * p))
        for j in range(n_free):
            for l in range(n_free):
                w = P[:, j + 1] * ((j == l) - P[:, l + 1])
                H[j * p : (j + 1) * p, l * p : (l + 1) * p] = (X * w[:, None]).T @ X
        try:
            step = np.linalg.solve(H, score).reshape(n_free, p)
        except np.linalg.LinAlgError:
            raise RankDeficiencyError("singular information matrix in multinomial fit")
        lam = 1.0
        while lam > 1e-8:
            cand_dev = deviance(probs(beta + lam * step))
            if cand_dev <= new_dev + 1e-10:
                break
            lam *= 0.5
        beta = beta + lam * step
        if np.max(np.abs(beta)) > 50.0:
            worst = int(np.argmax(np.abs(beta)) % p)
            raise SeparationError(
                f"multinomial fit diverging; separating column {worst}", column=worst
            )
        dev_trace.append(cand_dev)
        if abs(dev - cand_dev) < tol * (1 + abs(cand_dev)):
            break
        dev = cand_dev
    return beta, tuple(dev_trace)


def fit_missingness(design, outcome, kind: MissingnessKind) -> MissingnessModel:
    """Maximum-likelihood missingness model.

    ``outcome``: for LOGISTIC, 0/1 observed flags; for MULTINOMIAL3, labels
    from MULTINOMIAL_CATEGORIES (or integer codes 0/1/2).
    """
    X = _add_intercept(design)
    _check_rank(X)
    if kind is MissingnessKind.LOGISTIC:
        y = np.asarray(outcome, dtype=float)
        if set(np.unique(y)) - {0.0, 1.0}:
            raise DomainError("logistic outcome must be 0/1")
        if y.min() == y.max():
            raise DomainError("logistic outcome needs both categories observed")
        coef, trace = _fit_logistic(X, y)
    else:
        labels = list(outcome)
        if labels and isinstance(labels[0], str):
            lut = {c: i for i, c in enumerate(MULTINOMIAL_CATEGORIES)}
            try:
                y_idx = np.array([lut[v] for v in labels])
            except KeyError as exc:
                raise DomainError(f"unknown category {exc}") from None
        else:
            y_idx = np.asarray(labels, dtype=int)
        if set(np.unique(y_idx)) != {0, 1, 2}:
            raise DomainError("multinomial outcome needs all three categories")
        coef, trace = _fit_multinomial(X, y_idx)
    return MissingnessModel(kind, coef, trace)


def observed_category(phenotypes_row: np.ndarray) -> int:
    """0 = none missing, 1 = one missing, 2 = both/all missing."""
    n_missing = int(np.isnan(phenotypes_row).sum())
    if n_missing == 0:
        return 0
    if n_missing >= phenotypes_row.size:
        return 2
    return 1


def assign_family_weights(
    cohort: Cohort,
    model: MissingnessModel,
    rng: np.random.Generator,
    *,
    clip: tuple[float, float] = DEFAULT_WEIGHT_CLIP,
    normalize: bool = True,
) -> Cohort:
    """Reweight each family by 1/P(observed pattern) of a random present parent.

    Families without a present parent fall back to a random present child
    (flagged in the returned diagnostics attribute).  Weights are clipped to
    ``clip`` and then normalized to mean 1 (the estimators are invariant to
    the overall weight scale, so normalization is cosmetic but keeps reports
    comparable).
    """
    raw = np.empty(cohort.n_families)
    fallback_families = []
    for i, fam in enumerate(cohort.families):
        parent_idx = [
            j for j, role in enumerate(fam.roles) if role in PARENT_ROLES
        ]
        if not parent_idx:
            parent_idx = list(range(fam.n_members))
            fallback_families.append(fam.family_id)
        pick = parent_idx[int(rng.integers(len(parent_idx)))]
        probs = model.predict_proba(fam.covariates[0][pick][None, :])[0]
        if model.kind is MissingnessKind.LOGISTIC:
            observed = not np.isnan(fam.phenotypes[pick]).all()
            p_obs = probs[1] if observed else probs[0]
        else:
            p_obs = probs[observed_category(fam.phenotypes[pick])]
        raw[i] = 1.0 / max(p_obs, 1e-12)
    clipped = np.clip(raw, clip[0], clip[1])
    weights = clipped / clipped.mean() if normalize else clipped
    out = cohort.with_weights(weights)
    out.weight_diagnostics = {
        "raw": raw,
        "clipped": clipped,
        "clip": clip,
        "normalized": normalize,
        "fallback_families": fallback_families,
    }
    return out


def save_weights_csv(cohort: Cohort, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("family_id,weight\n")
        for fam in cohort.families:
            fh.write(f"{fam.family_id},{float(fam.weight)!r}\n")


def load_weights_csv(cohort: Cohort, path) -> Cohort:
    table = {}
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header != ["family_id", "weight"]:
            raise DomainError(f"{path}: expected header family_id,weight")
        for line in fh:
            if not line.strip():
                continue
            fid, w = line.strip().split(",")
            table[fid] = float(w)
    try:
        return cohort.with_weights([table[f.family_id] for f in cohort.families])
    except KeyError as exc:
        raise DomainError(f"{path}: no weight for family {exc}") from None
