"""Normal-distribution numerics.

Univariate and bivariate rectangle probabilities, first and second moments of
normals truncated to sign regions, and tetrachoric correlation.  Everything is
built from two primitives:

* ``bvn_upper(a, b, r)`` -- P(T1 > a, T2 > b) for a standard bivariate normal
  pair with correlation ``r``, computed with the classic 20-point rule of
  Genz (polar form for moderate ``r``, complementary tail form for
  ``|r| >= 0.925``); absolute error is well below 1e-12.
* Exact reductions of the 1-D integrals
  ``int t^k phi(t) Phi_bar((b - r t)/sqrt(1-r^2)) dt`` (integration by parts)
  for the truncated first and cross moments; |r| -> 1 routed to degenerate
  1-D limits.

All kernels are vectorized; the scalar operations are thin wrappers.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.optimize import brentq
from scipy.special import ndtr, ndtri

from .errors import DomainError, UnderflowError

_SQRT_2PI = math.sqrt(2.0 * math.pi)
_TWO_PI = 2.0 * math.pi

# Probability floors below which conditional moments are undefined.
UNI_PROB_FLOOR = 1e-15
BIV_PROB_FLOOR = 1e-12

_GENZ_RULES = tuple(leggauss(n) for n in (6, 12, 20))


def _phi(x):
    return np.exp(-0.5 * np.square(x)) / _SQRT_2PI


def _Q(x):
    """Survival function of the standard normal."""
    return ndtr(-np.asarray(x, dtype=float))


# ---------------------------------------------------------------------------
# Bivariate normal orthant probability (Genz 2004 style)
# ---------------------------------------------------------------------------

def _bvn_upper_polar(a, b, r):
    # P = Phi(-a)Phi(-b) + 1/(2pi) int_0^{asin r} exp(-(a^2+b^2-2ab sin t)/(2cos^2 t)) dt
    mar = float(np.max(np.abs(r))) if r.size else 0.0
    gx, gw = _GENZ_RULES[0 if mar < 0.3 else 1 if mar < 0.75 else 2]
    asr = np.arcsin(r)
    half = 0.5 * asr
    t = half[..., None] * (gx + 1.0)
    sn = np.sin(t)
    aa = a[..., None]
    bb = b[..., None]
    expo = (sn * (aa * bb) - 0.5 * (aa * aa + bb * bb)) / (1.0 - sn * sn)
    vals = np.exp(expo)
    return _Q(a) * _Q(b) + (half / _TWO_PI) * (vals @ gw)


def _bvn_upper_tail(a, b, r):
    # Complementary form for |r| >= 0.925; mirrors the Genz BVND tail branch.
    s = np.where(r >= 0.0, 1.0, -1.0)
    k = s * b
    hk = a * k
    comp = (1.0 - r) * (1.0 + r)
    av = np.sqrt(np.maximum(comp, 0.0))
    bdif = a - k
    bs = bdif * bdif
    c = (4.0 - hk) / 8.0
    d = (12.0 - hk) / 80.0

    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        a0 = -0.5 * (np.where(comp > 0.0, bs / np.maximum(comp, 1e-300), np.inf) + hk)
        a1 = c * (1.0 - d * bs) / 3.0
        a2 = 1.0 - bs * a1
        absb = np.abs(bdif)
        analytic = av * (a2 + comp * a1 + c * d * comp * comp) * np.exp(
            np.minimum(a0, 0.0)
        ) - _SQRT_2PI * _Q(absb / np.maximum(av, 1e-300)) * absb * a2 * np.exp(
            -0.5 * np.minimum(hk, 700.0)
        )
        analytic = np.where(comp > 0.0, analytic, 0.0)

        # quadrature over x in (0, a): xs = (a/2 (1+u))^2
        gx, gw = _GENZ_RULES[2]
        xs = 0.25 * comp[..., None] * np.square(gx + 1.0)
        rs = np.sqrt(np.maximum(1.0 - xs, 0.0))
        expo = -0.5 * (bs[..., None] / np.maximum(xs, 1e-300) + hk[..., None])
        inner = np.exp(-0.5 * xs / np.square(1.0 + rs) * hk[..., None]) / np.maximum(
            rs, 1e-300
        )
        vals = np.where(
            expo > -100.0,
            np.exp(expo)
            * ((1.0 + c[..., None] * xs * (1.0 + 5.0 * d[..., None] * xs)) - inner),
            0.0,
        )
        quad = -0.5 * av * (vals @ gw)

    base = np.where(s > 0.0, _Q(np.maximum(a, k)), np.maximum(_Q(-k) - _Q(-a), 0.0))
    return base - s * (analytic + quad) / _TWO_PI


def bvn_upper(a, b, r):
    """P(T1 > a, T2 > b) for standard bivariate normal with correlation r.

    Broadcasts over array arguments.  |r| = 1 is handled by the degenerate
    1-D reduction.
    """
    a, b, r = np.broadcast_arrays(
        np.asarray(a, dtype=float), np.asarray(b, dtype=float), np.asarray(r, dtype=float)
    )
    if np.any(np.abs(r) > 1.0):
        raise DomainError("correlation outside [-1, 1]")
    out = np.empty(a.shape, dtype=float)

    degen_hi = r >= 1.0 - 1e-15
    degen_lo = r <= -1.0 + 1e-15
    polar = (~degen_hi) & (~degen_lo) & (np.abs(r) < 0.925)
    tail = (~degen_hi) & (~degen_lo) & (~polar)

    if np.any(degen_hi):
        out[degen_hi] = _Q(np.maximum(a[degen_hi], b[degen_hi]))
    if np.any(degen_lo):
        # P(T > a, -T > b) = P(a < T < -b) = Phi(-b) - Phi(a)
        out[degen_lo] = np.maximum(ndtr(-b[degen_lo]) - ndtr(a[degen_lo]), 0.0)
    if np.any(polar):
        out[polar] = _bvn_upper_polar(a[polar], b[polar], r[polar])
    if np.any(tail):
        out[tail] = _bvn_upper_tail(a[tail], b[tail], r[tail])
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Public parameter types
# ---------------------------------------------------------------------------

class Side(enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    FREE = "free"


class QuadrantSpec(NamedTuple):
    """Integration region relative to threshold 0, one side per coordinate."""

    side1: Side
    side2: Side


@dataclass(frozen=True)
class BivariateParams:
    """Means, standard deviations, and correlation of a bivariate normal."""

    mu1: float
    mu2: float
    s1: float
    s2: float
    corr: float

    def __post_init__(self):
        if not (self.s1 > 0.0 and self.s2 > 0.0):
            raise DomainError("standard deviations must be positive")
        if abs(self.corr) > 1.0:
            raise DomainError("correlation outside [-1, 1]")


def bvn_rectangle_prob(p: BivariateParams, q: QuadrantSpec) -> float:
    """P((Y1, Y2) in region) where each coordinate is constrained to a sign.

    Free coordinates are marginalized exactly; |corr| = 1 reduces to 1-D.
    """
    thr1 = -p.mu1 / p.s1
    thr2 = -p.mu2 / p.s2
    if q.side1 is Side.FREE and q.side2 is Side.FREE:
        return 1.0
    if q.side1 is Side.FREE:
        t = thr2 if q.side2 is Side.POSITIVE else -thr2
        return float(_Q(t))
    if q.side2 is Side.FREE:
        t = thr1 if q.side1 is Side.POSITIVE else -thr1
        return float(_Q(t))
    f1 = 1.0 if q.side1 is Side.POSITIVE else -1.0
    f2 = 1.0 if q.side2 is Side.POSITIVE else -1.0
    return float(bvn_upper(f1 * thr1, f2 * thr2, f1 * f2 * p.corr))


# ---------------------------------------------------------------------------
# Univariate truncated moments
# ---------------------------------------------------------------------------

def uni_moments(mu, s, z):
    """Vectorized (E[Y|Z=z], E[Y^2|Z=z], P(Z=z)) for Y ~ N(mu, s^2), Z = I(Y>0).

    Entries whose truncation probability falls below ``UNI_PROB_FLOOR`` come
    back as NaN; callers decide whether that is an error.
    """
    mu, s, z = np.broadcast_arrays(
        np.asarray(mu, dtype=float), np.asarray(s, dtype=float), np.asarray(z)
    )
    f = np.where(z == 1, 1.0, -1.0)
    a = -f * mu / s
    prob = _Q(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = _phi(a) / prob
    ok = prob >= UNI_PROB_FLOOR
    lam = np.where(ok, lam, np.nan)
    ey = mu + s * f * lam
    ey2 = mu * mu + 2.0 * mu * s * f * lam + s * s * (1.0 + a * lam)
    return ey, ey2, prob


def trunc_uni_moments(mu: float, var: float, z: int) -> tuple[float, float]:
    """Conditional (E[Y|Z=z], E[Y^2|Z=z]) for Y ~ N(mu, var), Z = I(Y > 0).

    Mills-ratio closed forms.  Raises UnderflowError when the conditioning
    event has probability below ``UNI_PROB_FLOOR``.
    """
    if not var > 0.0:
        raise DomainError("variance must be positive")
    ey, ey2, prob = uni_moments(mu, math.sqrt(var), z)
    if float(prob) < UNI_PROB_FLOOR:
        raise UnderflowError(
            f"truncation probability {float(prob):.3e} below floor "
            f"{UNI_PROB_FLOOR:.0e} (mu={mu}, var={var}, z={z})"
        )
    return float(ey), float(ey2)


# ---------------------------------------------------------------------------
# Quadrant moments of the standardized pair
# ---------------------------------------------------------------------------

def _canon_quadrant_raw(a, b, r, prob):
    """(E[T1*1R], E[T2*1R], E[T1*T2*1R]) over R = {T1 > a, T2 > b}.

    Exact reductions of the 1-D integrals int t^k phi(t) Q((b-rt)/w) dt by
    integration by parts (the classical truncated-BVN moment identities):

        E[T1*1R]    = phi(a) Q(ba) + r phi(b) Q(ab)
        E[T1*T2*1R] = r P(R) + r a phi(a) Q(ba) + r b phi(b) Q(ab)
                      + w phi(b) phi(ab)

    with ba = (b - r a)/w, ab = (a - r b)/w, w = sqrt(1 - r^2).
    """
    w = np.sqrt(np.maximum((1.0 - r) * (1.0 + r), 1e-300))
    ba = (b - r * a) / w
    ab = (a - r * b) / w
    pa = _phi(a) * _Q(ba)
    pb = _phi(b) * _Q(ab)
    m1 = pa + r * pb
    m2 = pb + r * pa
    m12 = r * prob + r * a * pa + r * b * pb + w * _phi(b) * _phi(ab)
    return m1, m2, m12


def _canon_quadrant_degenerate(a, b, r):
    """|r| -> 1 limits: T2 = sign(r) * T1 almost surely."""
    pos = r > 0.0
    c0 = np.maximum(a, b)
    m1_pos = _phi(c0)
    m12_pos = _Q(c0) + c0 * _phi(c0)
    # r -> -1: region a < T1 < -b
    upper = -b
    mass = np.maximum(ndtr(upper) - ndtr(a), 0.0)
    m1_neg = _phi(a) - _phi(upper)
    m12_neg = -(mass + a * _phi(a) - upper * _phi(upper))
    m1 = np.where(pos, m1_pos, m1_neg)
    m2 = np.where(pos, m1_pos, -m1_neg)
    m12 = np.where(pos, m12_pos, m12_neg)
    return m1, m2, m12


def quadrant_moments(mu1, mu2, s1, s2, r, z1, z2):
    """Vectorized conditional moments over the sign quadrant of (z1, z2).

    Returns (E[Y1|R], E[Y2|R], E[Y1*Y2|R], P(R)).  Entries with region mass
    below ``BIV_PROB_FLOOR`` are NaN.
    """
    mu1, mu2, s1, s2, r, z1, z2 = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (mu1, mu2, s1, s2, r, z1, z2))
    )
    f1 = np.where(z1 == 1, 1.0, -1.0)
    f2 = np.where(z2 == 1, 1.0, -1.0)
    a = -f1 * mu1 / s1
    b = -f2 * mu2 / s2
    rc = f1 * f2 * r

    prob = bvn_upper(a, b, rc)
    degen = np.abs(rc) >= 1.0 - 1e-12
    if np.any(degen):
        m1 = np.empty_like(a)
        m2 = np.empty_like(a)
        m12 = np.empty_like(a)
        dm1, dm2, dm12 = _canon_quadrant_degenerate(a[degen], b[degen], rc[degen])
        m1[degen], m2[degen], m12[degen] = dm1, dm2, dm12
        nd = ~degen
        m1[nd], m2[nd], m12[nd] = _canon_quadrant_raw(a[nd], b[nd], rc[nd], prob[nd])
    else:
        m1, m2, m12 = _canon_quadrant_raw(a, b, rc, prob)

    ok = prob >= BIV_PROB_FLOOR
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = np.where(ok, m1 / prob, np.nan)
        t2 = np.where(ok, m2 / prob, np.nan)
        t12 = np.where(ok, m12 / prob, np.nan)
    ey1 = mu1 + s1 * f1 * t1
    ey2 = mu2 + s2 * f2 * t2
    ey12 = (
        mu1 * mu2
        + mu1 * s2 * f2 * t2
        + mu2 * s1 * f1 * t1
        + s1 * s2 * f1 * f2 * t12
    )
    return ey1, ey2, ey12, prob


def halfplane_moments(mu1, mu2, s1, s2, r, z2):
    """Vectorized moments conditioning only on Z2 = z2 (Y1 unrestricted).

    Closed Mills-ratio forms.  Returns (E[Y1|.], E[Y2|.], E[Y1*Y2|.], P).
    """
    mu1, mu2, s1, s2, r, z2 = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (mu1, mu2, s1, s2, r, z2))
    )
    f2 = np.where(z2 == 1, 1.0, -1.0)
    b = -f2 * mu2 / s2
    rc = f2 * r
    prob = _Q(b)
    ok = prob >= BIV_PROB_FLOOR
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(ok, _phi(b) / prob, np.nan)
    t2 = lam
    t1 = rc * lam
    t12 = rc * (1.0 + b * lam)
    ey1 = mu1 + s1 * t1
    ey2 = mu2 + s2 * f2 * t2
    ey12 = mu1 * mu2 + mu1 * s2 * f2 * t2 + mu2 * s1 * t1 + s1 * s2 * f2 * t12
    return ey1, ey2, ey12, prob


def _check_biv_mass(prob, p, where):
    if prob < BIV_PROB_FLOOR:
        raise UnderflowError(
            f"{where} mass {prob:.3e} below floor {BIV_PROB_FLOOR:.0e} for {p}"
        )


def trunc_biv_moments(p: BivariateParams, z1: int, z2: int) -> tuple[float, float, float]:
    """(E[Y1|Z1,Z2], E[Y2|Z1,Z2], E[Y1*Y2|Z1,Z2]) over the (z1, z2) quadrant."""
    ey1, ey2, ey12, prob = quadrant_moments(
        p.mu1, p.mu2, p.s1, p.s2, p.corr, z1, z2
    )
    _check_biv_mass(float(prob), p, f"quadrant ({z1},{z2})")
    return float(ey1), float(ey2), float(ey12)


def trunc_cross_moments_halfplane(p: BivariateParams, z2: int) -> tuple[float, float, float]:
    """(E[Y1|Z2], E[Y2|Z2], E[Y1*Y2|Z2]) with Y1 unrestricted."""
    ey1, ey2, ey12, prob = halfplane_moments(p.mu1, p.mu2, p.s1, p.s2, p.corr, z2)
    _check_biv_mass(float(prob), p, f"half-plane (z2={z2})")
    return float(ey1), float(ey2), float(ey12)


# ---------------------------------------------------------------------------
# Tetrachoric correlation
# ---------------------------------------------------------------------------

_TETRA_BOUND = 1.0 - 1e-6


def tetrachoric_corr(counts) -> float:
    """Latent correlation of a 2x2 table under the bivariate-probit model.

    ``counts[i][j]`` is the number of observations with (Z1=i, Z2=j).
    Thresholds are profiled out at the marginal proportions; the correlation
    solves P(T1 > t1, T2 > t2; rho) = p11.  Tables with a zero cell under
    perfect association return +-(1 - 1e-6).
    """
    tab = np.asarray(counts, dtype=float)
    if tab.shape != (2, 2) or np.any(tab < 0.0):
        raise DomainError("counts must be a nonnegative 2x2 table")
    n = tab.sum()
    if n <= 0.0:
        raise DomainError("empty table")
    p1 = (tab[1, 0] + tab[1, 1]) / n
    p2 = (tab[0, 1] + tab[1, 1]) / n
    if min(p1, p2) <= 0.0 or max(p1, p2) >= 1.0:
        raise DomainError("both margins must be strictly between 0 and 1")
    t1 = -ndtri(p1)  # P(T1 > t1) = p1
    t2 = -ndtri(p2)
    p11 = tab[1, 1] / n

    def gap(rho):
        return float(bvn_upper(t1, t2, rho)) - p11

    lo, hi = gap(-_TETRA_BOUND), gap(_TETRA_BOUND)
    # gap is increasing in rho; boundary tables fall outside the bracket
    if lo >= 0.0:
        return -_TETRA_BOUND
    if hi <= 0.0:
        return _TETRA_BOUND
    return float(brentq(gap, -_TETRA_BOUND, _TETRA_BOUND, xtol=1e-12))
