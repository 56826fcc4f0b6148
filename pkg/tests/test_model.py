import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coherit.errors import DomainError
from coherit.model import (
    FixedEffects,
    VarianceComponents,
    build_covariance,
    coheritability,
    continuous_spec,
    heritability,
    mean_vector,
    pair_covariance,
)
from coherit.pedigree import NUCLEAR_KINSHIP, ROLE_ORDER, FamilyRecord, build_kinship

P1, P2, C1, C2 = ROLE_ORDER


def theta_for_targets(h1=0.61, h2=0.54, rho=0.3, gamma2=0.8, sigma_b=0.5,
                      eps1=0.7, eps2=0.6):
    """theta hitting given heritability targets exactly (by construction)."""
    s1 = np.sqrt(h1 / (1 - h1) * (sigma_b**2 + eps1**2))
    s2 = np.sqrt(h2 / (1 - h2) * (gamma2**2 * sigma_b**2 + eps2**2))
    return VarianceComponents(
        gamma=np.array([1.0, gamma2]),
        sigma_g=np.array([s1, s2]),
        sigma_b=sigma_b,
        sigma_eps=np.array([eps1, eps2]),
        rho=np.array([[1.0, rho], [rho, 1.0]]),
    )


def random_theta(rng, K=2):
    gamma = np.concatenate([[1.0], rng.uniform(0.1, 1.5, K - 1)])
    rho = np.eye(K)
    if K == 2:
        rho[0, 1] = rho[1, 0] = rng.uniform(-0.9, 0.9)
    return VarianceComponents(
        gamma=gamma,
        sigma_g=rng.uniform(0.1, 1.5, K),
        sigma_b=rng.uniform(0.0, 1.2),
        sigma_eps=rng.uniform(0.1, 1.5, K),
        rho=rho,
    )


class TestHeritability:
    def test_zero_genetic_variance(self):
        th = theta_for_targets()
        th.sigma_g = np.zeros(2)
        assert heritability(th, 1) == 0.0

    def test_arithmetic_identity(self):
        th = VarianceComponents(
            gamma=np.array([1.0]),
            sigma_g=np.array([1.0]),
            sigma_b=np.sqrt(0.5),
            sigma_eps=np.array([np.sqrt(0.5)]),
            rho=np.eye(1),
        )
        assert heritability(th, 1) == pytest.approx(0.5, abs=1e-12)

    def test_setting_targets(self):
        th = theta_for_targets()
        assert heritability(th, 1) == pytest.approx(0.61, abs=1e-12)
        assert heritability(th, 2) == pytest.approx(0.54, abs=1e-12)

    def test_zero_total_variance(self):
        th = VarianceComponents(
            gamma=np.array([1.0]),
            sigma_g=np.array([0.0]),
            sigma_b=0.0,
            sigma_eps=np.array([0.0]),
            rho=np.eye(1),
        )
        with pytest.raises(DomainError):
            heritability(th, 1)


class TestCoheritability:
    def test_zero_rho(self):
        assert coheritability(theta_for_targets(rho=0.0), 1, 2) == 0.0

    def test_paper_setting_value(self):
        # 0.3 * sqrt(0.61) * sqrt(0.54) = 0.17216...
        got = coheritability(theta_for_targets(), 1, 2)
        assert got == pytest.approx(0.3 * np.sqrt(0.61) * np.sqrt(0.54), abs=1e-12)
        assert got == pytest.approx(0.1722, abs=5e-4)

    def test_same_index_rejected(self):
        with pytest.raises(DomainError):
            coheritability(theta_for_targets(), 1, 1)

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_bounded_by_root_heritabilities(self, seed):
        th = random_theta(np.random.default_rng(seed))
        h12 = coheritability(th, 1, 2)
        bound = np.sqrt(heritability(th, 1) * heritability(th, 2))
        assert abs(h12) <= bound + 1e-12


class TestBuildCovariance:
    def test_k1_reduces_to_classic(self):
        rng = np.random.default_rng(0)
        th = random_theta(rng, K=1)
        C = NUCLEAR_KINSHIP.values
        got = build_covariance(th, NUCLEAR_KINSHIP)
        want = (
            th.sigma_b**2 * np.ones((4, 4))
            + th.sigma_g[0] ** 2 * C
            + th.sigma_eps[0] ** 2 * np.eye(4)
        )
        np.testing.assert_allclose(got, want, atol=1e-14)

    def test_identity_when_only_noise(self):
        th = VarianceComponents(
            gamma=np.array([1.0, 1.0]),
            sigma_g=np.zeros(2),
            sigma_b=0.0,
            sigma_eps=np.ones(2),
            rho=np.eye(2),
        )
        got = build_covariance(th, NUCLEAR_KINSHIP)
        np.testing.assert_allclose(got, np.eye(8), atol=1e-14)

    def test_closed_form_entries(self):
        th = theta_for_targets()
        V = build_covariance(th, NUCLEAR_KINSHIP)
        g2, sb = th.gamma[1], th.sigma_b
        s1, s2 = th.sigma_g
        e1, e2 = th.sigma_eps
        rho = th.rho[0, 1]
        # same-slot variances
        assert V[0, 0] == pytest.approx(sb**2 + s1**2 + e1**2, abs=1e-12)
        assert V[4, 4] == pytest.approx(g2**2 * sb**2 + s2**2 + e2**2, abs=1e-12)
        # same member, different phenotype (member 0: slots 0 and 4)
        assert V[0, 4] == pytest.approx(g2 * sb**2 + rho * s1 * s2, abs=1e-12)
        # parent-parent (kinship 0), same phenotype
        assert V[0, 1] == pytest.approx(sb**2, abs=1e-12)
        # parent-child (kinship 1/2), same phenotype
        assert V[0, 2] == pytest.approx(sb**2 + 0.5 * s1**2, abs=1e-12)
        # parent-child, cross phenotype
        assert V[0, 6] == pytest.approx(g2 * sb**2 + 0.5 * rho * s1 * s2, abs=1e-12)
        # parent-parent cross phenotype: shared environment only
        assert V[0, 5] == pytest.approx(g2 * sb**2, abs=1e-12)

    def test_monte_carlo_oracle(self):
        # independent generative simulation: b_i, U = L_C Z L_Sigma^T, eps
        th = theta_for_targets()
        C = NUCLEAR_KINSHIP.values
        n = 1_000_000
        rng = np.random.default_rng(77)
        L_C = np.linalg.cholesky(C)
        L_S = np.linalg.cholesky(th.genetic_cov())
        b = rng.standard_normal((n, 1, 1)) * th.sigma_b
        U = L_C @ rng.standard_normal((n, 4, 2)) @ L_S.T
        eps = rng.standard_normal((n, 4, 2)) * th.sigma_eps
        Y = th.gamma * b + U + eps  # (n, member, phenotype)
        flat = Y.transpose(0, 2, 1).reshape(n, 8)  # phenotype-major
        emp = np.cov(flat, rowvar=False)
        np.testing.assert_allclose(emp, build_covariance(th, NUCLEAR_KINSHIP), atol=3e-2)

    def test_pair_covariance_consistency(self):
        th = theta_for_targets()
        V = build_covariance(th, NUCLEAR_KINSHIP)
        assert pair_covariance(th, 1, 1, None) == pytest.approx(V[0, 0])
        assert pair_covariance(th, 1, 2, None) == pytest.approx(V[0, 4])
        assert pair_covariance(th, 1, 1, 0.5) == pytest.approx(V[0, 2])
        assert pair_covariance(th, 1, 2, 0.0) == pytest.approx(V[0, 5])
        assert pair_covariance(th, 2, 2, 0.5) == pytest.approx(V[4, 6])

    @given(st.integers(0, 100_000))
    @settings(max_examples=150, deadline=None)
    def test_symmetric_psd(self, seed):
        th = random_theta(np.random.default_rng(seed))
        V = build_covariance(th, NUCLEAR_KINSHIP)
        np.testing.assert_allclose(V, V.T, atol=1e-12)
        assert np.linalg.eigvalsh(V).min() >= -1e-10

    def test_invalid_theta_rejected(self):
        th = theta_for_targets()
        th.rho = np.array([[1.0, 1.4], [1.4, 1.0]])
        with pytest.raises(DomainError):
            build_covariance(th, NUCLEAR_KINSHIP)


class TestMeanVector:
    def make_family(self, roles=ROLE_ORDER, p=3, seed=0):
        rng = np.random.default_rng(seed)
        n = len(roles)
        X = rng.normal(size=(n, p))
        return FamilyRecord(
            family_id="f",
            roles=tuple(roles),
            covariates=(X, X),
            phenotypes=np.zeros((n, 2)),
        )

    def test_zero_beta(self):
        beta = FixedEffects(np.zeros(2), (np.zeros(3), np.zeros(3)))
        np.testing.assert_array_equal(mean_vector(beta, self.make_family()), np.zeros(8))

    def test_intercept_only(self):
        beta = FixedEffects(np.array([2.5, -1.0]), (np.zeros(3), np.zeros(3)))
        mv = mean_vector(beta, self.make_family())
        np.testing.assert_allclose(mv[:4], 2.5)
        np.testing.assert_allclose(mv[4:], -1.0)

    def test_matches_dot_product_oracle(self):
        rng = np.random.default_rng(9)
        fam = self.make_family(seed=9)
        beta = FixedEffects(rng.normal(size=2), (rng.normal(size=3), rng.normal(size=3)))
        mv = mean_vector(beta, fam)
        for k in range(2):
            for m in range(4):
                want = beta.intercepts[k] + float(
                    np.dot(fam.covariates[k][m], beta.slopes[k])
                )
                assert mv[k * 4 + m] == pytest.approx(want, abs=1e-12)

    def test_absent_members_zero(self):
        fam = self.make_family(roles=(P1, C2), seed=3)
        beta = FixedEffects(np.ones(2), (np.zeros(3), np.zeros(3)))
        mv = mean_vector(beta, fam)
        assert mv[0] == 1.0 and mv[3] == 1.0
        assert mv[1] == 0.0 and mv[2] == 0.0

    def test_dimension_mismatch(self):
        beta = FixedEffects(np.zeros(2), (np.zeros(5), np.zeros(5)))
        with pytest.raises(DomainError):
            mean_vector(beta, self.make_family())


class TestSerialization:
    def test_theta_round_trip(self):
        th = theta_for_targets()
        d = th.to_dict()
        assert set(d) == {
            "gamma2", "sigma1", "sigma2", "sigma_b",
            "sigma_eps1", "sigma_eps2", "rho12",
        }
        back = VarianceComponents.from_dict(d, K=2)
        np.testing.assert_allclose(back.gamma, th.gamma)
        np.testing.assert_allclose(back.sigma_g, th.sigma_g)
        np.testing.assert_allclose(back.rho, th.rho)

    def test_beta_round_trip(self):
        spec = continuous_spec(K=2, p=4)
        rng = np.random.default_rng(1)
        beta = FixedEffects(rng.normal(size=2), tuple(rng.normal(size=4) for _ in range(2)))
        d = beta.to_dict(spec)
        assert "alpha1" in d and "beta2_4" in d
        back = FixedEffects.from_dict(d, spec)
        np.testing.assert_allclose(back.flatten(), beta.flatten())
