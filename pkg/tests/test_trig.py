"""Trigonometric moment identities against quadrature and MC oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpcontrol import (
    DomainError,
    joint_trig_cross_moment,
    trig_moments,
    trig_second_moments,
)
from gpcontrol.gradcheck import fd_moment_jacobian, max_rel_err
from gpcontrol.trig import augment_with_trig

GH_NODES, GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(64)
GH_WEIGHTS = GH_WEIGHTS / np.sqrt(2 * np.pi)


def gauss_hermite(f, mu, var):
    """64-node Gauss-Hermite expectation of f(x) for x ~ N(mu, var)."""
    x = mu + np.sqrt(var) * GH_NODES
    return float(np.dot(GH_WEIGHTS, f(x)))


def test_sin_zero_mean_symmetry():
    e_sin, e_cos = trig_moments(0.0, 1.0)
    assert e_sin == 0.0
    assert e_cos == pytest.approx(np.exp(-0.5), abs=1e-15)


def test_deterministic_limit():
    e_sin, e_cos = trig_moments(np.pi / 2, 0.0)
    assert e_sin == pytest.approx(1.0, abs=1e-15)
    assert e_cos == pytest.approx(0.0, abs=1e-15)


def test_harmonic_against_monte_carlo():
    rng = np.random.default_rng(7)
    n = 10**7
    x = rng.normal(0.3, np.sqrt(0.4), size=n)
    e_sin, e_cos = trig_moments(0.3, 0.4, k=2)
    for fn, closed in ((np.sin, e_sin), (np.cos, e_cos)):
        samples = fn(2 * x)
        se = samples.std() / np.sqrt(n)
        assert abs(samples.mean() - closed) < 3 * se


def test_second_moments_deterministic_zero():
    assert trig_second_moments(0.0, 0.0) == (0.0, 1.0, 0.0)


@given(
    st.floats(-10, 10, allow_nan=False),
    st.floats(0, 20, allow_nan=False),
)
@settings(max_examples=200, deadline=None)
def test_pythagorean_identity(mu, var):
    e_sin2, e_cos2, _ = trig_second_moments(mu, var)
    assert e_sin2 + e_cos2 == pytest.approx(1.0, abs=1e-12)


def test_second_moments_against_quadrature():
    mu, var = 1.1, 0.25
    e_sin2, e_cos2, e_sincos = trig_second_moments(mu, var)
    assert abs(e_sin2 - gauss_hermite(lambda x: np.sin(x) ** 2, mu, var)) < 1e-10
    assert abs(e_cos2 - gauss_hermite(lambda x: np.cos(x) ** 2, mu, var)) < 1e-10
    assert abs(
        e_sincos - gauss_hermite(lambda x: np.sin(x) * np.cos(x), mu, var)
    ) < 1e-10


def test_first_moments_against_quadrature_grid():
    rng = np.random.default_rng(3)
    for _ in range(200):
        mu = rng.uniform(-6, 6)
        var = rng.uniform(0, 4)
        k = rng.integers(1, 4)
        e_sin, e_cos = trig_moments(mu, var, k=k)
        assert abs(e_sin - gauss_hermite(lambda x: np.sin(k * x), mu, var)) < 1e-10
        assert abs(e_cos - gauss_hermite(lambda x: np.cos(k * x), mu, var)) < 1e-10


def test_negative_variance_rejected():
    with pytest.raises(DomainError):
        trig_moments(0.0, -1e-3)
    with pytest.raises(DomainError):
        trig_second_moments(0.0, -1e-3)


def test_variance_nonnegativity():
    rng = np.random.default_rng(11)
    for _ in range(500):
        mu = rng.uniform(-8, 8)
        var = rng.uniform(0, 6)
        e_sin, _ = trig_moments(mu, var)
        e_sin2, _, _ = trig_second_moments(mu, var)
        assert e_sin2 - e_sin**2 >= -1e-12


def test_vanishing_variance_recovers_deterministic_trig():
    mus = np.linspace(-3, 3, 25)
    e_sin, e_cos = trig_moments(mus, 1e-14)
    np.testing.assert_allclose(e_sin, np.sin(mus), atol=1e-6)
    np.testing.assert_allclose(e_cos, np.cos(mus), atol=1e-6)


class TestJointCrossMoment:
    def test_independent_factorizes(self):
        mean = np.array([0.4, -1.2])
        cov = np.diag([0.3, 0.7])
        val = joint_trig_cross_moment(mean, cov, harmonics=(1, 2))
        ea, _ = trig_moments(0.4, 0.3, k=1)
        eb, _ = trig_moments(-1.2, 0.7, k=2)
        assert val == pytest.approx(ea * eb, abs=1e-14)

    def test_degenerate_equals_second_moment(self):
        mu, var = 0.8, 0.5
        cov = np.full((2, 2), var)
        val = joint_trig_cross_moment([mu, mu], cov, harmonics=(1, 1))
        e_sin2, _, _ = trig_second_moments(mu, var)
        assert val == pytest.approx(e_sin2, abs=1e-14)

    def test_correlated_against_monte_carlo(self):
        rho = 0.5
        mean = np.array([0.2, -0.4])
        sa, sb = np.sqrt(0.3), np.sqrt(0.6)
        cov = np.array([[0.3, rho * sa * sb], [rho * sa * sb, 0.6]])
        rng = np.random.default_rng(21)
        n = 10**7
        z = rng.multivariate_normal(mean, cov, size=n)
        samples = np.sin(z[:, 0]) * np.sin(z[:, 1])
        se = samples.std() / np.sqrt(n)
        val = joint_trig_cross_moment(mean, cov)
        assert abs(val - samples.mean()) < 3 * se

    def test_non_psd_rejected(self):
        from gpcontrol import NotPsdError

        with pytest.raises(NotPsdError):
            joint_trig_cross_moment([0, 0], [[1.0, 2.0], [2.0, 1.0]])


class TestAugmentation:
    def test_moments_against_monte_carlo(self):
        rng = np.random.default_rng(5)
        mean = np.array([0.3, -1.0, 2.2, 0.5])
        a = rng.normal(size=(4, 4)) * 0.4
        cov = a @ a.T
        m_aug, v_aug, _ = augment_with_trig(mean, cov, angle_dims=[1, 2])
        n = 2 * 10**6
        x = rng.multivariate_normal(mean, cov, size=n)
        y = np.column_stack([
            x,
            np.sin(x[:, 1]), np.cos(x[:, 1]),
            np.sin(x[:, 2]), np.cos(x[:, 2]),
        ])
        se_m = y.std(axis=0) / np.sqrt(n)
        assert np.all(np.abs(y.mean(axis=0) - m_aug) < 4 * se_m + 1e-12)
        emp_cov = np.cov(y.T)
        # SE of covariance entries is O(1/sqrt(n)); use a generous bound
        assert np.max(np.abs(emp_cov - v_aug)) < 6e-3

    def test_jacobian_against_finite_differences(self):
        rng = np.random.default_rng(9)
        mean = rng.normal(size=3)
        a = rng.normal(size=(3, 3)) * 0.5
        cov = a @ a.T

        def stage(m, v):
            mo, vo, _ = augment_with_trig(m, v, angle_dims=[0, 2])
            return mo, vo

        _, _, jac = augment_with_trig(mean, cov, angle_dims=[0, 2])
        jac_fd = fd_moment_jacobian(stage, mean, cov)
        assert max_rel_err(jac, jac_fd) < 1e-6

    def test_zero_cov_is_deterministic_map(self):
        mean = np.array([1.0, 0.7])
        m_aug, v_aug, _ = augment_with_trig(mean, np.zeros((2, 2)), [1])
        np.testing.assert_allclose(
            m_aug, [1.0, 0.7, np.sin(0.7), np.cos(0.7)], atol=1e-15)
        np.testing.assert_allclose(v_aug, 0, atol=1e-15)
