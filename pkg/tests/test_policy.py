"""Controllers: squashing, preliminary moments, parameter gradients."""

import numpy as np
import pytest

from gpcontrol.gradcheck import (
    fd_symmetric_matrix,
    fd_vector,
    max_rel_err,
)
from gpcontrol.policy import (
    LinearPolicy,
    RbfPolicy,
    control_moments,
    evaluate,
    load_policy,
    policy_from_dict,
    save_policy,
    squash,
    squash_moments,
)


def make_rbf(rng, n=6, d=3, f=2, u_max=None):
    if u_max is None:
        u_max = np.full(f, 2.0)
    return RbfPolicy(
        centers=rng.normal(size=(n, d)),
        log_length_scales=rng.normal(scale=0.3, size=(f, d)),
        targets=0.5 * rng.normal(size=(n, f)),
        u_max=u_max,
    )


class TestSquash:
    def test_odd_at_zero(self):
        assert squash(0.0) == 0.0

    def test_normalized_at_half_pi(self):
        assert squash(np.pi / 2) == pytest.approx(1.0, abs=1e-15)

    def test_grid_max_is_one(self):
        z = np.linspace(-np.pi / 2, np.pi / 2, 200001)
        vals = squash(z)
        assert np.max(np.abs(vals)) == pytest.approx(1.0, abs=1e-12)

    def test_monotone_on_principal_interval(self):
        z = np.linspace(-np.pi / 2, np.pi / 2, 10001)
        assert np.all(np.diff(squash(z)) >= 0)

    def test_global_bound(self):
        z = np.linspace(-10, 10, 100001)
        assert np.max(np.abs(squash(z))) <= 1.25


class TestSquashMoments:
    def test_deterministic_zero(self):
        u_mean, u_cov, _, _ = squash_moments(
            np.zeros(1), np.zeros((1, 1)), np.array([3.0]))
        assert u_mean[0] == 0.0
        assert u_cov[0, 0] == 0.0

    def test_odd_symmetry_zero_mean(self):
        for var in (0.1, 1.0, 4.0):
            u_mean, _, _, _ = squash_moments(
                np.zeros(2), var * np.eye(2), np.array([1.0, 5.0]))
            np.testing.assert_allclose(u_mean, 0.0, atol=1e-15)

    def test_against_monte_carlo_scalar(self):
        rng = np.random.default_rng(0)
        n = 10**7
        z = rng.normal(0.7, np.sqrt(0.3), size=n)
        u = 10.0 * squash(z)
        u_mean, u_cov, _, _ = squash_moments(
            np.array([0.7]), np.array([[0.3]]), np.array([10.0]))
        assert abs(u.mean() - u_mean[0]) < 3 * u.std() / np.sqrt(n)
        var_se = u.var() * np.sqrt(2.0 / n)
        assert abs(u.var() - u_cov[0, 0]) < 3 * var_se

    def test_correlated_pair_against_monte_carlo(self):
        rng = np.random.default_rng(1)
        mean = np.array([0.4, -0.9])
        cov = np.array([[0.5, 0.3], [0.3, 0.8]])
        u_max = np.array([2.0, 3.0])
        n = 4 * 10**6
        z = rng.multivariate_normal(mean, cov, size=n)
        u = u_max * squash(z)
        u_mean, u_cov, s, _ = squash_moments(mean, cov, u_max)
        se = u.std(axis=0) / np.sqrt(n)
        assert np.all(np.abs(u.mean(axis=0) - u_mean) < 4 * se)
        emp = np.cov(u.T)
        assert np.max(np.abs(emp - u_cov)) < 5e-3
        # covariance gain: cov[z_a, u_a] = var(z_a) * s_a
        zc = z - mean
        uc = u - u.mean(axis=0)
        emp_zu = (zc * uc).mean(axis=0)
        np.testing.assert_allclose(emp_zu, np.diag(cov) * s, atol=5e-3)

    def test_sampled_controls_respect_limits(self):
        rng = np.random.default_rng(2)
        z = rng.normal(0.0, 10.0, size=10**5)
        u = 7.5 * squash(z)
        assert np.max(np.abs(u)) <= 7.5 * 1.25
        # after the normalization the intended bound is u_max itself on
        # the principal branch; extreme prelim values stay within the
        # global Fourier bound
        u_principal = 7.5 * squash(np.clip(z, -np.pi / 2, np.pi / 2))
        assert np.max(np.abs(u_principal)) <= 7.5 + 1e-9

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        mean = rng.normal(size=2)
        a = rng.normal(size=(2, 2)) * 0.5
        cov = a @ a.T
        u_max = np.array([2.0, 3.0])
        _, _, _, grads = squash_moments(mean, cov, u_max, want_grads=True)

        for out_idx, key_mu, key_sig in (
            (0, "d_mean_dmu", "d_mean_dsigma"),
            (1, "d_cov_dmu", "d_cov_dsigma"),
            (2, "d_s_dmu", "d_s_dsigma"),
        ):
            fd_mu = fd_vector(
                lambda m: squash_moments(m, cov, u_max)[out_idx], mean)
            fd_sig = fd_symmetric_matrix(
                lambda v: squash_moments(mean, v, u_max)[out_idx], cov)
            assert max_rel_err(grads[key_mu], fd_mu) < 1e-6, key_mu
            assert max_rel_err(grads[key_sig], fd_sig) < 1e-6, key_sig


class TestParameterCounts:
    def test_cartpole_rbf_count(self):
        rng = np.random.default_rng(0)
        pol = make_rbf(rng, n=50, d=5, f=1, u_max=np.array([10.0]))
        assert pol.param_count == 305

    def test_double_pendulum_rbf_count(self):
        rng = np.random.default_rng(0)
        pol = make_rbf(rng, n=100, d=6, f=2, u_max=np.array([3.0, 3.0]))
        assert pol.param_count == 812

    def test_linear_count(self):
        pol = LinearPolicy(np.zeros((2, 4)), np.zeros(2), np.ones(2))
        assert pol.param_count == 2 * 5


class TestLinearPolicy:
    def test_deterministic_input(self):
        pol = LinearPolicy([[1.0, -2.0]], [0.5], [10.0])
        mu = np.array([0.3, 0.1])
        res = pol.prelim_moments(mu, np.zeros((2, 2)))
        assert res.mean[0] == pytest.approx(0.3 - 0.2 + 0.5)
        assert res.cov[0, 0] == 0.0

    def test_exact_gaussian_propagation(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=2)
        pol = LinearPolicy(a, b, np.ones(2))
        mu = rng.normal(size=3)
        c = rng.normal(size=(3, 3)) * 0.5
        sigma = c @ c.T
        res = pol.prelim_moments(mu, sigma)
        np.testing.assert_allclose(res.mean, a @ mu + b, atol=1e-14)
        np.testing.assert_allclose(res.cov, a @ sigma @ a.T, atol=1e-14)
        np.testing.assert_allclose(sigma @ res.gain, sigma @ a.T, atol=1e-14)

    def test_offset_gradient_is_identity_through_chain(self):
        pol = LinearPolicy(np.zeros((2, 3)), np.zeros(2), np.ones(2))
        mu = np.zeros(3)
        res = pol.prelim_moments(mu, np.eye(3) * 0.1, want_grads=True)
        d_b = res.d_mean["theta"][:, 6:]
        np.testing.assert_array_equal(d_b, np.eye(2))


class TestRbfPolicy:
    def test_deterministic_input_matches_kernel_expansion(self):
        rng = np.random.default_rng(5)
        pol = make_rbf(rng)
        mu = rng.normal(size=3)
        res = pol.prelim_moments(mu, np.zeros((3, 3)))
        np.testing.assert_allclose(res.mean, pol.prelim(mu), atol=1e-12)
        np.testing.assert_allclose(res.cov, 0.0, atol=1e-12)

    def test_moments_against_monte_carlo(self):
        rng = np.random.default_rng(6)
        pol = make_rbf(rng, n=5, d=2, f=2)
        mu = rng.normal(size=2) * 0.5
        a = rng.normal(size=(2, 2)) * 0.6
        sigma = a @ a.T
        res = pol.prelim_moments(mu, sigma)
        n = 10**6
        x = rng.multivariate_normal(mu, sigma, size=n)
        z = np.column_stack([
            np.exp(-0.5 * np.sum(((x[:, None, :] - pol.centers[None]) ** 2)
                                 / np.exp(2 * pol.log_length_scales[a_]),
                                 axis=2)) @ np.linalg.solve(
                _gram(pol, a_), pol.targets[:, a_])
            for a_ in range(2)
        ])
        se = z.std(axis=0) / np.sqrt(n)
        assert np.all(np.abs(z.mean(axis=0) - res.mean) < 4 * se + 1e-12)
        emp = np.cov(z.T)
        assert np.max(np.abs(emp - res.cov)) < 4e-3
        emp_cross = (x - mu).T @ (z - z.mean(axis=0)) / (n - 1)
        np.testing.assert_allclose(emp_cross, sigma @ res.gain, atol=4e-3)

    def test_no_model_uncertainty_in_diagonal(self):
        # at zero input covariance the output covariance is exactly zero,
        # unlike a probabilistic GP which would keep its posterior variance
        rng = np.random.default_rng(7)
        pol = make_rbf(rng)
        res = pol.prelim_moments(rng.normal(size=3), np.zeros((3, 3)))
        np.testing.assert_allclose(res.cov, 0.0, atol=1e-12)

    def test_input_moment_gradients(self):
        rng = np.random.default_rng(8)
        pol = make_rbf(rng, n=5, d=2, f=2)
        mu = rng.normal(size=2)
        a = rng.normal(size=(2, 2)) * 0.4
        sigma = a @ a.T
        res = pol.prelim_moments(mu, sigma, want_grads=True)

        for attr, key in (("mean", "d_mean"), ("cov", "d_cov"),
                          ("gain", "d_gain")):
            fd_mu = fd_vector(
                lambda m: getattr(pol.prelim_moments(m, sigma), attr), mu)
            fd_sig = fd_symmetric_matrix(
                lambda v: getattr(pol.prelim_moments(mu, v), attr), sigma)
            assert max_rel_err(getattr(res, key)["mu"], fd_mu) < 1e-5, attr
            assert max_rel_err(getattr(res, key)["sigma"], fd_sig) < 1e-5, attr

    def test_parameter_gradients(self):
        rng = np.random.default_rng(9)
        pol = make_rbf(rng, n=4, d=2, f=2)
        mu = rng.normal(size=2)
        a = rng.normal(size=(2, 2)) * 0.4
        sigma = a @ a.T
        res = pol.prelim_moments(mu, sigma, want_grads=True)
        theta0 = pol.get_theta()

        for attr, key in (("mean", "d_mean"), ("cov", "d_cov"),
                          ("gain", "d_gain")):
            fd = fd_vector(
                lambda th: getattr(
                    pol.with_theta(th).prelim_moments(mu, sigma), attr),
                theta0, step=1e-6)
            assert max_rel_err(getattr(res, key)["theta"], fd) < 1e-5, attr

    def test_far_center_gradient_vanishes(self):
        rng = np.random.default_rng(10)
        pol = make_rbf(rng, n=4, d=2, f=1)
        centers = pol.centers.copy()
        centers[0] = 50.0  # > 10 length-scales away
        pol = RbfPolicy(centers, pol.log_length_scales, pol.targets, pol.u_max)
        res = pol.prelim_moments(np.zeros(2), 0.1 * np.eye(2), want_grads=True)
        n, d = 4, 2
        grad_center0 = res.d_mean["theta"][:, :d]
        assert np.max(np.abs(grad_center0)) < 1e-8


def _gram(pol, a):
    lam = np.exp(2 * pol.log_length_scales[a])
    diff = pol.centers[:, None, :] - pol.centers[None, :, :]
    k = np.exp(-0.5 * np.sum(diff**2 / lam, axis=2))
    return k + 0.01 * np.eye(pol.num_basis)


class TestControlMoments:
    def test_linear_chain_against_monte_carlo(self):
        rng = np.random.default_rng(11)
        pol = LinearPolicy(rng.normal(size=(1, 2)), rng.normal(size=1),
                           np.array([10.0]))
        mu = rng.normal(size=2)
        a = rng.normal(size=(2, 2)) * 0.4
        sigma = a @ a.T
        cm = control_moments(pol, mu, sigma)
        n = 10**6
        x = rng.multivariate_normal(mu, sigma, size=n)
        u = (pol.u_max * squash(x @ pol.weights.T + pol.offset))
        se = u.std(axis=0) / np.sqrt(n)
        assert abs(u.mean() - cm.u_mean[0]) < 4 * se[0]
        assert abs(u.var() - cm.u_cov[0, 0]) < 4 * u.var() * np.sqrt(2 / n)
        emp_cross = (x - mu).T @ (u - u.mean(axis=0)) / (n - 1)
        np.testing.assert_allclose(emp_cross, cm.cross_cov, atol=2e-2)

    def test_control_mean_inside_limits(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            pol = make_rbf(rng, n=5, d=2, f=2, u_max=np.array([3.0, 1.0]))
            mu = rng.normal(size=2)
            a = rng.normal(size=(2, 2))
            cm = control_moments(pol, mu, a @ a.T)
            assert np.all(np.abs(cm.u_mean) < pol.u_max)

    def test_full_gradients_rbf(self):
        rng = np.random.default_rng(13)
        pol = make_rbf(rng, n=4, d=3, f=2)
        mu = rng.normal(size=3)
        a = rng.normal(size=(3, 3)) * 0.3
        sigma = a @ a.T
        cm = control_moments(pol, mu, sigma, want_grads=True)
        theta0 = pol.get_theta()

        # outputs are O(0.1..1); entries below 3e-6 sit at the FD noise
        # floor for the composed chain and are compared absolutely
        for attr, dkey in (("u_mean", "d_mean"), ("u_cov", "d_cov"),
                           ("gain", "d_gain")):
            grads = getattr(cm, dkey)
            fd = fd_vector(
                lambda th: getattr(
                    control_moments(pol.with_theta(th), mu, sigma), attr),
                theta0, step=1e-6)
            assert max_rel_err(grads["theta"], fd, floor=3e-6) < 1e-5, attr
            fd_mu = fd_vector(
                lambda m: getattr(control_moments(pol, m, sigma), attr), mu)
            assert max_rel_err(grads["mu"], fd_mu, floor=3e-6) < 1e-5, attr
            fd_sig = fd_symmetric_matrix(
                lambda v: getattr(control_moments(pol, mu, v), attr), sigma)
            assert max_rel_err(grads["sigma"], fd_sig, floor=3e-6) < 1e-5, attr

    def test_full_gradients_linear(self):
        rng = np.random.default_rng(14)
        pol = LinearPolicy(rng.normal(size=(2, 3)) * 0.5, rng.normal(size=2),
                           np.array([2.0, 4.0]))
        mu = rng.normal(size=3)
        a = rng.normal(size=(3, 3)) * 0.3
        sigma = a @ a.T
        cm = control_moments(pol, mu, sigma, want_grads=True)
        theta0 = pol.get_theta()
        for attr, dkey in (("u_mean", "d_mean"), ("u_cov", "d_cov"),
                           ("gain", "d_gain")):
            fd = fd_vector(
                lambda th: getattr(
                    control_moments(pol.with_theta(th), mu, sigma), attr),
                theta0, step=1e-6)
            assert max_rel_err(getattr(cm, dkey)["theta"], fd) < 1e-5, attr


class TestSerialization:
    def test_rbf_roundtrip(self, tmp_path):
        rng = np.random.default_rng(15)
        pol = make_rbf(rng)
        path = tmp_path / "policy.json"
        save_policy(pol, path)
        loaded = load_policy(path)
        np.testing.assert_array_equal(loaded.get_theta(), pol.get_theta())
        np.testing.assert_array_equal(loaded.u_max, pol.u_max)
        x = rng.normal(size=3)
        np.testing.assert_allclose(evaluate(loaded, x), evaluate(pol, x),
                                   atol=1e-14)

    def test_linear_roundtrip(self):
        pol = LinearPolicy([[1.0, 2.0]], [3.0], [4.0])
        clone = policy_from_dict(pol.to_dict())
        np.testing.assert_array_equal(clone.get_theta(), pol.get_theta())

    def test_zero_u_max_rejected(self):
        from gpcontrol.errors import DomainError

        with pytest.raises(DomainError):
            LinearPolicy([[1.0]], [0.0], [0.0])
