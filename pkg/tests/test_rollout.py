"""Belief rollouts: one-step MC oracle, chain consistency, dJ/dtheta vs FD."""

import numpy as np
import pytest

from gpcontrol import GaussianBelief
from gpcontrol.cost import CostConfig, CostSpaceMap, SaturatingStateCost
from gpcontrol.envs import cartpole_spec, policy_input_indices, task_cost
from gpcontrol.errors import DivergedRolloutError
from gpcontrol.gp import GpHyperparams, GpModel
from gpcontrol.gradcheck import fd_vector, max_rel_err
from gpcontrol.policy import (
    LinearPolicy,
    RbfPolicy,
    control_moments,
    evaluate,
    squash,
)
from gpcontrol.rollout import BeliefPropagator, RolloutReport


def tiny_system(rng, d=2, f=1, n=8, angle_dims=(), policy="linear"):
    """Small random dynamics model + policy + quadratic-free cost."""
    dj = d + f
    x = rng.normal(size=(n, dj))
    y = 0.3 * rng.normal(size=(n, d))
    hyper = [
        GpHyperparams(
            length_scales=rng.uniform(0.8, 2.0, size=dj),
            signal_var=rng.uniform(0.3, 1.0),
            noise_var=0.01,
        )
        for _ in range(d)
    ]
    model = GpModel(x, y, hyper)
    k = len(angle_dims)
    d_in = d + k
    if policy == "linear":
        pol = LinearPolicy(0.3 * rng.normal(size=(f, d_in)),
                           0.1 * rng.normal(size=f), np.full(f, 3.0))
    else:
        pol = RbfPolicy(rng.normal(size=(4, d_in)),
                        0.2 * rng.normal(size=(f, d_in)),
                        0.4 * rng.normal(size=(4, f)), np.full(f, 3.0))
    aug = d + 2 * k
    mat = np.zeros((d, aug))
    mat[:, :d] = np.eye(d)
    cmap = CostSpaceMap(state_dim=d, angle_dims=list(angle_dims), matrix=mat)
    cfg = CostConfig.selector(rng.normal(size=d) * 0.3, np.ones(d), 0.7)
    cost = SaturatingStateCost(cmap, cfg)
    prop = BeliefPropagator(model, angle_dims, f)
    return model, pol, cost, prop


class TestStep:
    def test_one_step_against_monte_carlo(self):
        # the composed step is exact per stage for Gaussian inputs but
        # Gaussianizes the trig-augmented joint in between, so against the
        # true sampled path the moments carry a width-dependent bias
        # (sin/cos live on a circle the Gaussian approximation smears);
        # at these widths the bias is below ~1.5% of the state spread for
        # the mean and ~10% relative for covariance entries
        rng = np.random.default_rng(0)
        model, pol, cost, prop = tiny_system(rng, angle_dims=(1,),
                                             policy="rbf")
        mean = rng.normal(size=2) * 0.5
        a = rng.normal(size=(2, 2)) * 0.15
        belief = GaussianBelief(mean, a @ a.T)
        nxt, info = prop.step(pol, belief)

        n = 2 * 10**5
        xs = belief.sample(rng, size=n)
        nexts = np.empty_like(xs)
        from gpcontrol.gp import se_kernel_matrix
        from scipy.linalg import solve_triangular

        aug = np.column_stack([xs, np.sin(xs[:, 1]), np.cos(xs[:, 1])])
        poli = prop.policy_indices
        us = np.array([evaluate(pol, row) for row in aug[:, poli]])
        inputs = np.column_stack([xs, us])
        for a_ in range(2):
            hp = model.hyperparams[a_]
            kstar = se_kernel_matrix(inputs, hp, model.inputs)
            mu_d = kstar @ model.beta[a_]
            sol = solve_triangular(model.chol[a_], kstar.T, lower=True)
            var_d = np.maximum(hp.signal_var - np.sum(sol**2, axis=0), 0.0)
            draw = (mu_d + np.sqrt(var_d) * rng.normal(size=n)
                    + np.sqrt(hp.noise_var) * rng.normal(size=n))
            nexts[:, a_] = xs[:, a_] + draw

        spread = nexts.std(axis=0)
        se_mean = spread / np.sqrt(n)
        gap = np.abs(nexts.mean(axis=0) - nxt.mean)
        assert np.all(gap < np.maximum(4 * se_mean, 0.015 * spread))
        emp_cov = np.cov(nexts.T)
        for i in range(2):
            for j in range(2):
                se = np.sqrt((emp_cov[i, i] * emp_cov[j, j]
                              + emp_cov[i, j] ** 2) / n)
                tol = max(4 * se, 0.10 * abs(emp_cov[i, j]))
                assert abs(emp_cov[i, j] - nxt.cov[i, j]) < tol

    def test_one_step_tight_without_angles(self):
        # with no angle dimensions and a linear preliminary policy the
        # only Gaussianized junction is the squashed-control joint feeding
        # the model, so the residual bias is far smaller than with trig
        # augmentation in the chain
        rng = np.random.default_rng(20)
        model, pol, cost, prop = tiny_system(rng, angle_dims=(),
                                             policy="linear")
        mean = rng.normal(size=2) * 0.5
        a = rng.normal(size=(2, 2)) * 0.15
        belief = GaussianBelief(mean, a @ a.T)
        nxt, _ = prop.step(pol, belief)

        n = 4 * 10**5
        xs = belief.sample(rng, size=n)
        us = np.array([evaluate(pol, row) for row in xs])
        inputs = np.column_stack([xs, us])
        nexts = np.empty_like(xs)
        from gpcontrol.gp import se_kernel_matrix
        from scipy.linalg import solve_triangular

        for a_ in range(2):
            hp = model.hyperparams[a_]
            kstar = se_kernel_matrix(inputs, hp, model.inputs)
            mu_d = kstar @ model.beta[a_]
            sol = solve_triangular(model.chol[a_], kstar.T, lower=True)
            var_d = np.maximum(hp.signal_var - np.sum(sol**2, axis=0), 0.0)
            nexts[:, a_] = (xs[:, a_] + mu_d
                            + np.sqrt(var_d) * rng.normal(size=n)
                            + np.sqrt(hp.noise_var) * rng.normal(size=n))

        # the GP-input joint (x, u) is still a Gaussian approximation of
        # a non-Gaussian pair, so allow a small bias band on top of SE
        spread = nexts.std(axis=0)
        gap = np.abs(nexts.mean(axis=0) - nxt.mean)
        assert np.all(gap < np.maximum(4 * spread / np.sqrt(n),
                                       0.01 * spread))
        emp_cov = np.cov(nexts.T)
        for i in range(2):
            for j in range(2):
                se = np.sqrt((emp_cov[i, i] * emp_cov[j, j]
                              + emp_cov[i, j] ** 2) / n)
                tol = max(4 * se, 0.05 * abs(emp_cov[i, j]))
                assert abs(emp_cov[i, j] - nxt.cov[i, j]) < tol

    def test_step_jacobian_against_finite_differences(self):
        rng = np.random.default_rng(1)
        model, pol, cost, prop = tiny_system(rng, angle_dims=(0,),
                                             policy="rbf")
        mean = rng.normal(size=2) * 0.5
        a = rng.normal(size=(2, 2)) * 0.3
        belief = GaussianBelief(mean, a @ a.T)
        _, info = prop.step(pol, belief, want_grads=True)

        from gpcontrol.gradcheck import fd_moment_jacobian

        def stage(m, v):
            nxt, _ = prop.step(pol, GaussianBelief(m, v))
            return nxt.mean, nxt.cov

        fd = fd_moment_jacobian(stage, belief.mean, belief.cov, step=1e-5)
        assert max_rel_err(info["jac"], fd, floor=1e-6) < 1e-4

    def test_step_theta_jacobian_against_finite_differences(self):
        rng = np.random.default_rng(2)
        model, pol, cost, prop = tiny_system(rng, angle_dims=(0,),
                                             policy="rbf")
        mean = rng.normal(size=2) * 0.5
        a = rng.normal(size=(2, 2)) * 0.3
        belief = GaussianBelief(mean, a @ a.T)
        _, info = prop.step(pol, belief, want_grads=True)
        theta0 = pol.get_theta()

        from gpcontrol.chain import pack

        def of_theta(th):
            nxt, _ = prop.step(pol.with_theta(th), belief)
            return pack(nxt.mean, nxt.cov)

        fd = fd_vector(of_theta, theta0, step=1e-5)
        assert max_rel_err(info["dtheta"], fd, floor=1e-6) < 1e-4

    def test_zero_variance_deterministic_composition(self):
        rng = np.random.default_rng(3)
        model, pol, cost, prop = tiny_system(rng, angle_dims=(), policy="linear")
        x0 = rng.normal(size=2) * 0.3
        belief = GaussianBelief.certain(x0)
        nxt, info = prop.step(pol, belief)
        u = evaluate(pol, x0)
        mu_pt, _ = model.predict_point(np.concatenate([x0, u]))
        np.testing.assert_allclose(nxt.mean, x0 + mu_pt, atol=1e-9)

    def test_successor_cov_psd_random_suite(self):
        rng = np.random.default_rng(4)
        for _ in range(15):
            model, pol, cost, prop = tiny_system(rng, angle_dims=(1,),
                                                 policy="rbf")
            mean = rng.normal(size=2) * 0.5
            a = rng.normal(size=(2, 2)) * 0.4
            belief = GaussianBelief(mean, a @ a.T)
            nxt, _ = prop.step(pol, belief)
            assert np.min(np.linalg.eigvalsh(nxt.cov)) > -1e-10


class TestRollout:
    def test_horizon_one_reduces_to_step(self):
        rng = np.random.default_rng(5)
        model, pol, cost, prop = tiny_system(rng)
        belief = GaussianBelief(rng.normal(size=2) * 0.3, 0.05 * np.eye(2))
        report = prop.rollout(pol, belief, 1, cost)
        nxt, _ = prop.step(pol, belief)
        np.testing.assert_allclose(report.beliefs[1].mean, nxt.mean,
                                   atol=1e-14)
        np.testing.assert_allclose(report.beliefs[1].cov, nxt.cov, atol=1e-14)
        assert len(report.step_costs) == 2

    def test_belief_chain_consistency(self):
        rng = np.random.default_rng(6)
        model, pol, cost, prop = tiny_system(rng, angle_dims=(0,),
                                             policy="rbf")
        belief = GaussianBelief(rng.normal(size=2) * 0.3, 0.05 * np.eye(2))
        report = prop.rollout(pol, belief, 5, cost)
        b = belief
        for t in range(5):
            b, _ = prop.step(pol, b)
            np.testing.assert_array_equal(report.beliefs[t + 1].mean, b.mean)
            np.testing.assert_array_equal(report.beliefs[t + 1].cov, b.cov)

    def test_costs_bounded_and_summed(self):
        rng = np.random.default_rng(7)
        model, pol, cost, prop = tiny_system(rng)
        belief = GaussianBelief(rng.normal(size=2) * 0.3, 0.05 * np.eye(2))
        report = prop.rollout(pol, belief, 10, cost)
        assert np.all(report.step_costs >= 0)
        assert np.all(report.step_costs <= 1)
        assert report.total_cost == pytest.approx(np.sum(report.step_costs))
        assert report.total_cost <= 11

    def test_gradient_against_finite_differences_linear(self):
        self._grad_check(policy="linear", angle_dims=(), seed=8)

    def test_gradient_against_finite_differences_rbf_angles(self):
        self._grad_check(policy="rbf", angle_dims=(1,), seed=9)

    def test_gradient_against_finite_differences_linearize(self):
        self._grad_check(policy="rbf", angle_dims=(1,), seed=10,
                         method="linearize")

    def _grad_check(self, policy, angle_dims, seed, method="moment_match"):
        rng = np.random.default_rng(seed)
        model, pol, cost, _ = tiny_system(rng, angle_dims=angle_dims,
                                          policy=policy)
        prop = BeliefPropagator(model, angle_dims, 1, method=method)
        belief = GaussianBelief(rng.normal(size=2) * 0.3, 0.04 * np.eye(2))
        horizon = 7
        report = prop.rollout(pol, belief, horizon, cost, want_grads=True)
        theta0 = pol.get_theta()
        assert report.grad.shape == theta0.shape

        def j_of(th):
            return prop.rollout(pol.with_theta(th), belief, horizon,
                                cost).total_cost

        fd = fd_vector(j_of, theta0, step=1e-5)
        assert max_rel_err(report.grad, fd, floor=1e-7) < 1e-4

    def test_method_switch_changes_cost_but_not_gradient_quality(self):
        rng = np.random.default_rng(11)
        model, pol, cost, _ = tiny_system(rng, angle_dims=(1,), policy="rbf")
        belief = GaussianBelief(rng.normal(size=2) * 0.3, 0.06 * np.eye(2))
        mm = BeliefPropagator(model, (1,), 1, method="moment_match")
        lin = BeliefPropagator(model, (1,), 1, method="linearize")
        j_mm = mm.rollout(pol, belief, 5, cost).total_cost
        j_lin = lin.rollout(pol, belief, 5, cost).total_cost
        assert j_mm != pytest.approx(j_lin, abs=1e-12)

    def test_divergence_raises_with_step_index(self):
        rng = np.random.default_rng(12)
        # a huge prior variance adds ~2 signal_var to the trace per step,
        # crossing the divergence limit right away
        x = rng.normal(size=(6, 3))
        y = 200.0 * rng.normal(size=(6, 2))
        hyper = [GpHyperparams(np.full(3, 0.3), 1e6, 0.01) for _ in range(2)]
        model = GpModel(x, y, hyper)
        pol = LinearPolicy(np.zeros((1, 2)), np.zeros(1), np.ones(1))
        prop = BeliefPropagator(model, (), 1)
        mat = np.eye(2)
        cmap = CostSpaceMap(state_dim=2, angle_dims=[], matrix=mat)
        cost = SaturatingStateCost(
            cmap, CostConfig.selector(np.zeros(2), np.ones(2), 1.0))
        belief = GaussianBelief(np.zeros(2), 0.01 * np.eye(2))
        with pytest.raises(DivergedRolloutError) as err:
            prop.rollout(pol, belief, 25, cost)
        assert err.value.step >= 1

    def test_report_save(self, tmp_path):
        rng = np.random.default_rng(13)
        model, pol, cost, prop = tiny_system(rng)
        belief = GaussianBelief(np.zeros(2), 0.05 * np.eye(2))
        report = prop.rollout(pol, belief, 3, cost)
        path = tmp_path / "report.tsv"
        report.save(path)
        rows = np.loadtxt(path)
        assert rows.shape == (4, 1 + 2 + 2 + 1)
        np.testing.assert_allclose(rows[:, -1], report.step_costs, atol=1e-10)


class TestCartpoleIntegration:
    def test_rollout_on_real_task_shapes(self):
        # fit a small model on random-control data and roll the belief out
        rng = np.random.default_rng(14)
        spec = cartpole_spec()
        from gpcontrol.envs import run_episode
        from gpcontrol.gp import fit

        ep = run_episode(spec, seed=0)
        x, y = ep.transitions()
        model = fit(x, y, restarts=1, seed=0)
        d_in = 5
        pol = RbfPolicy(rng.normal(size=(50, d_in)),
                        np.zeros((1, d_in)),
                        0.1 * rng.normal(size=(50, 1)),
                        spec.u_max)
        prop = BeliefPropagator(model, spec.angle_dims, spec.control_dim)
        cost = task_cost(spec)
        report = prop.rollout(pol, spec.init_belief(), spec.horizon_steps,
                              cost, want_grads=True)
        assert len(report.beliefs) == 26
        assert report.grad.shape == (305,)
        assert np.all(np.isfinite(report.grad))

    def test_cartpole_gradient_spot_check(self):
        # FD along a random direction for the 305-parameter policy
        rng = np.random.default_rng(15)
        spec = cartpole_spec()
        from gpcontrol.envs import run_episode
        from gpcontrol.gp import fit

        ep = run_episode(spec, seed=1)
        x, y = ep.transitions()
        model = fit(x, y, restarts=1, seed=0)
        pol = RbfPolicy(rng.normal(size=(8, 5)), np.zeros((1, 5)),
                        0.1 * rng.normal(size=(8, 1)), spec.u_max)
        prop = BeliefPropagator(model, spec.angle_dims, spec.control_dim)
        cost = task_cost(spec)
        belief = spec.init_belief()
        report = prop.rollout(pol, belief, 8, cost, want_grads=True)
        theta0 = pol.get_theta()
        direction = rng.normal(size=theta0.shape)
        direction /= np.linalg.norm(direction)
        h = 1e-5
        j_plus = prop.rollout(pol.with_theta(theta0 + h * direction), belief,
                              8, cost).total_cost
        j_minus = prop.rollout(pol.with_theta(theta0 - h * direction), belief,
                               8, cost).total_cost
        fd_dir = (j_plus - j_minus) / (2 * h)
        an_dir = float(report.grad @ direction)
        assert abs(fd_dir - an_dir) <= 1e-4 * max(abs(fd_dir), abs(an_dir), 1e-4)
