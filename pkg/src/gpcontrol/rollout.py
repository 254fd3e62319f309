"""Multi-step belief propagation and analytic policy gradients.

One time step chains five differentiable stages:

1. augment the state belief with sines/cosines of the angle dimensions;
2. compute the control distribution from the policy (its input is a
   coordinate subset of the augmented vector) and extend to the joint
   Gaussian over [augmented state, control], using the policy's
   cross-covariance gain;
3. select the model input [raw state, control];
4. predict the state change with the dynamics model (moment matching or
   posterior linearization) and extend to the joint over [input, change];
5. apply the linear successor map x' = x + delta, which folds the change
   covariance and both cross-covariance blocks into the next-state
   covariance.

Every stage carries a dense Jacobian between flattened belief moments
(`chain` layout), so the step Jacobian is a matrix product and the
gradient of the total expected cost with respect to the policy
parameters accumulates forward in time:

    d b_{t+1}/d theta = J_step d b_t/d theta + B_step,
    dJ/d theta += dE_{t+1}/d b_{t+1} d b_{t+1}/d theta,

where B_step enters only through the policy stage. Costs are evaluated
on every belief including the initial one (whose term carries no
gradient).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .beliefs import GaussianBelief
from .chain import (
    assemble_jacobian,
    flat_dim,
    linear_map_jacobian,
    pack,
    selection_jacobian,
)
from .errors import DivergedRolloutError
from .inference import (
    linearize_predict,
    linearize_predict_gradients,
    moment_match,
    moment_match_gradients,
)
from .policy import control_moments
from .trig import augment_with_trig
from .validation import symmetrize

DIVERGENCE_FACTOR = 1e6
DIVERGENCE_FLOOR = 1.0  # squared state units; guards zero-covariance starts


@dataclass(frozen=True)
class RolloutReport:
    """Predicted beliefs, per-step expected costs, total cost, gradient."""

    beliefs: list
    step_costs: np.ndarray
    total_cost: float
    grad: np.ndarray | None

    def save(self, path):
        """Tabular text: time index, state mean, diagonal variance, cost."""
        d = self.beliefs[0].dim
        with open(path, "w", encoding="utf-8") as fh:
            cols = (["step"] + [f"mean{i}" for i in range(d)]
                    + [f"var{i}" for i in range(d)] + ["expected_cost"])
            fh.write("# " + "\t".join(cols) + "\n")
            for t, belief in enumerate(self.beliefs):
                row = ([float(t)] + list(belief.mean)
                       + list(np.diag(belief.cov)) + [self.step_costs[t]])
                fh.write("\t".join(f"{v:.12g}" for v in row) + "\n")


class BeliefPropagator:
    """Cascades one-step predictions through a fitted dynamics model.

    method: 'moment_match' (exact output moments) or 'linearize'
    (posterior-mean linearization). With `bayesian=False` the model
    uncertainty term is dropped from predictions (noise is kept), the
    deterministic-mean ablation.
    """

    def __init__(self, model, angle_dims, control_dim, method="moment_match",
                 bayesian=True):
        self.model = model
        self.angle_dims = tuple(angle_dims)
        self.state_dim = model.num_outputs
        self.control_dim = control_dim
        if model.input_dim != self.state_dim + control_dim:
            raise ValueError("model input dim is not state + control")
        if method not in ("moment_match", "linearize"):
            raise ValueError(f"unknown inference method {method!r}")
        self.method = method
        self.bayesian = bayesian

    # -- policy input bookkeeping ------------------------------------------
    @property
    def aug_dim(self):
        return self.state_dim + 2 * len(self.angle_dims)

    @property
    def policy_indices(self):
        d = self.state_dim
        non_angle = [i for i in range(d) if i not in self.angle_dims]
        return non_angle + list(range(d, self.aug_dim))

    # -- single step ---------------------------------------------------------
    def step(self, policy, belief, want_grads=False):
        """One-step successor belief, optionally with all partials.

        Returns (belief_next, info) where info carries the control
        moments and, when want_grads is set, 'jac' (flat state to flat
        state) and 'dtheta' (flat state by parameter count).
        """
        d = self.state_dim
        f = self.control_dim
        mean, cov = belief.mean, belief.cov

        # stage 1: trig augmentation
        m_w, v_w, jac_aug = augment_with_trig(mean, cov, self.angle_dims)

        # stage 2: control moments and joint over [augmented, control]
        poli = self.policy_indices
        cm = control_moments(policy, m_w[poli], v_w[np.ix_(poli, poli)],
                             want_grads=want_grads)
        da = self.aug_dim
        dv = da + f
        m_v = np.concatenate([m_w, cm.u_mean])
        c_wu = v_w[:, poli] @ cm.gain
        v_v = np.zeros((dv, dv))
        v_v[:da, :da] = v_w
        v_v[:da, da:] = c_wu
        v_v[da:, :da] = c_wu.T
        v_v[da:, da:] = cm.u_cov
        v_v = symmetrize(v_v)

        # stage 3: model input [x, u]
        sel = list(range(d)) + list(range(da, dv))
        m_in = m_v[sel]
        v_in = v_v[np.ix_(sel, sel)]

        # stage 4: dynamics prediction
        input_belief = GaussianBelief(m_in, _nearest_psd(v_in))
        if want_grads:
            pred, grads = self._predict_grads(input_belief)
        else:
            pred, grads = self._predict(input_belief), None

        # stage 5: successor moments
        mean_next = mean + pred.delta_mean
        c_xd = pred.input_delta_cross_cov[:d]
        cov_next = symmetrize(cov + pred.delta_cov + c_xd + c_xd.T)
        belief_next = GaussianBelief(mean_next, _nearest_psd(cov_next))

        info = {"control": cm, "prediction": pred}
        if not want_grads:
            return belief_next, info

        jac_pol, dtheta_pol = self._policy_stage_jacobian(
            cm, m_w, v_w, policy.param_count)
        jac_sel = selection_jacobian(sel, dv)
        jac_gp = self._gp_stage_jacobian(pred, grads, d + f)
        succ = np.zeros((d, d + f + d))
        succ[:, :d] = np.eye(d)
        succ[:, d + f:] = np.eye(d)
        jac_succ = linear_map_jacobian(succ, d + f + d)

        after_policy = jac_succ @ jac_gp @ jac_sel
        info["jac"] = after_policy @ jac_pol @ jac_aug
        info["dtheta"] = after_policy @ dtheta_pol
        return belief_next, info

    def _predict(self, input_belief):
        if self.method == "moment_match":
            return moment_match(self.model, input_belief,
                                include_model_uncertainty=self.bayesian)
        return linearize_predict(self.model, input_belief,
                                 include_model_uncertainty=self.bayesian)

    def _predict_grads(self, input_belief):
        if self.method == "moment_match":
            return moment_match_gradients(
                self.model, input_belief,
                include_model_uncertainty=self.bayesian)
        return linearize_predict_gradients(
            self.model, input_belief, include_model_uncertainty=self.bayesian)

    def _policy_stage_jacobian(self, cm, m_w, v_w, param_count):
        """Flat Jacobian of [w, u] moments w.r.t. w moments and theta."""
        da = self.aug_dim
        f = self.control_dim
        dv = da + f
        poli = self.policy_indices
        n_in = len(poli)

        dm_dm = np.zeros((dv, da))
        dm_dv = np.zeros((dv, da, da))
        dv_dm = np.zeros((dv, dv, da))
        dv_dv = np.zeros((dv, dv, da, da))
        dm_dth = np.zeros((dv, param_count))
        dv_dth = np.zeros((dv, dv, param_count))

        dm_dm[:da] = np.eye(da)
        # u-mean rows: chain through the policy-input selection
        for a in range(f):
            for k, src in enumerate(poli):
                dm_dm[da + a, src] += cm.d_mean["mu"][a, k]
            _scatter_sym(dm_dv[da + a], cm.d_mean["sigma"][a], poli)
        dm_dth[da:] = cm.d_mean["theta"]

        # covariance pass-through block for w
        for p in range(da):
            for q in range(da):
                if p == q:
                    dv_dv[p, q, p, q] = 1.0
                else:
                    dv_dv[p, q, p, q] = 0.5
                    dv_dv[p, q, q, p] = 0.5

        gain = cm.gain
        # cross block rows r < da, columns da+a: C = V[:, poli] @ gain
        for r in range(da):
            for a in range(f):
                # direct dependence on V entries (r, poli_k)
                for k, src in enumerate(poli):
                    _sym_accumulate(dv_dv[r, da + a], r, src, gain[k, a])
                # through the gain's input moments
                dgain_mu = cm.d_gain["mu"][:, a, :]      # (n_in, n_in)
                dv_dm[r, da + a] += _lift_vec(
                    v_w[r, poli] @ dgain_mu, poli, da)
                dgain_sig = cm.d_gain["sigma"][:, a, :, :]
                contracted = np.tensordot(v_w[r, poli], dgain_sig, axes=(0, 0))
                _scatter_sym_into(dv_dv[r, da + a], contracted, poli)
                dv_dth[r, da + a] += v_w[r, poli] @ cm.d_gain["theta"][:, a, :]
                dv_dm[da + a, r] = dv_dm[r, da + a]
                dv_dv[da + a, r] = dv_dv[r, da + a]
                dv_dth[da + a, r] = dv_dth[r, da + a]

        # control covariance block
        for a in range(f):
            for b in range(f):
                dv_dm[da + a, da + b] = _lift_vec(
                    cm.d_cov["mu"][a, b], poli, da)
                _scatter_sym_into(dv_dv[da + a, da + b],
                                  cm.d_cov["sigma"][a, b], poli)
                dv_dth[da + a, da + b] = cm.d_cov["theta"][a, b]

        jac = assemble_jacobian(dm_dm, dm_dv, dv_dm, dv_dv)
        dtheta = np.vstack([dm_dth, dv_dth.reshape(dv * dv, param_count)])
        return jac, dtheta

    def _gp_stage_jacobian(self, pred, grads, dj):
        """Flat Jacobian of the joint [input, delta] w.r.t. input moments."""
        e = self.state_dim
        out_dim = dj + e
        dm_dm = np.zeros((out_dim, dj))
        dm_dv = np.zeros((out_dim, dj, dj))
        dv_dm = np.zeros((out_dim, out_dim, dj))
        dv_dv = np.zeros((out_dim, out_dim, dj, dj))

        dm_dm[:dj] = np.eye(dj)
        dm_dm[dj:] = grads.d_mean_d_input_mean
        dm_dv[dj:] = grads.d_mean_d_input_cov

        for p in range(dj):
            for q in range(dj):
                if p == q:
                    dv_dv[p, q, p, q] = 1.0
                else:
                    dv_dv[p, q, p, q] = 0.5
                    dv_dv[p, q, q, p] = 0.5

        for r in range(dj):
            for a in range(e):
                dv_dm[r, dj + a] = grads.d_crosscov_d_input_mean[r, a]
                dv_dv[r, dj + a] = grads.d_crosscov_d_input_cov[r, a]
                dv_dm[dj + a, r] = dv_dm[r, dj + a]
                dv_dv[dj + a, r] = dv_dv[r, dj + a]
        for a in range(e):
            for b in range(e):
                dv_dm[dj + a, dj + b] = grads.d_cov_d_input_mean[a, b]
                dv_dv[dj + a, dj + b] = grads.d_cov_d_input_cov[a, b]

        return assemble_jacobian(dm_dm, dm_dv, dv_dm, dv_dv)

    # -- full rollout ---------------------------------------------------------
    def rollout(self, policy, init_belief, horizon, cost, want_grads=False):
        """Expected long-term cost of the policy from the initial belief.

        Sums expected immediate costs over t = 0..horizon. When
        want_grads is set, also assembles dJ/dtheta by forward
        accumulation. Raises DivergedRolloutError when the predicted
        covariance trace exceeds DIVERGENCE_FACTOR times the larger of
        the initial trace and DIVERGENCE_FLOOR.
        """
        if horizon < 1:
            raise ValueError("horizon must be at least 1")
        d = self.state_dim
        p_count = policy.param_count
        limit = DIVERGENCE_FACTOR * max(float(np.trace(init_belief.cov)),
                                        DIVERGENCE_FLOOR)

        beliefs = [init_belief]
        costs = np.empty(horizon + 1)
        costs[0], _, _ = cost.evaluate(init_belief.mean, init_belief.cov)
        grad = np.zeros(p_count) if want_grads else None
        carry = np.zeros((flat_dim(d), p_count)) if want_grads else None

        belief = init_belief
        for t in range(horizon):
            belief, info = self.step(policy, belief, want_grads=want_grads)
            trace = float(np.trace(belief.cov))
            if not np.isfinite(trace) or trace > limit:
                raise DivergedRolloutError(t + 1, trace, limit)
            beliefs.append(belief)
            if want_grads:
                carry = info["jac"] @ carry + info["dtheta"]
                value, d_mean, d_cov = cost.evaluate(
                    belief.mean, belief.cov, want_grads=True)
                costs[t + 1] = value
                grad += pack(d_mean, d_cov) @ carry
            else:
                costs[t + 1], _, _ = cost.evaluate(belief.mean, belief.cov)

        return RolloutReport(
            beliefs=beliefs,
            step_costs=costs,
            total_cost=float(np.sum(costs)),
            grad=grad,
        )


def _nearest_psd(cov):
    """Clip round-off negative eigenvalues introduced by chained updates.

    The Gaussian joint over [state, control] is assembled from exact
    pairwise moments; tiny negative eigenvalues (relative to trace)
    appear at round-off scale and are clipped to keep downstream
    Cholesky factorizations stable. Anything worse propagates to the
    belief constructor, which raises.
    """
    cov = symmetrize(cov)
    w, v = np.linalg.eigh(cov)
    floor = -1e-10 * max(float(np.trace(cov)), 1e-300)
    if w[0] >= 0.0:
        return cov
    if w[0] < floor:
        return cov  # let the strict PSD check raise with full context
    w = np.maximum(w, 0.0)
    return symmetrize(v @ np.diag(w) @ v.T)


def _scatter_sym(target, sub, indices):
    """target[(p, q)] += sub over the index subset, symmetrized layout."""
    for i, p in enumerate(indices):
        for j, q in enumerate(indices):
            target[p, q] += sub[i, j]


def _scatter_sym_into(target, sub, indices):
    _scatter_sym(target, sub, indices)


def _sym_accumulate(target, i, j, val):
    """Symmetrized single-entry derivative: split across (i, j), (j, i)."""
    if i == j:
        target[i, i] += val
    else:
        target[i, j] += 0.5 * val
        target[j, i] += 0.5 * val


def _lift_vec(vec, indices, dim):
    out = np.zeros(dim)
    for i, p in enumerate(indices):
        out[p] += vec[i]
    return out
