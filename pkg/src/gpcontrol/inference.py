"""GP prediction at uncertain (Gaussian) inputs.

Two approximations of the predictive distribution p(delta) for an input
x ~ N(mu, Sigma) pushed through a fitted multi-output GP:

* `moment_match` computes the exact first two moments. The mean is
  beta_a' q_a with

      q_ai = sf2_a |Sigma Lam_a^-1 + I|^(-1/2)
             exp(-1/2 nu_i' (Sigma + Lam_a)^-1 nu_i),   nu_i = x_i - mu.

  Second moments use E[delta_a delta_b] = beta_a' Q beta_b where

      Q_ij = sf2_a sf2_b |(Lam_a^-1 + Lam_b^-1) Sigma + I|^(-1/2)
             exp(-1/2 (x_i - x_j)' (Lam_a + Lam_b)^-1 (x_i - x_j))
             exp(-1/2 d_ij' ((Lam_a^-1 + Lam_b^-1)^-1 + Sigma)^-1 d_ij),

  with d_ij the convex combination Lam_b (Lam_a + Lam_b)^-1 nu_i +
  Lam_a (Lam_a + Lam_b)^-1 nu_j. This parametrization stays finite for
  singular input covariance (it never inverts Sigma). Diagonal entries
  carry the extra expected model variance
  sf2_a - tr((K_a + noise_a I)^-1 Q) + noise_a; off-diagonals do not,
  because distinct target dimensions are conditionally independent given
  the input. The input-output cross-covariance is
  Sigma * sum_i beta_ai q_ai (Sigma + Lam_a)^-1 nu_i.

* `linearize_predict` evaluates the posterior mean at mu and maps the
  input covariance through its Jacobian V, adding constant model noise:
  Sigma_delta = V Sigma V' + diag(noise_a + var_a(mu)).

`moment_match_gradients` returns every partial derivative of the
moment-matched outputs with respect to the input mean and covariance.
Covariance derivatives use the symmetrized convention of `chain`:
gradient entries (p, q) and (q, p) are equal and contract exactly
against symmetric perturbations. Storage order is row-major over
(output, input index) and (output, p, q).

All solves go through Cholesky factorizations; determinants are
accumulated in log space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .beliefs import GaussianBelief
from .errors import DimensionError, NumericalError
from .validation import symmetrize


@dataclass(frozen=True)
class UncertainPrediction:
    """First two moments of the GP output for a Gaussian input.

    delta_mean: (E,); delta_cov: (E, E) symmetric PSD;
    input_delta_cross_cov: (D+F, E), covariance between the full input
    vector and each output (callers slice the state rows they need).
    """

    delta_mean: np.ndarray
    delta_cov: np.ndarray
    input_delta_cross_cov: np.ndarray


@dataclass(frozen=True)
class InferenceGradients:
    """Partials of the moment-matched prediction w.r.t. input moments."""

    d_mean_d_input_mean: np.ndarray        # (E, d)
    d_mean_d_input_cov: np.ndarray         # (E, d, d)
    d_cov_d_input_mean: np.ndarray         # (E, E, d)
    d_cov_d_input_cov: np.ndarray          # (E, E, d, d)
    d_crosscov_d_input_mean: np.ndarray    # (d, E, d)
    d_crosscov_d_input_cov: np.ndarray     # (d, E, d, d)


def _model_gram_inverses(model):
    """(K_a + noise_a I)^-1 per output, cached on the model instance."""
    cached = getattr(model, "_gram_inverses", None)
    if cached is None:
        eye = np.eye(model.num_points)
        cached = [cho_solve((low, True), eye) for low in model.chol]
        model._gram_inverses = cached
    return cached


def _pair_log_const(model, a, b):
    """Belief-independent part of ln Q_ij for an output pair, cached.

    ln sf2_a + ln sf2_b - 1/2 (x_i - x_j)' (Lam_a + Lam_b)^-1 (x_i - x_j):
    everything here depends only on the training inputs and
    hyperparameters, so it is shared across all rollout steps.
    """
    cache = getattr(model, "_pair_log_consts", None)
    if cache is None:
        cache = {}
        model._pair_log_consts = cache
    key = (a, b)
    if key not in cache:
        lam_a = model.hyperparams[a].length_scales**2
        lam_b = model.hyperparams[b].length_scales**2
        xs = model.inputs / np.sqrt(lam_a + lam_b)
        xsq = np.sum(xs**2, axis=1)
        sq = np.maximum(xsq[:, None] + xsq[None, :] - 2.0 * xs @ xs.T, 0.0)
        cache[key] = (np.log(model.hyperparams[a].signal_var)
                      + np.log(model.hyperparams[b].signal_var)
                      - 0.5 * sq)
    return cache[key]


def _check_input(model, belief):
    if belief.dim != model.input_dim:
        raise DimensionError(
            f"input belief has dim {belief.dim}, model expects {model.input_dim}")


class _OutputTerms:
    """Per-output quantities shared by the mean, cross-cov, and gradients."""

    def __init__(self, nu, sigma, hp, beta):
        d = sigma.shape[0]
        lam = hp.length_scales**2
        s_mat = sigma + np.diag(lam)
        try:
            low = np.linalg.cholesky(s_mat)
        except np.linalg.LinAlgError as exc:
            cond = float(np.linalg.cond(s_mat))
            raise NumericalError(
                "input covariance plus kernel length-scales is not positive "
                "definite", condition=cond) from exc
        self.s_inv = cho_solve((low, True), np.eye(d))
        # T rows are t_i = (Sigma + Lam)^-1 nu_i
        self.t = nu @ self.s_inv
        logdet_ratio = 2.0 * np.sum(np.log(np.diag(low))) - np.sum(np.log(lam))
        quad = np.einsum("ij,ij->i", nu, self.t)
        self.q = hp.signal_var * np.exp(-0.5 * (logdet_ratio + quad))
        self.w = beta * self.q
        self.mean = float(np.sum(self.w))
        self.g = self.t.T @ self.w                 # cross-cov gain vector
        self.lam = lam


class _PairTerms:
    """Q matrix for an output pair and its contraction helpers."""

    def __init__(self, nu, sigma, lam_a, lam_b, log_const):
        d = sigma.shape[0]
        inv_sum = 1.0 / lam_a + 1.0 / lam_b            # Lam_a^-1 + Lam_b^-1
        c_diag = 1.0 / inv_sum
        m_mat = np.diag(c_diag) + sigma
        try:
            low = np.linalg.cholesky(m_mat)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                "pairwise moment matrix is not positive definite",
                condition=float(np.linalg.cond(m_mat))) from exc
        self.w_mat = cho_solve((low, True), np.eye(d))
        logdet = 2.0 * np.sum(np.log(np.diag(low))) - np.sum(np.log(c_diag))
        f_a = c_diag / lam_a                            # Lam_b (Lam_a+Lam_b)^-1
        f_b = c_diag / lam_b
        self.p = nu * f_a                               # rows Fa nu_i
        self.r = nu * f_b
        self.f_a, self.f_b = f_a, f_b

        pw = self.p @ self.w_mat
        rw = self.r @ self.w_mat
        quad_p = np.einsum("ij,ij->i", pw, self.p)
        quad_r = np.einsum("ij,ij->i", rw, self.r)
        cross = pw @ self.r.T
        log_q = (log_const - 0.5 * logdet
                 - 0.5 * (quad_p[:, None] + 2.0 * cross + quad_r[None, :]))
        self.q = np.exp(log_q)
        self._pw, self._rw = pw, rw

    def contract_dmu(self, omega):
        """sum_ij omega_ij Q_ij dlnQ_ij/dmu as a length-d vector."""
        oq = omega * self.q
        row = oq.sum(axis=1)
        col = oq.sum(axis=0)
        vec = self.p.T @ row + self.r.T @ col
        return self.w_mat @ vec

    def contract_dsigma(self, omega):
        """sum_ij omega_ij dQ_ij/dSigma, symmetrized (d, d)."""
        oq = omega * self.q
        row = oq.sum(axis=1)
        col = oq.sum(axis=0)
        total = float(row.sum())
        m_mid = (self.p.T @ (self.p * row[:, None])
                 + self.p.T @ oq @ self.r
                 + self.r.T @ oq.T @ self.p
                 + self.r.T @ (self.r * col[:, None]))
        out = 0.5 * (self.w_mat @ m_mid @ self.w_mat - total * self.w_mat)
        return symmetrize(out)


def moment_match(model, belief, include_model_uncertainty=True):
    """Exact output moments of the GP at a Gaussian input.

    With `include_model_uncertainty` unset, the expected model variance
    term is dropped from the diagonal (noise variance is kept); this is
    the deterministic-mean ablation used to probe the value of Bayesian
    averaging.
    """
    pred, _ = _moment_match_impl(model, belief, include_model_uncertainty,
                                 want_gradients=False)
    return pred


def moment_match_gradients(model, belief, include_model_uncertainty=True):
    """Moment-matched prediction plus all input-moment partials."""
    return _moment_match_impl(model, belief, include_model_uncertainty,
                              want_gradients=True)


def _moment_match_impl(model, belief, include_model_uncertainty,
                       want_gradients):
    _check_input(model, belief)
    mu = belief.mean
    sigma = belief.cov
    x = model.inputs
    n, d = x.shape
    e_dim = model.num_outputs
    nu = x - mu

    outs = [
        _OutputTerms(nu, sigma, model.hyperparams[a], model.beta[a])
        for a in range(e_dim)
    ]
    mean = np.array([o.mean for o in outs])
    gains = np.column_stack([o.g for o in outs])        # (d, E)
    crosscov = sigma @ gains

    gram_inv = _model_gram_inverses(model) if include_model_uncertainty else None

    cov = np.zeros((e_dim, e_dim))
    grads = None
    if want_gradients:
        grads = InferenceGradients(
            d_mean_d_input_mean=np.stack([o.g for o in outs], axis=0),
            d_mean_d_input_cov=np.zeros((e_dim, d, d)),
            d_cov_d_input_mean=np.zeros((e_dim, e_dim, d)),
            d_cov_d_input_cov=np.zeros((e_dim, e_dim, d, d)),
            d_crosscov_d_input_mean=np.zeros((d, e_dim, d)),
            d_crosscov_d_input_cov=np.zeros((d, e_dim, d, d)),
        )
        for a, o in enumerate(outs):
            # d mean_a / d Sigma = 1/2 (T' diag(w) T - sum(w) S^-1)
            grads.d_mean_d_input_cov[a] = 0.5 * (
                o.t.T @ (o.t * o.w[:, None]) - o.mean * o.s_inv)
            _crosscov_grads(grads, a, o, sigma, nu)

    for a in range(e_dim):
        hp_a = model.hyperparams[a]
        for b in range(a, e_dim):
            hp_b = model.hyperparams[b]
            pair = _PairTerms(nu, sigma, outs[a].lam, outs[b].lam,
                              _pair_log_const(model, a, b))
            beta_outer = np.outer(model.beta[a], model.beta[b])
            e_ab = float(np.sum(beta_outer * pair.q))
            cov_ab = e_ab - mean[a] * mean[b]
            if a == b and include_model_uncertainty:
                cov_ab += (hp_a.signal_var
                           - float(np.sum(gram_inv[a] * pair.q))
                           + hp_a.noise_var)
            elif a == b:
                cov_ab += hp_a.noise_var
            cov[a, b] = cov[b, a] = cov_ab

            if want_gradients:
                dmu = pair.contract_dmu(beta_outer)
                dsig = pair.contract_dsigma(beta_outer)
                dmu -= mean[a] * outs[b].g + mean[b] * outs[a].g
                dsig = dsig - (mean[a] * grads.d_mean_d_input_cov[b]
                               + mean[b] * grads.d_mean_d_input_cov[a])
                if a == b and include_model_uncertainty:
                    dmu -= pair.contract_dmu(gram_inv[a])
                    dsig = dsig - pair.contract_dsigma(gram_inv[a])
                grads.d_cov_d_input_mean[a, b] = dmu
                grads.d_cov_d_input_cov[a, b] = dsig
                if a != b:
                    grads.d_cov_d_input_mean[b, a] = dmu
                    grads.d_cov_d_input_cov[b, a] = dsig

    pred = UncertainPrediction(
        delta_mean=mean,
        delta_cov=symmetrize(cov),
        input_delta_cross_cov=crosscov,
    )
    return pred, grads


def _crosscov_grads(grads, a, o, sigma, nu):
    """Fill d crosscov_a / d(mu, Sigma); crosscov_a = Sigma S^-1 nu' w."""
    d = sigma.shape[0]
    b_mat = sigma @ o.s_inv
    # d/dmu: B [nu' diag(w) T - sum(w) I]
    inner = nu.T @ (o.t * o.w[:, None]) - o.mean * np.eye(d)
    grads.d_crosscov_d_input_mean[:, a, :] = b_mat @ inner

    # d/dSigma, unconstrained then symmetrized:
    #   e_p (g)_q - B[:,p] (g)_q
    #   + 1/2 sum_i w_i (B nu_i) t_ip t_iq - 1/2 crosscov S^-1_pq
    g = o.g
    u = nu @ b_mat.T                                    # rows B nu_i
    term_rank1 = np.einsum("rp,q->rpq", np.eye(d) - b_mat, g)
    term_w = 0.5 * np.einsum("i,ir,ip,iq->rpq", o.w, u, o.t, o.t)
    cross = b_mat @ (nu.T @ o.w)
    term_s = -0.5 * np.einsum("r,pq->rpq", cross, o.s_inv)
    full = term_rank1 + term_w + term_s
    grads.d_crosscov_d_input_cov[:, a, :, :] = 0.5 * (
        full + np.swapaxes(full, 1, 2))


def linearize_predict(model, belief, include_model_uncertainty=True):
    """Posterior-mean linearization at the input mean.

    Cheaper than moment matching but approximate: the propagated
    covariance V Sigma V' reflects only the local slope, so wide inputs
    over curved posterior means produce overconfident predictions.
    """
    pred, _ = _linearize_impl(model, belief, include_model_uncertainty,
                              want_gradients=False)
    return pred


def linearize_predict_gradients(model, belief, include_model_uncertainty=True):
    return _linearize_impl(model, belief, include_model_uncertainty,
                           want_gradients=True)


def _linearize_impl(model, belief, include_model_uncertainty, want_gradients):
    _check_input(model, belief)
    mu = belief.mean
    sigma = belief.cov
    x = model.inputs
    n, d = x.shape
    e_dim = model.num_outputs
    diff = x - mu

    mean = np.empty(e_dim)
    v_mat = np.empty((e_dim, d))
    noise_diag = np.empty(e_dim)
    kstars = []
    dv_dmu = np.zeros((e_dim, d, d))
    dnoise_dmu = np.zeros((e_dim, d))
    for a, hp in enumerate(model.hyperparams):
        lam = hp.length_scales**2
        quad = np.einsum("ij,ij->i", diff / lam, diff)
        kstar = hp.signal_var * np.exp(-0.5 * quad)
        kstars.append(kstar)
        wk = model.beta[a] * kstar
        mean[a] = float(np.sum(wk))
        scaled = diff / lam                              # rows Lam^-1 (x_i - mu)
        v_mat[a] = scaled.T @ wk
        if include_model_uncertainty:
            sol = cho_solve((model.chol[a], True), kstar)
            var_at_mean = hp.signal_var - float(kstar @ sol)
            noise_diag[a] = hp.noise_var + max(var_at_mean, 0.0)
        else:
            sol = None
            noise_diag[a] = hp.noise_var
        if want_gradients:
            dv_dmu[a] = (scaled.T * wk) @ scaled - np.diag(np.sum(wk) / lam)
            if include_model_uncertainty:
                dk_dmu = kstar[:, None] * scaled         # (n, d)
                dnoise_dmu[a] = -2.0 * (sol @ dk_dmu)

    cov = v_mat @ sigma @ v_mat.T + np.diag(noise_diag)
    crosscov = sigma @ v_mat.T
    pred = UncertainPrediction(
        delta_mean=mean,
        delta_cov=symmetrize(cov),
        input_delta_cross_cov=crosscov,
    )
    if not want_gradients:
        return pred, None

    grads = InferenceGradients(
        d_mean_d_input_mean=v_mat.copy(),
        d_mean_d_input_cov=np.zeros((e_dim, d, d)),
        d_cov_d_input_mean=np.zeros((e_dim, e_dim, d)),
        d_cov_d_input_cov=np.zeros((e_dim, e_dim, d, d)),
        d_crosscov_d_input_mean=np.zeros((d, e_dim, d)),
        d_crosscov_d_input_cov=np.zeros((d, e_dim, d, d)),
    )
    sig_v = sigma @ v_mat.T                              # (d, E)
    for a in range(e_dim):
        for b in range(e_dim):
            # d(V_a Sigma V_b')/dmu through both Jacobian factors
            grads.d_cov_d_input_mean[a, b] = (
                dv_dmu[a].T @ sig_v[:, b] + dv_dmu[b].T @ sig_v[:, a])
            if a == b:
                grads.d_cov_d_input_mean[a, a] += dnoise_dmu[a]
            outer = np.outer(v_mat[a], v_mat[b])
            grads.d_cov_d_input_cov[a, b] = 0.5 * (outer + outer.T)
    eye = np.eye(d)
    for a in range(e_dim):
        grads.d_crosscov_d_input_mean[:, a, :] = sigma @ dv_dmu[a]
        outer = np.einsum("rp,q->rpq", eye, v_mat[a])
        grads.d_crosscov_d_input_cov[:, a, :, :] = 0.5 * (
            outer + np.swapaxes(outer, 1, 2))
    return pred, grads


def predict_uncertain(model, belief, method="moment_match",
                      include_model_uncertainty=True):
    """Dispatch between the two uncertain-input approximations."""
    if method == "moment_match":
        return moment_match(model, belief, include_model_uncertainty)
    if method == "linearize":
        return linearize_predict(model, belief, include_model_uncertainty)
    raise ValueError(f"unknown inference method {method!r}")


def as_belief(pred: UncertainPrediction) -> GaussianBelief:
    return GaussianBelief(pred.delta_mean, pred.delta_cov)
