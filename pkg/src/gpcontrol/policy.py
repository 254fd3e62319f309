"""Bounded feedback controllers.

A policy is a preliminary map pushed through the bounded odd squashing
function

    squash(x) = (9 sin(x) + sin(3x)) / 8,

the third-order Fourier expansion of a trapezoidal wave, normalized so
its extrema on [-pi/2, pi/2] are exactly +/-1, then scaled by the
control limits: u = u_max * squash(prelim(x)). Because the squash is a
sum of sines, all control moments under a Gaussian state are exact
closed forms of the trigonometric identities in `trig`.

Two preliminary representations are provided:

* linear: prelim(x) = A x + b (exact Gaussian output);
* rbf: a deterministic GP, prelim_a(x) = k_a(M, x)' alpha_a with unit
  signal variance, fixed regularization noise 0.01 (signal-to-noise
  ratio 10), per-control-dimension length-scales, shared centers, and
  alpha_a = (K_a + 0.01 I)^{-1} t_a. Its output moments under a
  Gaussian input follow the same exact integrals as the dynamics GP but
  carry no model-uncertainty term: the underlying function is fixed, so
  only the input distribution spreads the output.

Trainable parameters: linear stacks (A, b); rbf stacks (centers M,
log length-scales, targets t), giving N*D + F*D + N*F parameters.
Every output moment is differentiated analytically with respect to the
parameters and the input moments; covariance derivatives use the
symmetrized convention of `chain`.

Cross-covariances are carried as gains: cov[input, z] = Sigma_in @ gain.
For the squashed control, cov[input, u] = Sigma_in @ gain @ diag(s)
with s_a = u_max_a (9 E[cos z_a] + 3 E[cos 3 z_a]) / 8, the exact
Gaussian covariance factor of each sine harmonic. This composition
equals building the joint Gaussian over (input, prelim, u) via the
conditional independence of input and u given prelim, then
marginalizing the prelim coordinates; the gain form never inverts the
input covariance, so it also covers deterministic inputs.
"""

from __future__ import annotations

import json

import numpy as np
from scipy.linalg import cho_solve

from .errors import DimensionError, DomainError, NotPsdError
from .trig import _pair_cov_blocks, _pair_cov_partials, trig_moments
from .validation import check_matrix, check_vector, symmetrize

RBF_NOISE_VAR = 0.01  # fixed signal-to-noise ratio of 10 at unit signal
POLICY_FORMAT_TAG = "gpcontrol-policy-v1"

_HARMONICS = (1, 3)
_WEIGHT = {1: 9.0, 3: 1.0}


def squash(z):
    """Bounded odd squashing function; in [-1, 1] on [-pi/2, pi/2]."""
    z = np.asarray(z, dtype=float)
    out = (9.0 * np.sin(z) + np.sin(3.0 * z)) / 8.0
    return out if out.ndim else float(out)


def _check_u_max(u_max, control_dim):
    u_max = check_vector(np.asarray(u_max, float), "u_max", size=control_dim)
    if np.any(u_max <= 0):
        raise DomainError("u_max must be strictly positive")
    return u_max


class _PrelimResult:
    """Moments of the preliminary policy output plus optional gradients.

    mean (F,), cov (F, F), gain (D, F) with cov[input, z] = Sigma @ gain.
    Gradient dicts are keyed 'mu', 'sigma', 'theta'.
    """

    def __init__(self, mean, cov, gain):
        self.mean = mean
        self.cov = cov
        self.gain = gain
        self.d_mean = {}
        self.d_cov = {}
        self.d_gain = {}


class LinearPolicy:
    """prelim(x) = A x + b; all moments exact."""

    variant = "linear"

    def __init__(self, weights, offset, u_max):
        self.weights = check_matrix(np.asarray(weights, float), "weights")
        self.offset = check_vector(np.asarray(offset, float), "offset",
                                   size=self.weights.shape[0])
        self.u_max = _check_u_max(u_max, self.weights.shape[0])

    @property
    def input_dim(self):
        return self.weights.shape[1]

    @property
    def control_dim(self):
        return self.weights.shape[0]

    @property
    def param_count(self):
        return self.weights.size + self.offset.size

    def get_theta(self):
        return np.concatenate([self.weights.ravel(), self.offset])

    def with_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.param_count,):
            raise DimensionError(f"theta must have length {self.param_count}")
        f, d = self.weights.shape
        return LinearPolicy(theta[: f * d].reshape(f, d), theta[f * d:],
                            self.u_max)

    def prelim(self, x):
        return self.weights @ np.asarray(x, float) + self.offset

    def prelim_moments(self, mu, sigma, want_grads=False):
        a = self.weights
        f, d = a.shape
        mu = check_vector(np.asarray(mu, float), "mu", size=d)
        sigma = symmetrize(check_matrix(np.asarray(sigma, float), "sigma",
                                        shape=(d, d)))
        res = _PrelimResult(a @ mu + self.offset,
                            symmetrize(a @ sigma @ a.T), a.T.copy())
        if not want_grads:
            return res

        p = self.param_count
        res.d_mean["mu"] = a.copy()
        res.d_mean["sigma"] = np.zeros((f, d, d))
        res.d_cov["mu"] = np.zeros((f, f, d))
        dcs = np.einsum("ap,bq->abpq", a, a)
        res.d_cov["sigma"] = 0.5 * (dcs + np.swapaxes(dcs, 2, 3))
        res.d_gain["mu"] = np.zeros((d, f, d))
        res.d_gain["sigma"] = np.zeros((d, f, d, d))

        d_mean_th = np.zeros((f, p))
        d_cov_th = np.zeros((f, f, p))
        d_gain_th = np.zeros((d, f, p))
        asig = a @ sigma
        for fi in range(f):
            for di in range(d):
                k = fi * d + di
                d_mean_th[fi, k] = mu[di]
                d_gain_th[di, fi, k] = 1.0
                for b in range(f):
                    d_cov_th[fi, b, k] += asig[b, di]
                    d_cov_th[b, fi, k] += asig[b, di]
        d_mean_th[:, f * d:] = np.eye(f)
        res.d_mean["theta"] = d_mean_th
        res.d_cov["theta"] = d_cov_th
        res.d_gain["theta"] = d_gain_th
        return res

    def to_dict(self):
        return {
            "format": POLICY_FORMAT_TAG,
            "variant": "linear",
            "shape": {"control_dim": self.control_dim,
                      "input_dim": self.input_dim},
            "u_max": self.u_max.tolist(),
            "theta": self.get_theta().tolist(),
        }


class RbfPolicy:
    """Deterministic-GP preliminary policy."""

    variant = "rbf"

    def __init__(self, centers, log_length_scales, targets, u_max):
        self.centers = check_matrix(np.asarray(centers, float), "centers")
        self.log_length_scales = check_matrix(
            np.asarray(log_length_scales, float), "log_length_scales")
        self.targets = check_matrix(np.asarray(targets, float), "targets",
                                    shape=(self.centers.shape[0], None))
        if self.log_length_scales.shape != (self.targets.shape[1],
                                            self.centers.shape[1]):
            raise DimensionError(
                "log_length_scales must be (control_dim, input_dim)")
        self.u_max = _check_u_max(u_max, self.targets.shape[1])

    @property
    def input_dim(self):
        return self.centers.shape[1]

    @property
    def control_dim(self):
        return self.targets.shape[1]

    @property
    def num_basis(self):
        return self.centers.shape[0]

    @property
    def param_count(self):
        return (self.centers.size + self.log_length_scales.size
                + self.targets.size)

    def get_theta(self):
        return np.concatenate([
            self.centers.ravel(),
            self.log_length_scales.ravel(),
            self.targets.ravel(),
        ])

    def with_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.param_count,):
            raise DimensionError(f"theta must have length {self.param_count}")
        n, d = self.centers.shape
        f = self.control_dim
        lo, mid = n * d, n * d + f * d
        return RbfPolicy(theta[:lo].reshape(n, d),
                         theta[lo:mid].reshape(f, d),
                         theta[mid:].reshape(n, f), self.u_max)

    def _per_output(self, a):
        """(lam, K, noisy gram inverse, alpha) for control dimension a."""
        lam = np.exp(2.0 * self.log_length_scales[a])
        xs = self.centers / np.sqrt(lam)
        xsq = np.sum(xs**2, axis=1)
        sq = np.maximum(xsq[:, None] + xsq[None, :] - 2.0 * xs @ xs.T, 0.0)
        k = np.exp(-0.5 * sq)
        gram = k + RBF_NOISE_VAR * np.eye(self.num_basis)
        low = np.linalg.cholesky(gram)
        gram_inv = cho_solve((low, True), np.eye(self.num_basis))
        alpha = gram_inv @ self.targets[:, a]
        return lam, k, gram_inv, alpha

    def prelim(self, x):
        x = np.asarray(x, dtype=float)
        out = np.empty(self.control_dim)
        for a in range(self.control_dim):
            lam, _, _, alpha = self._per_output(a)
            diff = self.centers - x
            kvec = np.exp(-0.5 * np.einsum("ij,ij->i", diff / lam, diff))
            out[a] = float(kvec @ alpha)
        return out

    def prelim_moments(self, mu, sigma, want_grads=False):
        mu = check_vector(np.asarray(mu, float), "mu", size=self.input_dim)
        sigma = symmetrize(check_matrix(
            np.asarray(sigma, float), "sigma",
            shape=(self.input_dim, self.input_dim)))
        return _rbf_prelim_moments(self, mu, sigma, want_grads)

    def to_dict(self):
        return {
            "format": POLICY_FORMAT_TAG,
            "variant": "rbf",
            "shape": {"num_basis": self.num_basis,
                      "input_dim": self.input_dim,
                      "control_dim": self.control_dim},
            "u_max": self.u_max.tolist(),
            "theta": self.get_theta().tolist(),
        }


def policy_from_dict(data):
    if data.get("format") != POLICY_FORMAT_TAG:
        raise ValueError(f"unsupported policy format {data.get('format')!r}")
    shape = data["shape"]
    u_max = np.asarray(data["u_max"], float)
    theta = np.asarray(data["theta"], float)
    if data["variant"] == "linear":
        f, d = shape["control_dim"], shape["input_dim"]
        proto = LinearPolicy(np.zeros((f, d)), np.zeros(f), u_max)
    elif data["variant"] == "rbf":
        n, d, f = shape["num_basis"], shape["input_dim"], shape["control_dim"]
        proto = RbfPolicy(np.zeros((n, d)), np.zeros((f, d)),
                          np.zeros((n, f)), u_max)
    else:
        raise ValueError(f"unknown policy variant {data['variant']!r}")
    return proto.with_theta(theta)


def save_policy(policy, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(policy.to_dict(), fh, indent=1)


def load_policy(path):
    with open(path, encoding="utf-8") as fh:
        return policy_from_dict(json.load(fh))


def evaluate(policy, x):
    """Deterministic control at a point: u_max * squash(prelim(x))."""
    return policy.u_max * squash(policy.prelim(x))


# ---------------------------------------------------------------------------
# squashing moments


def squash_moments(prelim_mean, prelim_cov, u_max, want_grads=False):
    """Exact moments of u = u_max * squash(z) for jointly Gaussian z.

    Returns (u_mean, u_cov, s, grads). Harmonic covariances come from
    cov[sin(ka z_a), sin(kb z_b)] over the scaled pair
    (ka z_a, kb z_b); s holds the per-dimension covariance gains so that
    cov[y, u_a] = cov[y, z_a] s_a for any y jointly Gaussian with z.
    grads (when requested) maps each output to derivatives with respect
    to prelim_mean ('*_dmu') and prelim_cov ('*_dsigma').
    """
    mean_z = np.asarray(prelim_mean, dtype=float)
    cov_z = symmetrize(np.asarray(prelim_cov, dtype=float))
    u_max = np.asarray(u_max, dtype=float)
    f = mean_z.shape[0]
    var_z = np.diag(cov_z).copy()
    if np.any(var_z < -1e-12):
        raise NotPsdError("preliminary covariance has negative variance")
    var_z = np.maximum(var_z, 0.0)

    sin1, cos1 = trig_moments(mean_z, var_z, k=1)
    sin3, cos3 = trig_moments(mean_z, var_z, k=3)
    u_mean = u_max * (9.0 * sin1 + sin3) / 8.0
    s = u_max * (9.0 * cos1 + 3.0 * cos3) / 8.0

    u_cov = np.zeros((f, f))
    for a in range(f):
        for b in range(a, f):
            total = 0.0
            for ka in _HARMONICS:
                for kb in _HARMONICS:
                    ss, _, _, _ = _pair_cov_blocks(
                        ka * mean_z[a], kb * mean_z[b],
                        ka * ka * var_z[a], kb * kb * var_z[b],
                        ka * kb * cov_z[a, b])
                    total += _WEIGHT[ka] * _WEIGHT[kb] * ss
            u_cov[a, b] = u_cov[b, a] = u_max[a] * u_max[b] * total / 64.0

    if not want_grads:
        return u_mean, u_cov, s, None

    grads = {
        "d_mean_dmu": np.zeros((f, f)),
        "d_mean_dsigma": np.zeros((f, f, f)),
        "d_cov_dmu": np.zeros((f, f, f)),
        "d_cov_dsigma": np.zeros((f, f, f, f)),
        "d_s_dmu": np.zeros((f, f)),
        "d_s_dsigma": np.zeros((f, f, f)),
    }
    for a in range(f):
        grads["d_mean_dmu"][a, a] = s[a]
        grads["d_mean_dsigma"][a, a, a] = (
            -u_max[a] * 9.0 * (sin1[a] + sin3[a]) / 16.0)
        grads["d_s_dmu"][a, a] = -u_max[a] * 9.0 * (sin1[a] + sin3[a]) / 8.0
        grads["d_s_dsigma"][a, a, a] = (
            -u_max[a] * (9.0 * cos1[a] + 27.0 * cos3[a]) / 16.0)

    for a in range(f):
        for b in range(a, f):
            dmu = np.zeros(f)
            dsig = np.zeros((f, f))
            for ka in _HARMONICS:
                for kb in _HARMONICS:
                    w = _WEIGHT[ka] * _WEIGHT[kb]
                    dma, dmb, dva, dvb, dvab = _pair_cov_partials(
                        ka * mean_z[a], kb * mean_z[b],
                        ka * ka * var_z[a], kb * kb * var_z[b],
                        ka * kb * cov_z[a, b])["ss"]
                    dmu[a] += w * ka * dma
                    dmu[b] += w * kb * dmb
                    dsig[a, a] += w * ka * ka * dva
                    dsig[b, b] += w * kb * kb * dvb
                    _sym_add(dsig, a, b, w * ka * kb * dvab)
            scale = u_max[a] * u_max[b] / 64.0
            grads["d_cov_dmu"][a, b] = grads["d_cov_dmu"][b, a] = scale * dmu
            grads["d_cov_dsigma"][a, b] = scale * dsig
            grads["d_cov_dsigma"][b, a] = scale * dsig
    return u_mean, u_cov, s, grads


def _sym_add(mat, i, j, val):
    if i == j:
        mat[i, i] += val
    else:
        mat[i, j] += 0.5 * val
        mat[j, i] += 0.5 * val


# ---------------------------------------------------------------------------
# deterministic-GP preliminary moments


class _RbfOutput:
    """Per-control-dimension pieces: r vector, mean, cross-cov gain."""

    def __init__(self, lam, k, gram_inv, alpha, delta, sigma):
        d = delta.shape[1]
        self.lam = lam
        self.k = k
        self.gram_inv = gram_inv
        self.alpha = alpha
        s_mat = sigma + np.diag(lam)
        low = np.linalg.cholesky(s_mat)
        self.s_inv = cho_solve((low, True), np.eye(d))
        self.t = delta @ self.s_inv                  # rows (S^-1 delta_i)'
        logdet_ratio = 2.0 * np.sum(np.log(np.diag(low))) - np.sum(np.log(lam))
        quad = np.einsum("ij,ij->i", delta, self.t)
        self.r = np.exp(-0.5 * (logdet_ratio + quad))
        self.w = alpha * self.r
        self.mean = float(np.sum(self.w))
        self.g = self.t.T @ self.w


class _RbfPair:
    """Q matrix for a pair of control dimensions plus contractions.

    Same parametrization as the dynamics moment matching (`inference`),
    specialized to unit signal variance and carrying the extra
    contractions against centers and length-scales that policy training
    needs.
    """

    def __init__(self, out_a, out_b, delta, sigma, x):
        d = sigma.shape[0]
        lam_a, lam_b = out_a.lam, out_b.lam
        self.lam_a, self.lam_b = lam_a, lam_b
        c_diag = 1.0 / (1.0 / lam_a + 1.0 / lam_b)
        self.c_diag = c_diag
        self.denom = lam_a + lam_b
        m_mat = np.diag(c_diag) + sigma
        low = np.linalg.cholesky(m_mat)
        self.w_mat = cho_solve((low, True), np.eye(d))
        logdet = 2.0 * np.sum(np.log(np.diag(low))) - np.sum(np.log(c_diag))
        self.f_a = c_diag / lam_a
        self.f_b = c_diag / lam_b
        self.p = delta * self.f_a
        self.r_rows = delta * self.f_b
        xs = x / np.sqrt(self.denom)
        xsq = np.sum(xs**2, axis=1)
        self.sq_scaled = np.maximum(
            xsq[:, None] + xsq[None, :] - 2.0 * xs @ xs.T, 0.0)
        self.pw = self.p @ self.w_mat
        self.rw = self.r_rows @ self.w_mat
        quad_p = np.einsum("ij,ij->i", self.pw, self.p)
        quad_r = np.einsum("ij,ij->i", self.rw, self.r_rows)
        cross = self.pw @ self.r_rows.T
        log_q = (-0.5 * logdet - 0.5 * self.sq_scaled
                 - 0.5 * (quad_p[:, None] + 2.0 * cross + quad_r[None, :]))
        self.q = np.exp(log_q)

    def contract_dmu(self, omega):
        oq = omega * self.q
        row = oq.sum(axis=1)
        col = oq.sum(axis=0)
        return self.w_mat @ (self.p.T @ row + self.r_rows.T @ col)

    def contract_dsigma(self, omega):
        oq = omega * self.q
        row = oq.sum(axis=1)
        col = oq.sum(axis=0)
        total = float(row.sum())
        m_mid = (self.p.T @ (self.p * row[:, None])
                 + self.p.T @ oq @ self.r_rows
                 + self.r_rows.T @ oq.T @ self.p
                 + self.r_rows.T @ (self.r_rows * col[:, None]))
        return symmetrize(
            0.5 * (self.w_mat @ m_mid @ self.w_mat - total * self.w_mat))

    def contract_dcenters(self, omega, x):
        """sum_ij omega_ij dQ_ij/dM as an (n, d) array.

        dlnQ_ij/dm_i = -(x_i - x_j)/(lam_a + lam_b) - Fa W d_ij,
        dlnQ_ij/dm_j = +(x_i - x_j)/(lam_a + lam_b) - Fb W d_ij.
        """
        oq = omega * self.q
        row = oq.sum(axis=1)
        col = oq.sum(axis=0)
        out = -(x * row[:, None] - oq @ x) / self.denom
        out += (oq.T @ x - x * col[:, None]) / self.denom
        out -= (self.pw * row[:, None] + oq @ self.rw) * self.f_a
        out -= (self.rw * col[:, None] + oq.T @ self.pw) * self.f_b
        return out

    def contract_dlam(self, omega, delta, x, side):
        """sum_ij omega_ij dQ_ij/dlam_side, natural lam (length-scale^2).

        Routes: the determinant and the W-quadratic through
        dC_d/dlam = (C_d/lam_d)^2; the pairwise (x_i - x_j)^2 term
        through the 1/(lam_a + lam_b) factor; and the convex weights of
        d_ij = Fa delta_i + Fb delta_j, whose lam-derivative carries
        opposite signs for the two sides and cancels when both share the
        same length-scales.
        """
        oq = omega * self.q
        row = oq.sum(axis=1)
        col = oq.sum(axis=0)
        total = float(row.sum())
        lam = self.lam_a if side == "a" else self.lam_b
        f_own = self.f_a if side == "a" else self.f_b
        dc = (self.c_diag / lam) ** 2

        det_term = -0.5 * dc * (np.diag(self.w_mat) - 1.0 / self.c_diag)

        wd_sq = (np.einsum("i,id->d", row, self.pw**2)
                 + 2.0 * np.einsum("id,ij,jd->d", self.pw, oq, self.rw)
                 + np.einsum("j,jd->d", col, self.rw**2))

        xsq = (np.einsum("i,id->d", row, x**2)
               + np.einsum("j,jd->d", col, x**2)
               - 2.0 * np.einsum("id,ij,jd->d", x, oq, x))
        pair_term = 0.5 * xsq / self.denom**2

        wd_delta = (np.einsum("id,ij,jd->d", self.pw, oq, delta)
                    + np.einsum("j,jd,jd->d", col, self.rw, delta)
                    - np.einsum("i,id,id->d", row, self.pw, delta)
                    - np.einsum("id,ij,jd->d", delta, oq, self.rw))
        sign = -1.0 if side == "a" else 1.0
        comp_term = sign * (f_own / self.denom) * wd_delta

        return (det_term * total + 0.5 * dc * wd_sq + pair_term + comp_term)


class _RbfParamGrads:
    """Parameter derivatives of one control dimension's mean and gain.

    The alpha coefficients depend on the centers and length-scales
    through the regularized gram matrix: d alpha = gram_inv (dt - dK
    alpha). Linear functionals c' alpha therefore pick up
    -(gram_inv c)' dK alpha; `alpha_center_route` and `alpha_lam_route`
    evaluate that contraction for a batch of constant vectors c.
    """

    def __init__(self, policy, o, delta):
        self.x = policy.centers
        self.o = o
        n, d = self.x.shape
        alpha, r = o.alpha, o.r

        # mean = alpha' r
        self.dmean_dt = o.gram_inv @ r
        self.dr_dm = -(r[:, None] * o.t)                     # d r_i / d m_i
        self.dmean_dm = (alpha[:, None] * self.dr_dm
                         + self.alpha_center_route(r[:, None]).reshape(n, d))
        dlnr_dlam = (-0.5 * np.diag(o.s_inv)[None, :]
                     + 0.5 / o.lam[None, :] + 0.5 * o.t**2)
        self.dr_dlam = r[:, None] * dlnr_dlam                # (n, d)
        self.dmean_drho = 2.0 * o.lam * (
            alpha @ self.dr_dlam + self.alpha_lam_route(r[:, None])[0])

        # gain g = S^-1 delta' (alpha * r)
        s_inv = o.s_inv
        c_batch = (r[:, None] * delta) @ s_inv               # (n, d_out)
        self.dgain_dt = (s_inv @ (delta.T * r[None, :])) @ o.gram_inv

        dgain_dm = np.zeros((d, n, d))
        for dd in range(d):
            dgain_dm[:, :, dd] += np.outer(s_inv[:, dd], o.w)
            dgain_dm[:, :, dd] += (s_inv @ delta.T) * (
                alpha * self.dr_dm[:, dd])[None, :]
        alpha_part = self.alpha_center_route(c_batch)        # (d_out, n, d)
        self.dgain_dm = dgain_dm + alpha_part

        # length-scale routes of the gain
        v = delta.T @ o.w
        route1 = -np.einsum("rd,d->rd", s_inv, s_inv @ v)
        route2 = s_inv @ (delta.T @ (alpha[:, None] * self.dr_dlam))
        route3 = self.alpha_lam_route(c_batch)               # (d_out, d)
        self.dgain_drho = 2.0 * o.lam[None, :] * (route1 + route2 + route3)

    def alpha_center_route(self, c_batch):
        """d(c' alpha)/dM for constant columns c: -(gram_inv c)' dK alpha.

        c_batch has shape (n, m); returns (m, n, d) over (functional,
        center, coordinate). Uses dK_kj/dm_kd = -K_kj (m_k - m_j)_d/lam_d.
        """
        o = self.o
        x = self.x
        lam = o.lam
        n, d = x.shape
        m = c_batch.shape[1]
        b_mat = o.gram_inv @ c_batch                         # (n, m)
        k_alpha = o.k * o.alpha[None, :]                     # K_kj alpha_j
        row_fac = (x * k_alpha.sum(axis=1)[:, None] - k_alpha @ x)   # (n, d)
        out = np.zeros((m, n, d))
        for dd in range(d):
            # i = k route: + b_k (sum_j K_kj alpha_j (m_k - m_j)_d)/lam_d
            out[:, :, dd] += (b_mat * row_fac[:, dd][:, None]).T / lam[dd]
            # j = k route mirrors it with b and alpha swapped:
            # + alpha_k (sum_i K_ki b_i (m_k - m_i)_d)/lam_d
            kb = x[:, dd][:, None] * (o.k @ b_mat) - o.k @ (
                b_mat * x[:, dd][:, None])
            out[:, :, dd] += (o.alpha[:, None] * kb).T / lam[dd]
        return out

    def alpha_lam_route(self, c_batch):
        """d(c' alpha)/dlam through K: -(gram_inv c)' (K * sqd_d) alpha
        / (2 lam_d^2) with the SE derivative dK/dlam_d = K sqd_d/(2 lam_d^2).

        Returns (m, d), derivative with respect to natural lam.
        """
        o = self.o
        x = self.x
        lam = o.lam
        m = c_batch.shape[1]
        d = x.shape[1]
        b_mat = o.gram_inv @ c_batch
        out = np.zeros((m, d))
        for dd in range(d):
            xd = x[:, dd]
            ka = o.k * o.alpha[None, :]
            # (K * sqd_dd) alpha = xd^2*(K alpha) + K(alpha*xd^2) - 2 xd*K(alpha*xd)
            vec = (xd**2 * ka.sum(axis=1) + o.k @ (o.alpha * xd**2)
                   - 2.0 * xd * (o.k @ (o.alpha * xd)))
            out[:, dd] = -(b_mat.T @ vec) / (2.0 * lam[dd] ** 2)
        return out


def _rbf_prelim_moments(policy, mu, sigma, want_grads):
    f = policy.control_dim
    x = policy.centers
    delta = x - mu

    outs = []
    for a in range(f):
        lam, k, gram_inv, alpha = policy._per_output(a)
        outs.append(_RbfOutput(lam, k, gram_inv, alpha, delta, sigma))

    mean = np.array([o.mean for o in outs])
    gain = np.column_stack([o.g for o in outs])
    pairs = {}
    cov = np.zeros((f, f))
    for a in range(f):
        for b in range(a, f):
            pair = _RbfPair(outs[a], outs[b], delta, sigma, x)
            pairs[(a, b)] = pair
            e_ab = float(outs[a].alpha @ pair.q @ outs[b].alpha)
            cov[a, b] = cov[b, a] = e_ab - mean[a] * mean[b]
    res = _PrelimResult(mean, symmetrize(cov), gain)
    if want_grads:
        _rbf_prelim_gradients(policy, res, outs, pairs, delta, sigma)
    return res


def _rbf_prelim_gradients(policy, res, outs, pairs, delta, sigma):
    n, d = policy.centers.shape
    f = policy.control_dim
    p_count = policy.param_count
    x = policy.centers
    idx_centers = slice(0, n * d)
    idx_ell = slice(n * d, n * d + f * d)
    idx_t = slice(n * d + f * d, p_count)
    mean = res.mean

    d_mean_mu = np.stack([o.g for o in outs])
    d_mean_sig = np.zeros((f, d, d))
    d_gain_mu = np.zeros((d, f, d))
    d_gain_sig = np.zeros((d, f, d, d))
    d_mean_th = np.zeros((f, p_count))
    d_gain_th = np.zeros((d, f, p_count))

    params = []
    for a, o in enumerate(outs):
        d_mean_sig[a] = 0.5 * (o.t.T @ (o.t * o.w[:, None]) - o.mean * o.s_inv)

        inner = delta.T @ (o.t * o.w[:, None]) - o.mean * np.eye(d)
        d_gain_mu[:, a, :] = o.s_inv @ inner
        u_rows = delta @ o.s_inv
        term_rank1 = -np.einsum("rp,q->rpq", o.s_inv, o.g)
        term_w = 0.5 * np.einsum("i,ir,ip,iq->rpq", o.w, u_rows, o.t, o.t)
        term_s = -0.5 * np.einsum("r,pq->rpq", o.g, o.s_inv)
        full = term_rank1 + term_w + term_s
        d_gain_sig[:, a, :, :] = 0.5 * (full + np.swapaxes(full, 1, 2))

        pg = _RbfParamGrads(policy, o, delta)
        params.append(pg)
        d_mean_th[a, idx_t] = _scatter_cols(pg.dmean_dt, a, n, f)
        d_mean_th[a, idx_centers] = pg.dmean_dm.ravel()
        d_mean_th[a, idx_ell] = _scatter_rows(pg.dmean_drho, a, f, d)
        d_gain_th[:, a, idx_t] = _scatter_cols_batch(pg.dgain_dt, a, n, f)
        d_gain_th[:, a, idx_centers] = pg.dgain_dm.reshape(d, n * d)
        d_gain_th[:, a, idx_ell] = _scatter_rows_batch(pg.dgain_drho, a, f, d)

    d_cov_mu = np.zeros((f, f, d))
    d_cov_sig = np.zeros((f, f, d, d))
    d_cov_th = np.zeros((f, f, p_count))
    for a in range(f):
        for b in range(a, f):
            pair = pairs[(a, b)]
            oa, ob = outs[a], outs[b]
            omega = np.outer(oa.alpha, ob.alpha)
            dmu = pair.contract_dmu(omega)
            # sign: dQ/dmu = -dQ/d(each center); contract_dmu is the
            # mu-route, derived with nu_i = m_i - mu so dnu/dmu = -I and
            # the sum over both index routes already folds that in
            dmu -= mean[a] * ob.g + mean[b] * oa.g
            dsig = pair.contract_dsigma(omega)
            dsig = dsig - (mean[a] * d_mean_sig[b] + mean[b] * d_mean_sig[a])
            d_cov_mu[a, b] = d_cov_mu[b, a] = dmu
            d_cov_sig[a, b] = d_cov_sig[b, a] = dsig

            dth = np.zeros(p_count)
            q_alpha_b = pair.q @ ob.alpha
            q_alpha_a = pair.q.T @ oa.alpha
            dt = np.zeros((n, f))
            dt[:, a] += oa.gram_inv @ q_alpha_b
            dt[:, b] += ob.gram_inv @ q_alpha_a
            dt[:, a] -= mean[b] * params[a].dmean_dt
            dt[:, b] -= mean[a] * params[b].dmean_dt
            dth[idx_t] = dt.ravel()

            dm = pair.contract_dcenters(omega, x)
            dm += params[a].alpha_center_route(q_alpha_b[:, None])[0]
            dm += params[b].alpha_center_route(q_alpha_a[:, None])[0]
            dm -= mean[b] * params[a].dmean_dm
            dm -= mean[a] * params[b].dmean_dm
            dth[idx_centers] = dm.ravel()

            dl = np.zeros((f, d))
            dl[a] += 2.0 * oa.lam * pair.contract_dlam(omega, delta, x, "a")
            dl[b] += 2.0 * ob.lam * pair.contract_dlam(omega, delta, x, "b")
            dl[a] += 2.0 * oa.lam * params[a].alpha_lam_route(
                q_alpha_b[:, None])[0]
            dl[b] += 2.0 * ob.lam * params[b].alpha_lam_route(
                q_alpha_a[:, None])[0]
            dl[a] -= mean[b] * params[a].dmean_drho
            dl[b] -= mean[a] * params[b].dmean_drho
            dth[idx_ell] = dl.ravel()

            d_cov_th[a, b] = d_cov_th[b, a] = dth

    res.d_mean = {"mu": d_mean_mu, "sigma": d_mean_sig, "theta": d_mean_th}
    res.d_cov = {"mu": d_cov_mu, "sigma": d_cov_sig, "theta": d_cov_th}
    res.d_gain = {"mu": d_gain_mu, "sigma": d_gain_sig, "theta": d_gain_th}


def _scatter_cols(vec_n, a, n, f):
    out = np.zeros((n, f))
    out[:, a] = vec_n
    return out.ravel()


def _scatter_cols_batch(mat_dn, a, n, f):
    d = mat_dn.shape[0]
    out = np.zeros((d, n, f))
    out[:, :, a] = mat_dn
    return out.reshape(d, n * f)


def _scatter_rows(vec_d, a, f, d):
    out = np.zeros((f, d))
    out[a] = vec_d
    return out.ravel()


def _scatter_rows_batch(mat_dd, a, f, d):
    dr = mat_dd.shape[0]
    out = np.zeros((dr, f, d))
    out[:, a, :] = mat_dd
    return out.reshape(dr, f * d)


# ---------------------------------------------------------------------------
# full control distribution: prelim -> squash -> scale


class ControlMoments:
    """Moments of the final control u = u_max squash(prelim(x)).

    cross_cov = cov[policy input, u] = Sigma_in @ gain. Gradient dicts
    (present when requested) are keyed 'mu', 'sigma', 'theta' and cover
    u_mean, u_cov, and the gain.
    """

    def __init__(self, u_mean, u_cov, cross_cov, gain):
        self.u_mean = u_mean
        self.u_cov = u_cov
        self.cross_cov = cross_cov
        self.gain = gain
        self.d_mean = None
        self.d_cov = None
        self.d_gain = None


def control_moments(policy, mu, sigma, want_grads=False):
    """Exact moments of the bounded control for a Gaussian policy input."""
    prelim = policy.prelim_moments(mu, sigma, want_grads=want_grads)
    u_mean, u_cov, s, sq = squash_moments(
        prelim.mean, prelim.cov, policy.u_max, want_grads=want_grads)
    gain = prelim.gain * s[None, :]
    cm = ControlMoments(u_mean, u_cov, np.asarray(sigma, float) @ gain, gain)
    if not want_grads:
        return cm

    def chain_vec(d_out_dmuz, d_out_dsigz):
        """Chain an (F,)-shaped squash output through the prelim stage."""
        out = {}
        for key in ("mu", "sigma", "theta"):
            a = np.tensordot(d_out_dmuz, prelim.d_mean[key], axes=([1], [0]))
            b = np.tensordot(d_out_dsigz, prelim.d_cov[key], axes=([1, 2], [0, 1]))
            out[key] = a + b
        return out

    def chain_mat(d_out_dmuz, d_out_dsigz):
        """Chain an (F, F)-shaped squash output through the prelim stage."""
        out = {}
        for key in ("mu", "sigma", "theta"):
            a = np.tensordot(d_out_dmuz, prelim.d_mean[key], axes=([2], [0]))
            b = np.tensordot(d_out_dsigz, prelim.d_cov[key],
                             axes=([2, 3], [0, 1]))
            out[key] = a + b
        return out

    cm.d_mean = chain_vec(sq["d_mean_dmu"], sq["d_mean_dsigma"])
    cm.d_cov = chain_mat(sq["d_cov_dmu"], sq["d_cov_dsigma"])
    d_s = chain_vec(sq["d_s_dmu"], sq["d_s_dsigma"])

    cm.d_gain = {}
    for key in ("mu", "sigma", "theta"):
        term_g = prelim.d_gain[key] * _expand_like(s, prelim.d_gain[key], 1)
        term_s = np.einsum("df,f...->df...", prelim.gain, d_s[key])
        cm.d_gain[key] = term_g + term_s
    return cm


def _expand_like(s, arr, axis):
    shape = [1] * arr.ndim
    shape[axis] = s.shape[0]
    return s.reshape(shape)
