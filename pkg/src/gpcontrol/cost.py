"""Saturating immediate cost and its exact Gaussian expectations.

The immediate cost of a cost-space vector x is

    c(x) = 1 - exp(-1/2 (x - target)' P (x - target)),   P = precision,

an unnormalized Gaussian subtracted from unity: locally quadratic near
the target, saturating at one far away. For selector costs P is diagonal
with entries 0 or 1 scaled by 1/sigma_c^2. Because c is one minus a
Gaussian shape, its expectation under x ~ N(mu, Sigma) is closed form:

    E[c] = 1 - |I + Sigma P|^{-1/2}
               exp(-1/2 (mu - target)' S1 (mu - target)),
    S1 = P (I + Sigma P)^{-1},

with gradients

    dE[c]/dmu    = (1 - E[c]) S1 (mu - target),
    dE[c]/dSigma = (1 - E[c]) (S1 - S1 (mu - target)(mu - target)' S1) / 2.

The same algebra with doubled precision gives E[(1-c)^2], hence the cost
standard deviation used by the optional exploration bonus
kappa * std[c].

States with angle coordinates are mapped into cost space by
`CostSpaceMap`: augment the state with sines/cosines of each angle
(exact moments, see `trig`) and apply an affine map picking out the
penalized geometry (for example the pendulum tip position). The
precision matrix then stays a constant diagonal selector and the
formulas above apply unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .chain import linear_map_jacobian, apply_linear_map, split_jacobian, unpack, pack
from .errors import NumericalError
from .trig import augment_with_trig
from .validation import check_matrix, check_psd, check_vector, symmetrize

_COND_LIMIT = 1e12


@dataclass(frozen=True)
class CostConfig:
    """Target, precision, and width of the saturating cost."""

    target: np.ndarray
    precision: np.ndarray
    sigma_c: float
    ucb_kappa: float = 0.0

    def __post_init__(self):
        target = check_vector(np.asarray(self.target, float), "target")
        precision = check_psd(np.asarray(self.precision, float), "precision")
        if precision.shape[0] != target.shape[0]:
            raise ValueError("target and precision dimensions differ")
        if self.sigma_c <= 0:
            raise ValueError("sigma_c must be positive")
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "precision", precision)

    @classmethod
    def selector(cls, target, mask, sigma_c, ucb_kappa=0.0):
        """Unit/zero diagonal precision scaled by 1/sigma_c^2."""
        mask = np.asarray(mask, float)
        return cls(target=np.asarray(target, float),
                   precision=np.diag(mask) / sigma_c**2,
                   sigma_c=float(sigma_c), ucb_kappa=float(ucb_kappa))


def _gaussian_shape_moment(precision, target, mean, cov):
    """E[exp(-1/2 (x-t)' P (x-t))] for x ~ N(mean, cov) plus gradients.

    Returns (value, d_mu, d_sigma). Works for singular P via the
    push-through form S = P (I + Sigma P)^{-1}.
    """
    d = mean.shape[0]
    a_mat = np.eye(d) + cov @ precision
    sign, logdet = np.linalg.slogdet(a_mat)
    if sign <= 0:
        raise NumericalError(
            "I + Sigma P is singular or negative definite",
            condition=float(np.linalg.cond(a_mat)))
    cond = np.linalg.cond(a_mat)
    if cond > _COND_LIMIT:
        raise NumericalError("I + Sigma P is ill conditioned", condition=float(cond))
    s_mat = symmetrize(np.linalg.solve(a_mat.T, precision).T)
    v = mean - target
    sv = s_mat @ v
    value = float(np.exp(-0.5 * logdet - 0.5 * v @ sv))
    d_mu = -value * sv
    d_sigma = 0.5 * value * (np.outer(sv, sv) - s_mat)
    return value, d_mu, d_sigma


def expected_cost(cfg: CostConfig, mean, cov):
    """Expected saturating cost and its belief-moment gradients.

    Returns (value, d_mean, d_cov) with value in [0, 1].
    """
    mean = check_vector(np.asarray(mean, float), "mean",
                        size=cfg.target.shape[0])
    cov = symmetrize(check_matrix(np.asarray(cov, float), "cov",
                                  shape=(mean.shape[0], mean.shape[0])))
    g, dg_mu, dg_sigma = _gaussian_shape_moment(cfg.precision, cfg.target,
                                                mean, cov)
    value = min(max(1.0 - g, 0.0), 1.0)
    return value, -dg_mu, -dg_sigma


def cost_std(cfg: CostConfig, mean, cov):
    """Standard deviation of the saturating cost under the belief."""
    value, _, _ = cost_std_gradients(cfg, mean, cov)
    return value


def cost_std_gradients(cfg: CostConfig, mean, cov):
    """std[c] = sqrt(E[g^2] - E[g]^2) with g the Gaussian shape.

    var[c] = var[g] because c = 1 - g. E[g^2] reuses the expectation
    algebra with doubled precision. Near-deterministic beliefs drive the
    std to zero where its gradient is undefined; zeros are returned
    below a round-off threshold.
    """
    mean = check_vector(np.asarray(mean, float), "mean",
                        size=cfg.target.shape[0])
    cov = symmetrize(check_matrix(np.asarray(cov, float), "cov",
                                  shape=(mean.shape[0], mean.shape[0])))
    g1, d1_mu, d1_sigma = _gaussian_shape_moment(cfg.precision, cfg.target,
                                                 mean, cov)
    g2, d2_mu, d2_sigma = _gaussian_shape_moment(2.0 * cfg.precision,
                                                 cfg.target, mean, cov)
    var = g2 - g1 * g1
    if var <= 1e-300:
        d = mean.shape[0]
        return 0.0, np.zeros(d), np.zeros((d, d))
    std = float(np.sqrt(var))
    scale = 0.5 / std
    d_mu = scale * (d2_mu - 2.0 * g1 * d1_mu)
    d_sigma = scale * (d2_sigma - 2.0 * g1 * d1_sigma)
    return std, d_mu, d_sigma


class CostSpaceMap:
    """State belief to cost-space belief: trig augmentation + affine map.

    cost_vec = matrix @ [x, sin(x_i), cos(x_i) for i in angle_dims].
    With no angle dims this degenerates to a plain affine map.
    """

    def __init__(self, state_dim, angle_dims, matrix):
        self.state_dim = int(state_dim)
        self.angle_dims = list(angle_dims)
        aug_dim = self.state_dim + 2 * len(self.angle_dims)
        self.matrix = check_matrix(np.asarray(matrix, float), "matrix",
                                   shape=(None, aug_dim))

    @property
    def cost_dim(self):
        return self.matrix.shape[0]

    def map_point(self, x):
        x = np.asarray(x, dtype=float)
        parts = [x]
        for i in self.angle_dims:
            parts.extend([np.sin(x[..., i:i + 1]), np.cos(x[..., i:i + 1])])
        return np.concatenate(parts, axis=-1) @ self.matrix.T

    def map_belief(self, mean, cov, want_jacobian=False):
        """Exact first two moments of the cost-space image of the belief."""
        m_aug, v_aug, jac_aug = augment_with_trig(mean, cov, self.angle_dims)
        m_out, v_out = apply_linear_map(self.matrix, np.zeros(self.cost_dim),
                                        m_aug, v_aug)
        if not want_jacobian:
            return m_out, v_out, None
        jac_lin = linear_map_jacobian(self.matrix, m_aug.shape[0])
        return m_out, v_out, jac_lin @ jac_aug


class SaturatingStateCost:
    """Immediate cost of a state belief: map to cost space, take E[c].

    evaluate() returns (value, d_mean, d_cov) where the gradients are
    with respect to the state belief moments and value includes the
    optional exploration term kappa * std[c].
    """

    def __init__(self, cost_map: CostSpaceMap, config: CostConfig):
        if cost_map.cost_dim != config.target.shape[0]:
            raise ValueError("cost map output and target dimensions differ")
        self.cost_map = cost_map
        self.config = config

    def point_cost(self, x):
        z = self.cost_map.map_point(np.asarray(x, float))
        v = z - self.config.target
        return 1.0 - float(np.exp(-0.5 * v @ self.config.precision @ v))

    def evaluate(self, mean, cov, want_grads=False):
        m_c, v_c, jac = self.cost_map.map_belief(mean, cov,
                                                 want_jacobian=want_grads)
        value, d_mu_c, d_sig_c = expected_cost(self.config, m_c, v_c)
        if self.config.ucb_kappa != 0.0:
            std, s_mu, s_sig = cost_std_gradients(self.config, m_c, v_c)
            value = value + self.config.ucb_kappa * std
            d_mu_c = d_mu_c + self.config.ucb_kappa * s_mu
            d_sig_c = d_sig_c + self.config.ucb_kappa * s_sig
        if not want_grads:
            return value, None, None
        d = mean.shape[0]
        flat_grad = pack(d_mu_c, d_sig_c) @ jac
        d_mean, d_cov = unpack(flat_grad, d)
        return value, d_mean, symmetrize(d_cov)
