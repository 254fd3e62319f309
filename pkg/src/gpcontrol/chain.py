"""Flattened-moment chain-rule utilities.

A Gaussian belief over a p-vector is packed as the flat vector
``[mean, cov.ravel()]`` of length ``p + p*p``. Every propagation stage
(state augmentation, policy, squashing, dynamics prediction, successor
update) exposes its Jacobian as a dense matrix mapping flat input moments
to flat output moments, so a full time step is a product of stage
Jacobians and the policy gradient accumulates by forward-mode chaining.

Derivatives with respect to a covariance matrix use the symmetrized
convention: entry (p, q) of a stored gradient is the derivative of the
function extended symmetrically, f((A + A^T)/2), so gradients satisfy
G[p, q] == G[q, p] and contracting G against a symmetric perturbation
dA gives the exact directional derivative sum(G * dA).
"""

from __future__ import annotations

import numpy as np


def flat_dim(d: int) -> int:
    return d + d * d


def pack(mean, cov):
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    return np.concatenate([mean, cov.ravel()])


def unpack(s, d: int):
    s = np.asarray(s, dtype=float)
    return s[:d], s[d:].reshape(d, d)


def assemble_jacobian(dm_dm, dm_dv, dv_dm, dv_dv):
    """Build the flat (p+p^2) x (d+d^2) Jacobian from its four blocks.

    Shapes: dm_dm (p,d); dm_dv (p,d,d); dv_dm (p,p,d); dv_dv (p,p,d,d).
    """
    p, d = dm_dm.shape
    top = np.hstack([dm_dm, dm_dv.reshape(p, d * d)])
    bot = np.hstack([dv_dm.reshape(p * p, d), dv_dv.reshape(p * p, d * d)])
    return np.vstack([top, bot])


def split_jacobian(jac, p: int, d: int):
    """Inverse of assemble_jacobian."""
    dm = jac[:p]
    dv = jac[p:]
    return (dm[:, :d], dm[:, d:].reshape(p, d, d),
            dv[:, :d].reshape(p, p, d), dv[:, d:].reshape(p, p, d, d))


def selection_jacobian(indices, d: int):
    """Flat Jacobian of the marginal-belief map v -> v[indices].

    Selection is linear, so the Jacobian is exact; covariance entries map
    one-to-one so symmetrization is preserved automatically.
    """
    idx = np.asarray(indices, dtype=int)
    p = idx.shape[0]
    dm_dm = np.zeros((p, d))
    dm_dm[np.arange(p), idx] = 1.0
    dm_dv = np.zeros((p, d, d))
    dv_dm = np.zeros((p, p, d))
    dv_dv = np.zeros((p, p, d, d))
    for r, i in enumerate(idx):
        for s, j in enumerate(idx):
            if i == j:
                dv_dv[r, s, i, i] = 1.0
            else:
                dv_dv[r, s, i, j] = 0.5
                dv_dv[r, s, j, i] = 0.5
    return assemble_jacobian(dm_dm, dm_dv, dv_dm, dv_dv)


def linear_map_jacobian(a, d: int):
    """Flat Jacobian of the affine belief map (m, V) -> (A m + b, A V A^T)."""
    a = np.asarray(a, dtype=float)
    p = a.shape[0]
    dm_dm = a.copy()
    dm_dv = np.zeros((p, d, d))
    dv_dm = np.zeros((p, p, d))
    dv_dv = np.einsum("ri,sj->rsij", a, a)
    dv_dv = 0.5 * (dv_dv + np.swapaxes(dv_dv, 2, 3))
    return assemble_jacobian(dm_dm, dm_dv, dv_dm, dv_dv)


def apply_linear_map(a, b, mean, cov):
    mean2 = a @ mean + b
    cov2 = a @ cov @ a.T
    return mean2, 0.5 * (cov2 + cov2.T)
