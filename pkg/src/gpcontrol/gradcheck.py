"""Central finite-difference oracles.

These helpers never call analytic-gradient code; they probe forward
functions only, so they remain an independent check of every derivative
in the package. Covariance arguments are perturbed along symmetric
directions (single diagonal entries, or paired off-diagonal entries),
matching the symmetrized gradient storage convention in `chain`.
"""

from __future__ import annotations

import numpy as np


def fd_vector(f, x, step=1e-6):
    """Jacobian of f(x) w.r.t. the vector x by central differences.

    f may return a scalar or an ndarray; the result has shape
    f(x).shape + x.shape.
    """
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x), dtype=float)
    out = np.zeros(f0.shape + x.shape)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = step
        hi = np.asarray(f(x + e), dtype=float)
        lo = np.asarray(f(x - e), dtype=float)
        out[(Ellipsis,) + np.unravel_index(i, x.shape)] = (hi - lo) / (2 * step)
    return out


def fd_symmetric_matrix(f, a, step=1e-6):
    """Symmetrized Jacobian of f(A) w.r.t. a symmetric matrix A.

    Probes the direction E_pq + E_qp for p != q and E_pp on the diagonal,
    then splits the off-diagonal response evenly between (p, q) and
    (q, p), so the result compares entrywise against symmetrized analytic
    gradients. Result shape: f(A).shape + A.shape.
    """
    a = np.asarray(a, dtype=float)
    d = a.shape[0]
    f0 = np.asarray(f(a), dtype=float)
    out = np.zeros(f0.shape + a.shape)
    for p in range(d):
        for q in range(p, d):
            e = np.zeros_like(a)
            e[p, q] = step
            e[q, p] = step
            hi = np.asarray(f(a + e), dtype=float)
            lo = np.asarray(f(a - e), dtype=float)
            diff = (hi - lo) / (2 * step)
            if p == q:
                out[..., p, p] = diff
            else:
                out[..., p, q] = 0.5 * diff
                out[..., q, p] = 0.5 * diff
    return out


def fd_moment_jacobian(stage, mean, cov, step=1e-6):
    """Flat-Jacobian oracle for a stage mapping (mean, cov) to (mean, cov).

    `stage` takes (mean, cov) and returns (mean_out, cov_out). The result
    matches the layout of `chain.assemble_jacobian`.
    """
    from .chain import pack

    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)

    def packed_of_mean(m):
        mo, vo = stage(m, cov)
        return pack(mo, vo)

    def packed_of_cov(v):
        mo, vo = stage(mean, v)
        return pack(mo, vo)

    jm = fd_vector(packed_of_mean, mean, step=step)
    jv = fd_symmetric_matrix(packed_of_cov, cov, step=step)
    return np.hstack([jm, jv.reshape(jv.shape[0], -1)])


def max_rel_err(analytic, numeric, floor=1e-8):
    """Elementwise relative error, ignoring entries tiny in both."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    mask = scale > floor
    if not np.any(mask):
        return 0.0
    return float(np.max(np.abs(analytic - numeric)[mask] / scale[mask]))
