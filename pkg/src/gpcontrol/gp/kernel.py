"""Squared-exponential kernel with automatic relevance determination."""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError


def se_kernel(xa, xb, hp, same_point=False):
    """SE kernel value between two input vectors.

    k = signal_var * exp(-1/2 (xa-xb)^T Lambda^{-1} (xa-xb)), with
    Lambda = diag(length_scales^2). When `same_point` is set the noise
    variance is added, corresponding to the Kronecker-delta term for
    identical training indices.
    """
    xa = np.asarray(xa, dtype=float)
    xb = np.asarray(xb, dtype=float)
    ell = hp.length_scales
    if xa.shape != ell.shape or xb.shape != ell.shape:
        raise DimensionError(
            f"inputs of shape {xa.shape}, {xb.shape} do not match "
            f"{ell.shape[0]} length-scales"
        )
    r = (xa - xb) / ell
    val = hp.signal_var * np.exp(-0.5 * float(np.dot(r, r)))
    if same_point:
        val += hp.noise_var
    return float(val)


def se_kernel_matrix(x, hp, y=None):
    """Noise-free SE kernel matrix between row sets x and y (default x)."""
    x = np.asarray(x, dtype=float)
    xs = x / hp.length_scales
    ys = xs if y is None else np.asarray(y, dtype=float) / hp.length_scales
    sq = (
        np.sum(xs**2, axis=1)[:, None]
        + np.sum(ys**2, axis=1)[None, :]
        - 2.0 * xs @ ys.T
    )
    return hp.signal_var * np.exp(-0.5 * np.maximum(sq, 0.0))
