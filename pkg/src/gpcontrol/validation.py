"""Input validation helpers.

Small check_* utilities in the spirit of scikit-learn's validation module:
normalize to float arrays, verify shapes, and enforce symmetry/PSD
requirements with explicit tolerances.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NotPsdError

SYM_RTOL = 1e-12
PSD_EIG_RTOL = 1e-10


def check_vector(x, name="x", size=None):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DimensionError(f"{name} must be a 1-d array, got shape {x.shape}")
    if size is not None and x.shape[0] != size:
        raise DimensionError(f"{name} must have length {size}, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")
    return x


def check_matrix(a, name="a", shape=None):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be a 2-d array, got shape {a.shape}")
    if shape is not None:
        want = tuple(shape)
        got = tuple(s if w is None else w for s, w in zip(a.shape, want))
        if a.shape != got:
            raise DimensionError(f"{name} must have shape {want}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def check_square(a, name="a", size=None):
    a = check_matrix(a, name)
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {a.shape}")
    if size is not None and a.shape[0] != size:
        raise DimensionError(f"{name} must be {size}x{size}, got {a.shape}")
    return a


def check_symmetric(a, name="a", rtol=SYM_RTOL):
    """Verify symmetry up to a relative tolerance and return the symmetrized matrix.

    Round-off scale asymmetry from chained updates is repaired by averaging
    with the transpose; anything larger is an error.
    """
    a = check_square(a, name)
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > rtol * scale:
        raise NotPsdError(f"{name} is not symmetric within tolerance {rtol}")
    return 0.5 * (a + a.T)


def check_psd(a, name="a", eig_rtol=PSD_EIG_RTOL):
    """Verify that a symmetric matrix is PSD.

    Eigenvalues may be negative only at round-off scale relative to the
    trace. Failures raise instead of being projected: silent repair would
    hide upstream math bugs.
    """
    a = check_symmetric(a, name)
    if a.size == 0:
        return a
    w = np.linalg.eigvalsh(a)
    floor = -eig_rtol * max(float(np.trace(a)), 1e-300)
    if w[0] < floor:
        raise NotPsdError(
            f"{name} is not positive semidefinite: min eigenvalue {w[0]:.3e} "
            f"below tolerance {floor:.3e}"
        )
    return a


def symmetrize(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))
