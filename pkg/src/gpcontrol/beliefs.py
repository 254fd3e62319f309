"""Gaussian state beliefs.

A belief is the mean and full covariance of a Gaussian over a state (or
state-control) vector; it is the object propagated through time by the
rollout engine. Instances are immutable and safe to share.
"""

from __future__ import annotations

import numpy as np

from .validation import check_psd, check_vector
from .errors import DimensionError


class GaussianBelief:
    """Mean vector and covariance matrix of a Gaussian distribution.

    The covariance is symmetrized on construction (chained moment updates
    accumulate transpose asymmetry at round-off scale) and checked to be
    positive semidefinite; a matrix failing the PSD check by more than the
    eigenvalue tolerance raises instead of being projected.
    """

    __slots__ = ("_mean", "_cov")

    def __init__(self, mean, cov):
        mean = check_vector(mean, "mean")
        cov = check_psd(np.asarray(cov, dtype=float), "cov")
        if cov.shape[0] != mean.shape[0]:
            raise DimensionError(
                f"mean has length {mean.shape[0]} but cov is {cov.shape}"
            )
        mean.setflags(write=False)
        cov.setflags(write=False)
        self._mean = mean
        self._cov = cov

    @property
    def mean(self):
        return self._mean

    @property
    def cov(self):
        return self._cov

    @property
    def dim(self):
        return self._mean.shape[0]

    @classmethod
    def certain(cls, mean):
        """Zero-covariance belief at a known point."""
        mean = check_vector(mean, "mean")
        return cls(mean, np.zeros((mean.shape[0], mean.shape[0])))

    def marginal(self, indices):
        """Belief over a subset of coordinates."""
        idx = np.asarray(indices, dtype=int)
        return GaussianBelief(self._mean[idx], self._cov[np.ix_(idx, idx)])

    def sample(self, rng, size=None):
        return rng.multivariate_normal(self._mean, self._cov, size=size,
                                       method="svd")

    def __repr__(self):
        return f"GaussianBelief(dim={self.dim})"

    def __eq__(self, other):
        if not isinstance(other, GaussianBelief):
            return NotImplemented
        return (np.array_equal(self._mean, other._mean)
                and np.array_equal(self._cov, other._cov))

    def __hash__(self):
        return hash((self._mean.tobytes(), self._cov.tobytes()))
