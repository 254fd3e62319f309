"""Multi-output GP dynamics model.

One conditionally independent GP per target dimension, trained on
state-control tuples as inputs and state differences as targets. The
prior mean is zero and hyperparameters (ARD length-scales, signal
variance, noise variance) are chosen by maximizing the log marginal
likelihood with a shared gradient-based minimizer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from ..errors import DimensionError, NumericalError
from ..optimize import OptimSettings, minimize
from ..validation import check_matrix
from .kernel import se_kernel_matrix

FORMAT_TAG = "gpcontrol-gp-v1"

_EVIDENCE_SETTINGS = OptimSettings(max_iters=200, grad_tol=1e-6)


@dataclass(frozen=True)
class GpHyperparams:
    """Kernel hyperparameters in natural space; optimized in log space."""

    length_scales: np.ndarray
    signal_var: float
    noise_var: float

    def __post_init__(self):
        ell = np.asarray(self.length_scales, dtype=float)
        object.__setattr__(self, "length_scales", ell)
        if np.any(ell <= 0) or self.signal_var <= 0 or self.noise_var <= 0:
            raise ValueError("hyperparameters must be strictly positive")

    def to_log_vector(self):
        return np.concatenate([
            np.log(self.length_scales),
            [0.5 * np.log(self.signal_var), 0.5 * np.log(self.noise_var)],
        ])

    @classmethod
    def from_log_vector(cls, v):
        v = np.asarray(v, dtype=float)
        return cls(
            length_scales=np.exp(v[:-2]),
            signal_var=float(np.exp(2 * v[-2])),
            noise_var=float(np.exp(2 * v[-1])),
        )


class GpModel:
    """Fitted multi-output GP: training set plus per-output cached solves.

    For output a, `beta[a]` solves (K_a + noise_a I) beta = y_a and
    `chol[a]` is the lower Cholesky factor of the noisy kernel matrix.
    Instances are immutable and shareable across workers.
    """

    def __init__(self, inputs, targets, hyperparams, jitters=None):
        self.inputs = check_matrix(np.asarray(inputs, float), "inputs")
        self.targets = check_matrix(np.asarray(targets, float), "targets")
        if self.targets.shape[0] != self.inputs.shape[0]:
            raise DimensionError("inputs and targets row counts differ")
        self.hyperparams = list(hyperparams)
        if len(self.hyperparams) != self.targets.shape[1]:
            raise DimensionError("need one hyperparameter set per output")
        self.jitters = list(jitters) if jitters is not None else [0.0] * self.num_outputs
        self.chol = []
        self.beta = []
        for a, hp in enumerate(self.hyperparams):
            k = se_kernel_matrix(self.inputs, hp)
            a_mat = k + (hp.noise_var + self.jitters[a]) * np.eye(k.shape[0])
            try:
                low = np.linalg.cholesky(a_mat)
            except np.linalg.LinAlgError as exc:
                raise NumericalError(
                    f"Cholesky factorization failed for output {a}"
                ) from exc
            self.chol.append(low)
            self.beta.append(_chol_solve(low, self.targets[:, a]))
        self.inputs.setflags(write=False)
        self.targets.setflags(write=False)

    @property
    def num_points(self):
        return self.inputs.shape[0]

    @property
    def input_dim(self):
        return self.inputs.shape[1]

    @property
    def num_outputs(self):
        return self.targets.shape[1]

    def noise_variances(self):
        return np.array([hp.noise_var for hp in self.hyperparams])

    def predict_point(self, xq):
        """Posterior mean and variance per output at a deterministic input.

        var = k** - k*^T (K + noise I)^{-1} k*, clamped to zero when a
        round-off negative appears; a negative beyond round-off scale is
        an error.
        """
        xq = np.asarray(xq, dtype=float)
        if xq.shape != (self.input_dim,):
            raise DimensionError(
                f"query has shape {xq.shape}, expected ({self.input_dim},)")
        means = np.empty(self.num_outputs)
        variances = np.empty(self.num_outputs)
        for a, hp in enumerate(self.hyperparams):
            kstar = se_kernel_matrix(self.inputs, hp, xq[None, :])[:, 0]
            means[a] = float(kstar @ self.beta[a])
            sol = solve_triangular(self.chol[a], kstar, lower=True)
            var = hp.signal_var - float(np.dot(sol, sol))
            if var < -1e-12 * max(hp.signal_var, 1.0):
                raise NumericalError(
                    f"negative predictive variance {var:.3e} for output {a}")
            variances[a] = max(var, 0.0)
        return means, variances

    def predict(self, x):
        """Batch posterior means (rows of x), shape (m, E)."""
        x = check_matrix(np.asarray(x, float), "x", shape=(None, self.input_dim))
        out = np.empty((x.shape[0], self.num_outputs))
        for a, hp in enumerate(self.hyperparams):
            out[:, a] = se_kernel_matrix(x, hp, self.inputs) @ self.beta[a]
        return out

    def to_dict(self):
        return {
            "format": FORMAT_TAG,
            "inputs": self.inputs.tolist(),
            "targets": self.targets.tolist(),
            "hyperparams": [
                {
                    "length_scales": hp.length_scales.tolist(),
                    "signal_var": hp.signal_var,
                    "noise_var": hp.noise_var,
                }
                for hp in self.hyperparams
            ],
            "jitters": list(self.jitters),
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def from_dict(cls, data):
        if data.get("format") != FORMAT_TAG:
            raise ValueError(f"unsupported model format {data.get('format')!r}")
        hyper = [
            GpHyperparams(
                length_scales=np.asarray(h["length_scales"], float),
                signal_var=float(h["signal_var"]),
                noise_var=float(h["noise_var"]),
            )
            for h in data["hyperparams"]
        ]
        return cls(np.asarray(data["inputs"], float),
                   np.asarray(data["targets"], float),
                   hyper, data.get("jitters"))

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _chol_solve(low, b):
    return cho_solve((low, True), b)


def log_evidence(inputs, targets_col, hp, sq_dists=None):
    """Log marginal likelihood of one output dimension and its gradient.

    Returns (value, grad) where grad is taken with respect to the
    log-space vector [log ell_1..d, log sigma_f, log sigma_w].
    """
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(targets_col, dtype=float)
    n, d = x.shape
    if sq_dists is None:
        sq_dists = _pairwise_sq_dists(x)
    ell2 = hp.length_scales**2
    arg = np.einsum("ijk,k->ij", sq_dists, 1.0 / ell2)
    k = hp.signal_var * np.exp(-0.5 * arg)
    a_mat = k + hp.noise_var * np.eye(n)
    try:
        low = np.linalg.cholesky(a_mat)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("kernel matrix is not positive definite") from exc
    alpha = _chol_solve(low, y)
    value = (
        -0.5 * float(np.dot(y, alpha))
        - float(np.sum(np.log(np.diag(low))))
        - 0.5 * n * np.log(2 * np.pi)
    )

    a_inv = _chol_solve(low, np.eye(n))
    w = np.outer(alpha, alpha) - a_inv
    grad = np.empty(d + 2)
    for kdim in range(d):
        dk = k * (sq_dists[:, :, kdim] / ell2[kdim])
        grad[kdim] = 0.5 * float(np.sum(w * dk))
    grad[d] = 0.5 * float(np.sum(w * (2.0 * k)))
    grad[d + 1] = 0.5 * float(np.trace(w)) * 2.0 * hp.noise_var
    return value, grad


def _pairwise_sq_dists(x):
    diff = x[:, None, :] - x[None, :, :]
    return diff**2


def _initial_hyperparams(x, y_col):
    ell = np.std(x, axis=0)
    ell = np.where(ell > 1e-6, ell, 1.0)
    sf2 = max(float(np.var(y_col)), 1e-12)
    return GpHyperparams(length_scales=ell, signal_var=sf2,
                         noise_var=max(0.01 * sf2, 1e-12))


def fit(inputs, targets, restarts=3, seed=0, init=None,
        settings=_EVIDENCE_SETTINGS):
    """Fit one GP per target dimension by evidence maximization.

    Runs `restarts` optimizations per output (the first from scale-aware
    defaults or `init`, the rest from log-space perturbations by a factor
    uniform in e^[-1, 1]) and keeps the best. Deterministic given `seed`.
    """
    x = check_matrix(np.asarray(inputs, float), "inputs")
    y = np.asarray(targets, float)
    if y.ndim == 1:
        y = y[:, None]
    y = check_matrix(y, "targets", shape=(x.shape[0], None))
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least 2 training points")
    _check_duplicates(x)
    if restarts < 1:
        raise ValueError("restarts must be >= 1")

    rng = np.random.default_rng(seed)
    sq_dists = _pairwise_sq_dists(x)
    hyper = []
    for a in range(y.shape[1]):
        base = init if init is not None else _initial_hyperparams(x, y[:, a])
        v0 = base.to_log_vector()
        best = None
        for r in range(restarts):
            start = v0 if r == 0 else v0 + rng.uniform(-1.0, 1.0, size=v0.shape)

            def neg_evidence(v):
                hp = GpHyperparams.from_log_vector(v)
                try:
                    val, grad = log_evidence(x, y[:, a], hp, sq_dists)
                except NumericalError:
                    return np.inf, np.zeros_like(v)
                return -val, -grad

            f0, _ = neg_evidence(start)
            if not np.isfinite(f0):
                continue
            v_opt, f_opt, _ = minimize(neg_evidence, start, settings)
            if best is None or f_opt < best[1]:
                best = (v_opt, f_opt)
        if best is None:
            raise NumericalError(f"evidence optimization failed for output {a}")
        hyper.append(GpHyperparams.from_log_vector(best[0]))

    jitters = _resolve_jitters(x, hyper)
    return GpModel(x, y, hyper, jitters)


def _resolve_jitters(x, hyper):
    """Escalating diagonal jitter until each output factorizes.

    Starts at 1e-10 * trace/n and multiplies by 10 up to 1e-4 * trace/n,
    then fails naming the output dimension.
    """
    jitters = []
    for a, hp in enumerate(hyper):
        k = se_kernel_matrix(x, hp)
        a_mat = k + hp.noise_var * np.eye(x.shape[0])
        unit = float(np.trace(a_mat)) / x.shape[0]
        jitter = 0.0
        level = 1e-10 * unit
        while True:
            try:
                np.linalg.cholesky(a_mat + jitter * np.eye(x.shape[0]))
                break
            except np.linalg.LinAlgError:
                jitter = level if jitter == 0.0 else jitter * 10.0
                if jitter > 1e-4 * unit:
                    raise NumericalError(
                        f"Cholesky failed for output {a} after jitter escalation")
        jitters.append(jitter)
    return jitters


def _check_duplicates(x):
    n = x.shape[0]
    if n > 2000:
        return  # quadratic scan too costly; duplicates are harmless with noise
    diff = np.abs(x[:, None, :] - x[None, :, :]).max(axis=2)
    np.fill_diagonal(diff, np.inf)
    if np.min(diff) < 1e-10:
        i, j = np.unravel_index(np.argmin(diff), diff.shape)
        raise ValueError(f"training rows {i} and {j} coincide within 1e-10")


class GpRegressor:
    """Estimator-style wrapper: fit(X, Y) then predict(X).

    Thin scikit-learn-flavored surface over `fit`; the fitted state is
    exposed as `model_` for the inference modules.
    """

    def __init__(self, restarts=3, seed=0):
        self.restarts = restarts
        self.seed = seed
        self.model_ = None

    def get_params(self, deep=True):
        return {"restarts": self.restarts, "seed": self.seed}

    def set_params(self, **params):
        for key, value in params.items():
            if key not in ("restarts", "seed"):
                raise ValueError(f"unknown parameter {key!r}")
            setattr(self, key, value)
        return self

    def fit(self, x, y):
        self.model_ = fit(x, y, restarts=self.restarts, seed=self.seed)
        return self

    def predict(self, x, return_var=False):
        if self.model_ is None:
            raise RuntimeError("GpRegressor is not fitted")
        if not return_var:
            return self.model_.predict(x)
        x = np.asarray(x, dtype=float)
        means = np.empty((x.shape[0], self.model_.num_outputs))
        variances = np.empty_like(means)
        for i, row in enumerate(x):
            means[i], variances[i] = self.model_.predict_point(row)
        return means, variances
