"""Limited-memory quasi-Newton minimizer with a strong Wolfe line search.

Used for both policy improvement and GP evidence maximization. The
implementation is the standard two-loop L-BFGS recursion with a
bracket/zoom line search enforcing sufficient decrease and the strong
curvature condition. Everything is deterministic: rerunning with
identical inputs reproduces the trace bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class OptimSettings:
    max_iters: int = 200
    grad_tol: float = 1e-6
    sufficient_decrease: float = 1e-4
    curvature: float = 0.9
    history: int = 10
    max_line_search: int = 25

    def __post_init__(self):
        if not 0 < self.sufficient_decrease < self.curvature < 1:
            raise ValueError(
                "need 0 < sufficient_decrease < curvature < 1, got "
                f"{self.sufficient_decrease}, {self.curvature}"
            )


@dataclass
class OptimTrace:
    """Per-iteration record of accepted steps."""

    iterations: list = field(default_factory=list)
    status: str = "running"

    def append(self, iteration, value, grad_norm, step_length):
        self.iterations.append(
            {"iter": iteration, "value": value, "grad_norm": grad_norm,
             "step": step_length}
        )


class _ObjectiveWrapper:
    """Counts evaluations and remembers the best finite iterate."""

    def __init__(self, objective):
        self._objective = objective
        self.evals = 0
        self.best_x = None
        self.best_value = np.inf

    def __call__(self, x):
        self.evals += 1
        value, grad = self._objective(x)
        value = float(value)
        grad = np.asarray(grad, dtype=float)
        if np.isfinite(value) and np.all(np.isfinite(grad)):
            if value < self.best_value:
                self.best_value = value
                self.best_x = x.copy()
        return value, grad


def minimize(objective, x0, settings: OptimSettings | None = None):
    """Minimize a smooth function given values and gradients.

    objective: callable x -> (value, gradient).
    Returns (x_best, value_best, trace). trace.status is one of
    'converged', 'max_iters', 'line_search_failed', 'aborted_nonfinite'.
    Every accepted step satisfies the sufficient-decrease condition, so
    accepted values are monotonically non-increasing.
    """
    if settings is None:
        settings = OptimSettings()
    x = np.asarray(x0, dtype=float).copy()
    fun = _ObjectiveWrapper(objective)
    trace = OptimTrace()

    f, g = fun(x)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise ValueError("objective is not finite at the initial point")
    trace.append(0, f, float(np.max(np.abs(g))), 0.0)

    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    rho_hist: list[float] = []

    for it in range(1, settings.max_iters + 1):
        if np.max(np.abs(g)) <= settings.grad_tol:
            trace.status = "converged"
            break

        d = _lbfgs_direction(g, s_hist, y_hist, rho_hist)
        dg = float(np.dot(d, g))
        if dg >= 0:
            # defective curvature history; restart from steepest descent
            s_hist.clear(), y_hist.clear(), rho_hist.clear()
            d = -g
            dg = -float(np.dot(g, g))

        alpha0 = 1.0 if s_hist else min(1.0, 1.0 / max(np.max(np.abs(g)), 1e-12))
        result = _wolfe_line_search(fun, x, f, g, d, dg, alpha0, settings)
        if result is None:
            trace.status = "line_search_failed"
            break
        alpha, f_new, g_new = result
        if not (np.isfinite(f_new) and np.all(np.isfinite(g_new))):
            trace.status = "aborted_nonfinite"
            break

        s = alpha * d
        y = g_new - g
        sy = float(np.dot(s, y))
        if sy > 1e-10 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > settings.history:
                s_hist.pop(0), y_hist.pop(0), rho_hist.pop(0)

        x = x + s
        f, g = f_new, g_new
        trace.append(it, f, float(np.max(np.abs(g))), alpha)
    else:
        trace.status = "max_iters"

    if fun.best_x is not None and fun.best_value < f:
        x, f = fun.best_x, fun.best_value
    return x, f, trace


def _lbfgs_direction(g, s_hist, y_hist, rho_hist):
    q = -g.copy()
    if not s_hist:
        return q
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
        a = rho * np.dot(s, q)
        alphas.append(a)
        q -= a * y
    s_last, y_last = s_hist[-1], y_hist[-1]
    gamma = np.dot(s_last, y_last) / max(np.dot(y_last, y_last), 1e-300)
    q *= gamma
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return q


def _wolfe_line_search(fun, x, f0, g0, d, dg0, alpha0, settings):
    """Bracket/zoom strong Wolfe search (Nocedal & Wright, Alg. 3.5/3.6)."""
    c1, c2 = settings.sufficient_decrease, settings.curvature
    alpha_prev, f_prev = 0.0, f0
    alpha = alpha0
    alpha_max = 1e10

    for i in range(settings.max_line_search):
        f_a, g_a = fun(x + alpha * d)
        if not np.isfinite(f_a):
            # shrink back toward the last good point
            result = _zoom(fun, x, f0, dg0, d, alpha_prev, f_prev, alpha,
                           settings, hi_finite=False)
            return result
        dg_a = float(np.dot(g_a, d))
        if f_a > f0 + c1 * alpha * dg0 or (i > 0 and f_a >= f_prev):
            return _zoom(fun, x, f0, dg0, d, alpha_prev, f_prev, alpha,
                         settings)
        if abs(dg_a) <= -c2 * dg0:
            return alpha, f_a, g_a
        if dg_a >= 0:
            return _zoom(fun, x, f0, dg0, d, alpha, f_a, alpha_prev, settings)
        alpha_prev, f_prev = alpha, f_a
        alpha = min(2.0 * alpha, alpha_max)
    return None


def _zoom(fun, x, f0, dg0, d, alpha_lo, f_lo, alpha_hi, settings,
          hi_finite=True):
    c1, c2 = settings.sufficient_decrease, settings.curvature
    for _ in range(settings.max_line_search):
        if hi_finite:
            alpha = 0.5 * (alpha_lo + alpha_hi)
        else:
            alpha = alpha_lo + 0.25 * (alpha_hi - alpha_lo)
        f_a, g_a = fun(x + alpha * d)
        if not np.isfinite(f_a):
            alpha_hi = alpha
            hi_finite = False
            continue
        hi_finite = True
        if f_a > f0 + c1 * alpha * dg0 or f_a >= f_lo:
            alpha_hi = alpha
        else:
            dg_a = float(np.dot(g_a, d))
            if abs(dg_a) <= -c2 * dg0:
                return alpha, f_a, g_a
            if dg_a * (alpha_hi - alpha_lo) >= 0:
                alpha_hi = alpha_lo
            alpha_lo, f_lo = alpha, f_a
        if abs(alpha_hi - alpha_lo) < 1e-16 * max(1.0, abs(alpha_lo)):
            break
    if f_lo < f0 + c1 * alpha_lo * dg0 and alpha_lo > 0:
        # curvature condition unmet but decrease achieved; accept
        f_a, g_a = fun(x + alpha_lo * d)
        return alpha_lo, f_a, g_a
    return None
