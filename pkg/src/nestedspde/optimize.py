"""Quasi-Newton maximisation with finite-difference derivatives."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class HessianError(np.linalg.LinAlgError):
    """Finite-difference Hessian is not negative definite at the optimum."""

    def __init__(self, eigenvalues):
        self.eigenvalues = np.asarray(eigenvalues)
        super().__init__(
            "Hessian of the objective is not negative definite; eigenvalues: "
            + ", ".join(f"{v:.4g}" for v in self.eigenvalues)
        )


@dataclass
class OptimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    n_eval: int
    converged: bool
    message: str
    history: list = field(default_factory=list)


def central_gradient(f, x, step=1e-4, f0=None):
    """Central-difference gradient.  Non-finite one-sided values fall back to
    a one-sided difference against ``f0``."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    n_eval = 0
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = step
        fp, fm = f(x + e), f(x - e)
        n_eval += 2
        if np.isfinite(fp) and np.isfinite(fm):
            g[i] = (fp - fm) / (2 * step)
        elif f0 is not None and np.isfinite(fp):
            g[i] = (fp - f0) / step
        elif f0 is not None and np.isfinite(fm):
            g[i] = (f0 - fm) / step
        else:
            g[i] = 0.0
    return g, n_eval


def bfgs_maximize(f, x0, *, gtol=1e-5, ftol=1e-9, max_iter=2000, step=1e-4,
                  max_step=3.0, callback=None) -> OptimizeResult:
    """Maximise ``f`` by BFGS with a backtracking (Armijo) line search.

    Parameters
    ----------
    f : callable
        Objective; may return ``-inf`` for infeasible points, which the line
        search treats as rejected steps.
    gtol : float
        Stop when the infinity norm of the gradient falls below this.
    ftol : float
        Stop when the relative objective change of an accepted step falls
        below this.
    step : float
        Central-difference step.
    max_step : float
        Cap on the Euclidean length of a trial step.
    """
    x = np.array(x0, dtype=float)
    n = len(x)
    fx = f(x)
    n_eval = 1
    if not np.isfinite(fx):
        raise ValueError("objective is not finite at the starting point")
    if n == 0:
        return OptimizeResult(x, fx, np.zeros(0), 0, n_eval, True, "no free parameters", [fx])
    g, k = central_gradient(f, x, step, fx)
    n_eval += k
    Hinv = np.eye(n)
    history = [fx]
    converged, message = False, "maximum number of iterations reached"
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) < gtol:
            converged, message = True, "gradient tolerance reached"
            it -= 1
            break
        d = Hinv @ g
        if not g @ d > 0:
            Hinv = np.eye(n)
            d = g.copy()
        norm = np.linalg.norm(d)
        t = min(1.0, max_step / norm) if norm > 0 else 1.0
        slope = g @ d
        accepted = False
        for _ in range(40):
            xn = x + t * d
            fn = f(xn)
            n_eval += 1
            if np.isfinite(fn) and fn >= fx + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if np.array_equal(Hinv, np.eye(n)):
                converged = np.max(np.abs(g)) < 100 * gtol
                message = "line search failed"
                break
            Hinv = np.eye(n)
            continue
        gn, k = central_gradient(f, xn, step, fn)
        n_eval += k
        s = xn - x
        y = g - gn  # gradient of the minimised objective -f
        rel = abs(fn - fx) / max(1.0, abs(fx))
        x, fx, g = xn, fn, gn
        history.append(fx)
        if callback is not None:
            callback(x, fx)
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if it == 1:
                Hinv = np.eye(n) * (sy / (y @ y))
            rho = 1.0 / sy
            V = np.eye(n) - rho * np.outer(s, y)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        if np.max(np.abs(g)) < gtol:
            converged, message = True, "gradient tolerance reached"
            break
        if rel < ftol:
            converged, message = True, "relative objective change below tolerance"
            break
    log.debug("bfgs: %s after %d iterations, f=%.10g", message, it, fx)
    return OptimizeResult(x, fx, g, it, n_eval, converged, message, history)


def central_hessian(f, x, step=1e-3):
    """Symmetric central-difference Hessian of ``f`` at ``x``."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    f0 = f(x)
    H = np.zeros((n, n))
    E = np.eye(n) * step
    for i in range(n):
        H[i, i] = (f(x + E[i]) - 2 * f0 + f(x - E[i])) / step ** 2
        for j in range(i):
            H[i, j] = H[j, i] = (
                f(x + E[i] + E[j]) - f(x + E[i] - E[j]) - f(x - E[i] + E[j]) + f(x - E[i] - E[j])
            ) / (4 * step ** 2)
    return H


def hessian_covariance(f, x, step=1e-3):
    """Negative inverse of the Hessian of ``f`` at a maximum ``x``.

    Raises
    ------
    HessianError
        If the Hessian is not negative definite (eigenvalues attached).
    """
    H = central_hessian(f, x, step)
    if not np.all(np.isfinite(H)):
        raise HessianError(np.full(len(x), np.nan))
    eig = np.linalg.eigvalsh(H)
    if np.any(eig >= 0):
        raise HessianError(eig)
    return np.linalg.inv(-H)
