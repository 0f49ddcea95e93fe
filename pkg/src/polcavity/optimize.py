"""Damped Gauss-Newton (Levenberg-Marquardt) least squares.

Small dense problems only: each step solves the augmented system

    [     J       ]        [ -r ]
    [ sqrt(lam) D ] step = [  0 ]

by least squares, where ``D`` holds the running maximum of the Jacobian
column norms (Moré's scaling).  Rank-deficient Jacobians are tolerated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class LeastSquaresResult:
    x: np.ndarray
    residuals: np.ndarray
    jacobian: np.ndarray
    cost: float
    converged: bool
    n_iter: int
    n_eval: int
    message: str


def levenberg_marquardt(
    fun: Callable[[np.ndarray], np.ndarray],
    jac: Callable[[np.ndarray], np.ndarray],
    x0,
    max_iter: int = 200,
    gtol: float = 1e-12,
    xtol: float = 1e-13,
    ftol: float = 1e-15,
    damping: float = 1e-3,
) -> LeastSquaresResult:
    """Minimize ``0.5 * |fun(x)|^2``.

    Convergence is declared when the scaled gradient, the relative step or
    the relative cost reduction falls below its tolerance.
    """
    x = np.array(x0, dtype=float)
    r = fun(x)
    J = jac(x)
    n_eval = 1
    cost = 0.5 * float(r @ r)
    lam = damping
    diag = np.linalg.norm(J, axis=0)
    diag[diag == 0] = 1.0

    for it in range(1, max_iter + 1):
        diag = np.maximum(diag, np.linalg.norm(J, axis=0))
        g = J.T @ r
        if np.max(np.abs(g) / diag) <= gtol * max(1.0, np.sqrt(2 * cost)):
            return LeastSquaresResult(x, r, J, cost, True, it - 1, n_eval, "gradient tolerance")
        if cost == 0.0:
            return LeastSquaresResult(x, r, J, cost, True, it - 1, n_eval, "zero residual")

        while True:
            A = np.vstack([J, np.sqrt(lam) * np.diag(diag)])
            b = np.concatenate([-r, np.zeros(x.size)])
            step = np.linalg.lstsq(A, b, rcond=None)[0]
            x_new = x + step
            r_new = fun(x_new)
            n_eval += 1
            cost_new = 0.5 * float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
            if cost_new < cost:
                break
            lam *= 10.0
            if lam > 1e20:
                return LeastSquaresResult(x, r, J, cost, True, it, n_eval, "no further decrease possible")

        reduction = (cost - cost_new) / cost
        small_step = np.linalg.norm(diag * step) <= xtol * (np.linalg.norm(diag * x) + xtol)
        x, r, cost = x_new, r_new, cost_new
        J = jac(x)
        lam = max(lam / 10.0, 1e-15)
        if small_step:
            return LeastSquaresResult(x, r, J, cost, True, it, n_eval, "step tolerance")
        if reduction <= ftol:
            return LeastSquaresResult(x, r, J, cost, True, it, n_eval, "cost tolerance")

    return LeastSquaresResult(x, r, J, cost, False, max_iter, n_eval, "maximum iterations reached")


def central_difference_jacobian(fun, x, rel_step: float = 1e-6) -> np.ndarray:
    """Two-sided finite-difference Jacobian, used to check analytic derivatives."""
    x = np.asarray(x, dtype=float)
    f0 = fun(x)
    J = np.empty((f0.size, x.size))
    for k in range(x.size):
        h = rel_step * max(1.0, abs(x[k]))
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        J[:, k] = (fun(xp) - fun(xm)) / (2 * h)
    return J
