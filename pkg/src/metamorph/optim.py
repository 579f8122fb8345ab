"""Box-constrained quasi-Newton and augmented Lagrangian solvers.

Both the curve fit and the spring design problem go through
:func:`augmented_lagrangian`.  Equality constraints are ``c_e(x) = 0``,
inequalities ``c_i(x) >= 0`` and simple bounds ``lb <= x <= ub`` are kept
exactly by projection inside :func:`projected_bfgs`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class BFGSResult:
    x: np.ndarray
    f: float
    iterations: int
    converged: bool
    f_trace: list = field(default_factory=list)


def projected_gradient(x, g, lb, ub):
    return x - np.clip(x - g, lb, ub)


def projected_bfgs(fun, grad, x0, lb, ub, max_iter=200, gtol=1e-8, ftol=1e-15,
                   c1=1e-4, max_backtrack=40, max_step=1.0):
    """Minimise ``fun`` over a box with a projected BFGS line search.

    Variables sitting on a bound with the gradient pointing outward are held
    fixed for the step; the inverse-Hessian estimate is restricted to the
    remaining free set.  Accepted steps always satisfy the Armijo condition,
    so the recorded objective trace is non-increasing.  While the curvature
    estimate is the identity, steps are capped at ``max_step`` in the
    infinity norm.
    """
    lb = np.asarray(lb, float)
    ub = np.asarray(ub, float)
    x = np.clip(np.asarray(x0, float), lb, ub)
    n = x.size
    f = fun(x)
    g = grad(x)
    H = np.eye(n)
    fresh = True
    trace = [f]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        pg = projected_gradient(x, g, lb, ub)
        if np.max(np.abs(pg), initial=0.0) <= gtol:
            converged = True
            break
        active = ((x <= lb) & (g > 0)) | ((x >= ub) & (g < 0))
        free = ~active
        d = np.zeros(n)
        d[free] = -H[np.ix_(free, free)] @ g[free]
        if g @ d >= 0:
            H = np.eye(n)
            fresh = True
            d = np.where(free, -g, 0.0)
        alpha = 1.0
        if fresh:
            alpha = min(1.0, max_step / max(np.max(np.abs(d)), 1e-300))
        accepted = False
        for _ in range(max_backtrack):
            x_new = np.clip(x + alpha * d, lb, ub)
            step = x_new - x
            f_new = fun(x_new)
            if np.isfinite(f_new) and f_new <= f + c1 * (g @ step):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            if not fresh:
                H = np.eye(n)
                fresh = True
                continue
            break
        g_new = grad(x_new)
        s = x_new - x
        y = g_new - g
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if fresh:
                H = np.eye(n) * (sy / (y @ y))
                fresh = False
            rho = 1.0 / sy
            V = np.eye(n) - rho * np.outer(s, y)
            H = V @ H @ V.T + rho * np.outer(s, s)
        decrease = f - f_new
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        if decrease <= ftol * max(1.0, abs(f)):
            converged = True
            break
    return BFGSResult(x, f, it, converged, trace)


@dataclass
class ALMOptions:
    max_outer: int = 50
    max_inner: int = 200
    rho0: float = 10.0
    rho_growth: float = 10.0
    rho_max: float = 1e8
    ctol: float = 1e-8
    gtol: float = 1e-9
    stall_outer: int = 4


@dataclass
class ALMResult:
    x: np.ndarray
    f: float
    c_eq: np.ndarray
    c_ineq: np.ndarray
    mu_eq: np.ndarray
    mu_ineq: np.ndarray
    rho: float
    outer_iterations: int
    converged: bool
    trace: list = field(default_factory=list)
    inner_traces: list = field(default_factory=list)


class Problem:
    """Interface consumed by :func:`augmented_lagrangian`.

    ``values`` returns ``(f, c_eq, c_ineq)`` and ``derivatives`` returns
    ``(grad f, jac c_eq, jac c_ineq)``.  Empty constraint sets are length-0
    arrays.
    """

    def values(self, x):
        raise NotImplementedError

    def derivatives(self, x):
        raise NotImplementedError


def _violation(ce, ci, mu_i, rho):
    v = 0.0
    if ce.size:
        v = max(v, float(np.max(np.abs(ce))))
    if ci.size:
        v = max(v, float(np.max(np.abs(np.minimum(ci, mu_i / rho)))))
    return v


def augmented_lagrangian(problem, x0, lb, ub, opts=None, stop=None, callback=None):
    """Standard first-order multiplier method with bound-constrained inner solves.

    ``stop(x)`` may declare success early (e.g. when problem-specific
    tolerances hold); otherwise the run ends when the constraint violation
    drops below ``opts.ctol`` after an inner solve that converged, or when the
    violation stalls with the penalty at its cap.
    """
    opts = opts or ALMOptions()
    lb = np.asarray(lb, float)
    ub = np.asarray(ub, float)
    x = np.clip(np.asarray(x0, float), lb, ub)
    f, ce, ci = problem.values(x)
    mu_e = np.zeros(ce.size)
    mu_i = np.zeros(ci.size)
    rho = opts.rho0
    trace = []
    inner_traces = []
    best_v = np.inf
    stall = 0
    converged = False
    outer = 0

    def lagrangian(z):
        fz, cez, ciz = problem.values(z)
        shifted = np.maximum(0.0, mu_i - rho * ciz)
        return (fz - mu_e @ cez + 0.5 * rho * (cez @ cez)
                + (shifted @ shifted - mu_i @ mu_i) / (2.0 * rho))

    def lagrangian_grad(z):
        _, cez, ciz = problem.values(z)
        gf, Je, Ji = problem.derivatives(z)
        g = gf.copy()
        if cez.size:
            g -= Je.T @ (mu_e - rho * cez)
        if ciz.size:
            g -= Ji.T @ np.maximum(0.0, mu_i - rho * ciz)
        return g

    if stop is not None and stop(x):
        return ALMResult(x, f, ce, ci, mu_e, mu_i, rho, 0, True, trace, inner_traces)

    for outer in range(1, opts.max_outer + 1):
        res = projected_bfgs(lagrangian, lagrangian_grad, x, lb, ub,
                             max_iter=opts.max_inner, gtol=opts.gtol)
        x = res.x
        inner_traces.append(res.f_trace)
        f, ce, ci = problem.values(x)
        v = _violation(ce, ci, mu_i, rho)
        trace.append({"outer": outer, "f": f, "violation": v, "rho": rho,
                      "lagrangian": res.f, "inner_iterations": res.iterations})
        if callback is not None:
            callback(outer, x, f, ce, ci, rho)
        log.debug("ALM outer %d: f=%.6g viol=%.3g rho=%.1e", outer, f, v, rho)
        if stop is not None and stop(x):
            converged = True
            break
        if stop is None and v <= opts.ctol:
            converged = True
            break
        if ce.size:
            mu_e = mu_e - rho * ce
        if ci.size:
            mu_i = np.maximum(0.0, mu_i - rho * ci)
        if v < 0.25 * best_v:
            best_v = v
            stall = 0
        else:
            if rho >= opts.rho_max:
                stall += 1
            rho = min(rho * opts.rho_growth, opts.rho_max)
            best_v = min(best_v, v)
        if stall >= opts.stall_outer:
            break
    return ALMResult(x, f, ce, ci, mu_e, mu_i, rho, outer, converged, trace, inner_traces)


def central_difference(fun, x, step=1e-6):
    """Jacobian of a vector (or scalar) function by central differences.

    The step for coordinate ``i`` is ``step * max(1, |x_i|)``.  Returns an
    array of shape ``(m, n)``; scalar functions give shape ``(n,)``.
    """
    x = np.asarray(x, float)
    cols = []
    for i in range(x.size):
        h = step * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        cols.append((np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2.0 * h))
    return np.stack(cols, axis=-1)
