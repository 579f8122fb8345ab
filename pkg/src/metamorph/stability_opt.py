"""Energy shaping of spring parameters so that every form is a stable minimum.

For each form the null-space basis ``N`` of the constraint Jacobian is fixed,
so the force residual and the reduced Hessian depend on the design only
through the spring stiffnesses ``k`` and rest lengths ``l``.  With the
current spring length ``d`` and its coordinate derivatives,

    grad V_s = k (d - l) grad d
    hess V_s = k (grad d grad d^T + (d - l) hess d)

so :class:`FormAnalysis` precomputes the design-independent pieces once per
form and evaluates any design in a few small matrix products.

The reduced Hessian includes the curvature of the constraint manifold,
``-N (sum_k lambda_k hess C_k) N^T`` with ``J^T lambda = grad V``.  Without
it a pendulum under gravity has zero reduced stiffness; the plain
``N H N^T`` projection remains available with ``constraint_curvature=False``.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from metamorph.optim import ALMOptions, Problem, augmented_lagrangian, central_difference
from metamorph.rigidbody import (
    LockedStructureError,
    assemble_jacobian,
    constraint_curvature,
    null_space_basis,
)
from metamorph.spring_energy import (
    gravity_energy,
    gravity_gradient,
    spring_dofs,
    spring_length_derivatives,
    total_energy_report,
)

log = logging.getLogger(__name__)


class OptimizationError(RuntimeError):
    def __init__(self, message, iterate=None):
        super().__init__(message)
        self.iterate = iterate


@dataclass
class DesignVector:
    """Per-spring stiffness and rest length with their box bounds.

    ``lb`` and ``ub`` have shape (S, 2) with columns (k, l).
    """

    k: np.ndarray
    l: np.ndarray
    lb: np.ndarray
    ub: np.ndarray

    def __post_init__(self):
        self.k = np.asarray(self.k, float).reshape(-1)
        self.l = np.asarray(self.l, float).reshape(-1)
        self.lb = np.asarray(self.lb, float).reshape(-1, 2)
        self.ub = np.asarray(self.ub, float).reshape(-1, 2)

    def __len__(self):
        return self.k.size

    @classmethod
    def from_springs(cls, springs, k_ref, k_range=(0.01, 100.0), l_range=(0.5, 1.5)):
        k = np.array([s.k for s in springs], float)
        l = np.array([s.l for s in springs], float)
        l0 = np.array([s.l0 for s in springs], float)
        lb = np.column_stack([np.full(len(springs), k_range[0] * k_ref), l_range[0] * l0])
        ub = np.column_stack([np.full(len(springs), k_range[1] * k_ref), l_range[1] * l0])
        return cls(k, l, lb.reshape(-1, 2), ub.reshape(-1, 2))

    def within_bounds(self):
        return (np.all(self.lb[:, 0] <= self.k) and np.all(self.k <= self.ub[:, 0])
                and np.all(self.lb[:, 1] <= self.l) and np.all(self.l <= self.ub[:, 1]))

    def copy(self):
        return DesignVector(self.k.copy(), self.l.copy(), self.lb.copy(), self.ub.copy())

    def extended(self, k, l, lb, ub):
        return DesignVector(np.append(self.k, k), np.append(self.l, l),
                            np.vstack([self.lb, np.reshape(lb, (1, 2))]),
                            np.vstack([self.ub, np.reshape(ub, (1, 2))]))


@dataclass
class OptimizerOptions:
    w: float = 0.001
    eig_margin_rel: float = 1e-4
    eig_margin: float | None = None
    residual_tol_rel: float = 1e-6
    residual_tol: float | None = None
    max_outer: int = 50
    max_inner: int = 200
    penalty_growth: float = 10.0
    penalty_max: float = 1e8
    fd_step: float = 1e-6
    constraint_curvature: bool = True
    stall_outer: int = 4

    def margins(self, structure):
        """Absolute ``(residual_tol, eig_margin)`` for a structure."""
        tol = self.residual_tol
        if tol is None:
            tol = self.residual_tol_rel * structure.force_scale()
        eps = self.eig_margin
        if eps is None:
            eps = self.eig_margin_rel * structure.spring_scale()
        return tol, eps


@dataclass
class FormStability:
    label: str
    residual_norm: float
    eigenvalues: list
    V: float
    spring_V: float

    @property
    def min_eigenvalue(self):
        return min(self.eigenvalues) if self.eigenvalues else float("inf")


@dataclass
class StabilityReport:
    forms: list
    converged: bool
    iterations: int
    wall_time: float = 0.0
    residual_tol: float = 0.0
    eig_margin: float = 0.0

    def to_dict(self):
        return {
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "residual_tol": float(self.residual_tol),
            "eig_margin": float(self.eig_margin),
            "forms": [{"label": f.label, "residual_norm": float(f.residual_norm),
                       "eigenvalues": [float(e) for e in sorted(f.eigenvalues)],
                       "V": float(f.V), "spring_V": float(f.spring_V)} for f in self.forms],
        }

    @classmethod
    def from_dict(cls, d):
        forms = [FormStability(f.get("label", ""), f["residual_norm"], sorted(f["eigenvalues"]),
                               f.get("V", 0.0), f.get("spring_V", 0.0)) for f in d.get("forms", [])]
        return cls(forms, bool(d.get("converged", False)), int(d.get("iterations", 0)), 0.0,
                   float(d.get("residual_tol", 0.0)), float(d.get("eig_margin", 0.0)))


def _design_arrays(structure, design):
    if design is None:
        return (np.array([s.k for s in structure.springs], float),
                np.array([s.l for s in structure.springs], float))
    return np.asarray(design.k, float), np.asarray(design.l, float)


def _basis(structure, form):
    J = assemble_jacobian(structure, form)
    basis = null_space_basis(J)
    if basis.locked:
        raise LockedStructureError("structure has no free motion in form %r" % form.label)
    return J, basis


def _multipliers(J, grad, basis):
    """Least-squares constraint forces with ``J^T lambda ~= grad``."""
    if J.shape[0] == 0:
        return np.zeros(0)
    rcond = basis.sigma_cut / max(np.linalg.norm(J, 2), 1e-300)
    return np.linalg.lstsq(J.T, grad, rcond=max(rcond, 1e-12))[0]


def first_order_residual(structure, form, design=None):
    """``N (f_ext - grad V)``: forces along the feasible motions of ``form``."""
    _, basis = _basis(structure, form)
    rep = total_energy_report(structure, form, design, with_hessian=False)
    return -basis.N @ rep.grad


def projected_hessian(structure, form, design=None, constraint_curvature_term=True):
    """Energy Hessian restricted to the constraint null space (r x r)."""
    J, basis = _basis(structure, form)
    rep = total_energy_report(structure, form, design)
    N = basis.N
    H = rep.hess
    if constraint_curvature_term and J.shape[0]:
        lam = _multipliers(J, rep.grad, basis)
        H = H - constraint_curvature(structure, form, lam)
    Hn = N @ H @ N.T
    return 0.5 * (Hn + Hn.T)


def sorted_eigh(H):
    w, v = np.linalg.eigh(0.5 * (H + H.T))
    order = np.argsort(w)
    return w[order], v[:, order]


class FormAnalysis:
    """Design-independent pieces of the stability conditions for one form."""

    def __init__(self, structure, form, constraint_curvature_term=True):
        self.label = form.label
        J, basis = _basis(structure, form)
        self.basis = basis
        N = basis.N
        self.N = N
        n = structure.n_dof
        grav = gravity_gradient(structure, form)
        self.V_gravity = gravity_energy(structure, form)
        self.b = N @ grav
        S = len(structure.springs)
        r = N.shape[0]
        self.d = np.zeros(S)
        self.A = np.zeros((S, r))
        self.B = np.zeros((S, r, r))
        self.P_g = np.zeros((r, r))
        use_curv = constraint_curvature_term and J.shape[0] > 0
        if use_curv:
            lam_g = _multipliers(J, grav, basis)
            Gg = constraint_curvature(structure, form, lam_g)
            self.P_g = N @ Gg @ N.T
        for i, s in enumerate(structure.springs):
            p1, p2 = form.poses[s.body_1], form.poses[s.body_2]
            d, gd, hd = spring_length_derivatives(s, p1, p2)
            idx = spring_dofs(s)
            grad_full = np.zeros(n)
            grad_full[idx] = gd
            Nsub = N[:, idx]
            self.d[i] = d
            self.A[i] = N @ grad_full
            Bi = Nsub @ hd @ Nsub.T
            if use_curv:
                lam_s = _multipliers(J, grad_full, basis)
                Bi = Bi - N @ constraint_curvature(structure, form, lam_s) @ N.T
            self.B[i] = 0.5 * (Bi + Bi.T)

    @property
    def r(self):
        return self.N.shape[0]

    def residual(self, k, l):
        return -(self.b + (k * (self.d - l)) @ self.A)

    def hessian(self, k, l):
        AA = np.einsum("si,sj->sij", self.A, self.A)
        H = np.einsum("s,sij->ij", k, AA) + np.einsum("s,sij->ij", k * (self.d - l), self.B) - self.P_g
        return 0.5 * (H + H.T)

    def hessian_derivatives(self, k, l):
        """``dH/dk_s`` and ``dH/dl_s`` as (S, r, r) arrays."""
        AA = np.einsum("si,sj->sij", self.A, self.A)
        dk = AA + (self.d - l)[:, None, None] * self.B
        dl = -k[:, None, None] * self.B
        return dk, dl

    def spring_energy(self, k, l):
        return float(0.5 * np.sum(k * (l - self.d) ** 2))

    def evaluate(self, k, l):
        r = self.residual(k, l)
        w, v = sorted_eigh(self.hessian(k, l))
        return r, w, v


def stability_objective(structure, forms, design=None, w=0.001, scale=1.0, analyses=None):
    """``sum_i 0.5 |residual_i / scale|^2 + w V_i / scale`` over the forms.

    ``V_i`` is the spring potential of form ``i``; gravity is left out of the
    regulariser because it does not depend on the design.
    """
    k, l = _design_arrays(structure, design)
    if analyses is None:
        analyses = [FormAnalysis(structure, f) for f in forms]
    total = 0.0
    for fa in analyses:
        r = fa.residual(k, l) / scale
        total += 0.5 * float(r @ r) + w * fa.spring_energy(k, l) / scale
    return total


def form_report(analysis, k, l):
    r, w, _ = analysis.evaluate(k, l)
    Vs = analysis.spring_energy(k, l)
    return FormStability(analysis.label, float(np.linalg.norm(r)), [float(x) for x in w],
                         Vs + analysis.V_gravity, Vs)


class _DesignProblem(Problem):
    """Scaled design problem: ``x = [k_0/k_ref, l_0/l0_0, k_1/k_ref, ...]``."""

    def __init__(self, analyses, kscale, lscale, w, fscale, escale, eps, fd_step):
        self.analyses = analyses
        self.kscale = kscale
        self.lscale = lscale
        self.w = w
        self.fscale = fscale
        self.escale = escale
        self.eps = eps
        self.fd_step = fd_step
        self.n_eval = 0
        self._cache_x = None
        self._cache = None

    def unpack(self, x):
        x = x.reshape(-1, 2)
        return x[:, 0] * self.kscale, x[:, 1] * self.lscale

    def _eval(self, x):
        if self._cache_x is not None and np.array_equal(x, self._cache_x):
            return self._cache
        k, l = self.unpack(x)
        f = 0.0
        ce = []
        ci = []
        eig = []
        for fa in self.analyses:
            r, w, v = fa.evaluate(k, l)
            rs = r / self.fscale
            f += 0.5 * float(rs @ rs) + self.w * fa.spring_energy(k, l) / self.fscale
            ce.append(rs)
            ci.append((w - self.eps) / self.escale)
            eig.append((w, v))
        self.n_eval += 1
        out = (f, np.concatenate(ce), np.concatenate(ci), eig)
        if not np.isfinite(f):
            raise OptimizationError("non-finite objective during line search",
                                    iterate=x.copy())
        self._cache_x = x.copy()
        self._cache = out
        return out

    def values(self, x):
        f, ce, ci, _ = self._eval(x)
        return f, ce, ci

    def _objective_only(self, x):
        k, l = self.unpack(x)
        f = 0.0
        for fa in self.analyses:
            rs = fa.residual(k, l) / self.fscale
            f += 0.5 * float(rs @ rs) + self.w * fa.spring_energy(k, l) / self.fscale
        return f

    def _residuals_only(self, x):
        k, l = self.unpack(x)
        return np.concatenate([fa.residual(k, l) / self.fscale for fa in self.analyses])

    def derivatives(self, x):
        gf = central_difference(self._objective_only, x, self.fd_step)
        Je = central_difference(self._residuals_only, x, self.fd_step)
        if Je.ndim == 1:
            Je = Je.reshape(0, x.size)
        k, l = self.unpack(x)
        _, _, _, eig = self._eval(x)
        rows = []
        S = k.size
        for fa, (w, v) in zip(self.analyses, eig):
            dk, dl = fa.hessian_derivatives(k, l)
            scale = max(np.max(np.abs(w)), 1e-300)
            gaps = np.diff(w)
            clustered = np.zeros(w.size, bool)
            close = np.abs(gaps) <= 1e-8 * scale
            clustered[:-1] |= close
            clustered[1:] |= close
            block = np.zeros((w.size, 2 * S))
            block[:, 0::2] = np.einsum("ij,sik,kj->js", v, dk, v) * self.kscale
            block[:, 1::2] = np.einsum("ij,sik,kj->js", v, dl, v) * self.lscale
            if clustered.any():
                def eigs(z, fa=fa):
                    kk, ll = self.unpack(z)
                    return np.sort(np.linalg.eigvalsh(fa.hessian(kk, ll)))
                fd = central_difference(eigs, x, self.fd_step)
                block[clustered] = fd[clustered]
            rows.append(block / self.escale)
        Ji = np.vstack(rows) if rows else np.zeros((0, x.size))
        return gf, Je, Ji


def _report(analyses, k, l, converged, iterations, tol, eps, wall):
    return StabilityReport([form_report(fa, k, l) for fa in analyses], converged, iterations,
                           wall, tol, eps)


def is_stable(report):
    return all(f.residual_norm <= report.residual_tol and f.min_eigenvalue >= report.eig_margin
               for f in report.forms)


def analyze_design(structure, forms, design=None, opts=None, analyses=None):
    """Stability report of a fixed design without optimising."""
    opts = opts or OptimizerOptions()
    tol, eps = opts.margins(structure)
    if analyses is None:
        analyses = [FormAnalysis(structure, f, opts.constraint_curvature) for f in forms]
    k, l = _design_arrays(structure, design)
    rep = _report(analyses, k, l, False, 0, tol, eps, 0.0)
    rep.converged = is_stable(rep)
    return rep


def optimize_design(structure, forms, design0, opts=None, trace=None):
    """Augmented Lagrangian search over spring ``(k, l)`` within their boxes.

    Residuals enter both the objective and, as equality constraints, the
    multiplier terms; eigenvalues of the reduced Hessians are inequality
    constraints ``lambda_j >= eig_margin``.  ``trace`` (a list) receives one
    record per outer iteration.
    """
    opts = opts or OptimizerOptions()
    t0 = time.perf_counter()
    if len(structure.springs) == 0:
        raise ValueError("design optimisation needs at least one spring")
    if len(design0) != len(structure.springs):
        raise ValueError("design dimensions do not match the spring set")
    if np.any(design0.lb > design0.ub):
        raise ValueError("infeasible bounds: lb > ub")
    tol, eps = opts.margins(structure)
    analyses = [FormAnalysis(structure, f, opts.constraint_curvature) for f in forms]
    k0 = np.clip(design0.k, design0.lb[:, 0], design0.ub[:, 0])
    l0 = np.clip(design0.l, design0.lb[:, 1], design0.ub[:, 1])
    start = _report(analyses, k0, l0, False, 0, tol, eps, 0.0)
    if is_stable(start):
        start.converged = True
        start.wall_time = time.perf_counter() - t0
        return DesignVector(k0, l0, design0.lb, design0.ub), start

    kscale = structure.spring_scale()
    lscale = np.array([s.l0 for s in structure.springs], float)
    fscale = structure.force_scale()
    escale = structure.spring_scale()
    prob = _DesignProblem(analyses, kscale, lscale, opts.w, fscale, escale, eps, opts.fd_step)
    lo = np.column_stack([design0.lb[:, 0] / kscale, design0.lb[:, 1] / lscale]).ravel()
    hi = np.column_stack([design0.ub[:, 0] / kscale, design0.ub[:, 1] / lscale]).ravel()
    x0 = np.column_stack([k0 / kscale, l0 / lscale]).ravel()

    def stop(x):
        k, l = prob.unpack(x)
        rep = _report(analyses, k, l, False, 0, tol, eps, 0.0)
        return is_stable(rep)

    def record(outer, x, f, ce, ci, rho):
        if trace is None:
            return
        k, l = prob.unpack(x)
        forms_rep = [form_report(fa, k, l) for fa in analyses]
        trace.append({"iteration": outer, "objective": f,
                      "residuals": [fr.residual_norm for fr in forms_rep],
                      "min_eigenvalues": [fr.min_eigenvalue for fr in forms_rep],
                      "penalty": rho, "time": time.perf_counter() - t0})

    alm_opts = ALMOptions(max_outer=opts.max_outer, max_inner=opts.max_inner,
                          rho_growth=opts.penalty_growth, rho_max=opts.penalty_max,
                          gtol=1e-10, stall_outer=opts.stall_outer)
    res = augmented_lagrangian(prob, x0, lo, hi, alm_opts, stop=stop, callback=record)
    x = np.clip(res.x, lo, hi)
    k, l = prob.unpack(x)
    k = np.clip(k, design0.lb[:, 0], design0.ub[:, 0])
    l = np.clip(l, design0.lb[:, 1], design0.ub[:, 1])
    rep = _report(analyses, k, l, False, res.outer_iterations, tol, eps,
                  time.perf_counter() - t0)
    rep.converged = is_stable(rep)
    log.info("optimize_design: converged=%s outer=%d evals=%d", rep.converged,
             res.outer_iterations, prob.n_eval)
    return DesignVector(k, l, design0.lb.copy(), design0.ub.copy()), rep
