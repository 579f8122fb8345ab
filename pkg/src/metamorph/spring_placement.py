"""Greedy spring insertion driven by the softest deformation mode.

Each round looks for the most unstable eigenmode over all forms, pushes
the structure one short step along it, and connects the bar that moves the
most to the bar that moves the most relative to it.  The attachment points
are chosen so the spring has nearly the same length in every form, which
keeps the added potential small until the optimiser retunes it.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from metamorph.optim import projected_bfgs
from metamorph.rigidbody import bar_endpoints
from metamorph.spring_energy import Spring
from metamorph.stability_opt import (
    DesignVector,
    FormAnalysis,
    OptimizerOptions,
    analyze_design,
    optimize_design,
    sorted_eigh,
)

log = logging.getLogger(__name__)

MODE_STEP = 1e-3
DUPLICATE_TOL = 0.05
COINCIDENT_REL = 1e-3
_STARTS = [(0.5, 0.5)] + [(s, t) for s in (0.25, 0.5, 0.75) for t in (0.25, 0.5, 0.75)
                          if (s, t) != (0.5, 0.5)]


class PlacementError(RuntimeError):
    """No admissible bar pair or attachment for a new spring."""


@dataclass
class ModeSelection:
    form_index: int
    form_label: str
    eigenvalue: float
    eigvec: np.ndarray
    velocities: np.ndarray
    per_vertex_displacement: list = field(default_factory=list)
    from_residual: bool = False


@dataclass
class SpringPlacement:
    bar_a: int
    bar_b: int
    s: float
    t: float
    rest_length: float
    length_mismatch: float


@dataclass
class PlacementOptions:
    optimizer: OptimizerOptions = field(default_factory=OptimizerOptions)
    max_springs: int | None = None
    k0: float | None = None
    mode_step: float = MODE_STEP


@dataclass
class LoopResult:
    structure: object
    design: DesignVector
    report: object
    trace: list
    optimizer_trace: list
    wall_time: float


def spring_between(structure, id, bar_a, bar_b, s, t, k, l, l0=None):
    """Spring from parameter ``s`` on ``bar_a`` to parameter ``t`` on ``bar_b``."""
    return Spring(id, bar_a, bar_b, structure.bars[bar_a].local_point(s),
                  structure.bars[bar_b].local_point(t), float(k), float(l),
                  float(l if l0 is None else l0), float(s), float(t))


def most_unstable_mode(structure, forms, design=None, opts=None, analyses=None):
    """Most negative reduced-Hessian eigenpair over all forms, or None if all clear the margin."""
    opts = opts or OptimizerOptions()
    _, eps = opts.margins(structure)
    if analyses is None:
        analyses = [FormAnalysis(structure, f, opts.constraint_curvature) for f in forms]
    k, l = _arrays(structure, design)
    best = None
    for i, fa in enumerate(analyses):
        w, v = sorted_eigh(fa.hessian(k, l))
        if w.size and (best is None or w[0] < best[0]):
            best = (float(w[0]), i, v[:, 0])
    if best is None or best[0] >= eps:
        return None
    lam, i, e = best
    e = _sign_fix(e)
    return ModeSelection(i, analyses[i].label, lam, e, abs(lam) * (analyses[i].N.T @ e))


def residual_mode(structure, forms, design=None, opts=None, analyses=None):
    """Direction of the largest unbalanced force, used when every mode is stiff enough."""
    opts = opts or OptimizerOptions()
    if analyses is None:
        analyses = [FormAnalysis(structure, f, opts.constraint_curvature) for f in forms]
    k, l = _arrays(structure, design)
    best = None
    for i, fa in enumerate(analyses):
        r = fa.residual(k, l)
        n = float(np.linalg.norm(r))
        if best is None or n > best[0]:
            best = (n, i, r)
    n, i, r = best
    if n == 0.0:
        return None
    e = r / n
    H = analyses[i].hessian(k, l)
    return ModeSelection(i, analyses[i].label, float(e @ H @ e), e, n * (analyses[i].N.T @ e),
                         from_residual=True)


def _sign_fix(e):
    j = int(np.argmax(np.abs(e)))
    return -e if e[j] < 0 else e


def _arrays(structure, design):
    if design is None:
        return (np.array([s.k for s in structure.springs], float),
                np.array([s.l for s in structure.springs], float))
    return np.asarray(design.k, float), np.asarray(design.l, float)


def mode_deformation(structure, form, mode, h=MODE_STEP):
    """Endpoint displacement vectors (n, 2, 3) after one step along ``mode.velocities``.

    With no force applied during the probe step, the symplectic Euler update
    reduces to ``q += h * qdot``.
    """
    before = bar_endpoints(structure, form)
    after = bar_endpoints(structure, form.displaced(h * np.asarray(mode.velocities, float)))
    return after - before


def _ties_first(values, rtol=1e-12):
    """Indices ordered by decreasing value; near-equal values keep id order."""
    vmax = max(float(np.max(np.abs(values))), 1e-300) if len(values) else 1.0
    keys = np.round(np.asarray(values, float) / (rtol * vmax)) if len(values) else values
    return [int(i) for i in sorted(range(len(values)), key=lambda i: (-keys[i], i))]


def rank_bars(displacements):
    """Bars ordered by their largest endpoint displacement."""
    mags = np.linalg.norm(np.asarray(displacements), axis=2).max(axis=1)
    return _ties_first(mags)


def rank_partners(displacements, bar_a):
    """Other bars ordered by their displacement relative to ``bar_a``."""
    d = np.asarray(displacements)
    rel = np.array([np.max(np.linalg.norm(d[b][:, None, :] - d[bar_a][None, :, :], axis=2))
                    for b in range(len(d))])
    return [b for b in _ties_first(rel) if b != bar_a]


def select_candidate_bars(displacements, structure, exclude=()):
    """``(bar_a, bar_b)``: the fastest bar and its fastest-relative partner.

    ``exclude`` lists unordered pairs that must be skipped.
    """
    excluded = {frozenset(p) for p in exclude}
    for bar_a in rank_bars(displacements):
        for bar_b in rank_partners(displacements, bar_a):
            if frozenset((bar_a, bar_b)) not in excluded:
                return bar_a, bar_b
    raise PlacementError("every bar pair already carries an equivalent spring; "
                         "change the spring budget or design options")


def _attachment_lines(structure, form, bar):
    ends = bar_endpoints(structure, form)[bar]
    return ends[0], ends[1] - ends[0]


def mismatch_objective(structure, forms, bar_a, bar_b):
    """``f(s, t) = 0.5 (d_1 - d_2)^2`` and its gradient, plus the raw distances."""
    lines = [(_attachment_lines(structure, f, bar_a), _attachment_lines(structure, f, bar_b))
             for f in forms[:2]]

    def distances(x):
        s, t = x
        out = []
        grads = []
        for (pa, ea), (pb, eb) in lines:
            g = pa + s * ea - pb - t * eb
            d = float(np.linalg.norm(g))
            u = g / d if d > 0 else np.zeros(3)
            out.append(d)
            grads.append(np.array([u @ ea, -(u @ eb)]))
        return out, grads

    def fun(x):
        (d1, d2), _ = distances(x)
        return 0.5 * (d1 - d2) ** 2

    def grad(x):
        (d1, d2), (g1, g2) = distances(x)
        return (d1 - d2) * (g1 - g2)

    return fun, grad, distances


def place_min_energy_spring(structure, forms, bar_a, bar_b, starts=None, displacements=None,
                            min_sensitivity=0.0, probe_form=0):
    """Attachment ``(s, t)`` minimising the length mismatch between two forms.

    When ``displacements`` (endpoint displacements of a probe step taken in
    ``forms[probe_form]``) are given, optima whose first-order length change
    along that probe is below ``min_sensitivity`` times the best the pair
    can achieve are discarded.  Without this, zero-mismatch optima often
    sit on spans that are rigid, such as two ends of one bar.
    """
    if bar_a == bar_b:
        raise ValueError("spring needs two distinct bars")
    fun, grad, distances = mismatch_objective(structure, forms, bar_a, bar_b)
    floor = COINCIDENT_REL * min(structure.bars[bar_a].length, structure.bars[bar_b].length)
    sens = None
    if displacements is not None and min_sensitivity > 0:
        sens = _sensitivity(structure, forms[probe_form], displacements, bar_a, bar_b)
        grid = np.linspace(0.0, 1.0, 11)
        reach = max(sens((a, b)) for a in grid for b in grid)
        if reach <= 1e-9:
            raise PlacementError(f"bars {bar_a} and {bar_b} do not move relative to each other")
        threshold = min_sensitivity * reach
    lb, ub = np.zeros(2), np.ones(2)

    def admissible(x):
        d, _ = distances(x)
        return min(d) >= floor and (sens is None or sens(x) >= threshold)

    best = None
    points = starts or _STARTS
    for start in points:
        res = projected_bfgs(fun, grad, np.array(start, float), lb, ub, max_iter=100,
                             gtol=1e-14, ftol=0.0)
        if not admissible(res.x):
            continue
        if best is None or res.f < best[0] - 1e-15 * max(1.0, best[0]):
            best = (res.f, res.x, distances(res.x)[0])
    if best is None and sens is not None:
        # every optimum is rigid along the probe; fall back to the best admissible start
        for start in points:
            x = np.array(start, float)
            if admissible(x) and (best is None or fun(x) < best[0]):
                best = (fun(x), x, distances(x)[0])
    if best is None:
        raise PlacementError(f"no usable attachment between bars {bar_a} and {bar_b}")
    _, x, d = best
    return SpringPlacement(bar_a, bar_b, float(x[0]), float(x[1]), 0.5 * (d[0] + d[1]),
                           abs(d[0] - d[1]))


def _sensitivity(structure, form, displacements, bar_a, bar_b):
    """Relative first-order length change of a spring along a probe step."""
    ends = bar_endpoints(structure, form)
    disp = np.asarray(displacements)
    scale = float(np.max(np.linalg.norm(disp[bar_a][:, None, :] - disp[bar_b][None, :, :],
                                        axis=2)))

    def f(x):
        s, t = x
        pa = (1 - s) * ends[bar_a, 0] + s * ends[bar_a, 1]
        pb = (1 - t) * ends[bar_b, 0] + t * ends[bar_b, 1]
        va = (1 - s) * disp[bar_a, 0] + s * disp[bar_a, 1]
        vb = (1 - t) * disp[bar_b, 0] + t * disp[bar_b, 1]
        g = pa - pb
        n = np.linalg.norm(g)
        if n == 0 or scale == 0:
            return 0.0
        return abs(float(g @ (va - vb))) / (n * scale)

    return f


def is_duplicate(placement, springs, tol=DUPLICATE_TOL):
    for sp in springs:
        if (sp.body_1, sp.body_2) == (placement.bar_a, placement.bar_b):
            s, t = sp.s, sp.t
        elif (sp.body_2, sp.body_1) == (placement.bar_a, placement.bar_b):
            s, t = sp.t, sp.s
        else:
            continue
        if abs(s - placement.s) < tol and abs(t - placement.t) < tol:
            return True
    return False


def _next_placement(structure, forms, displacements, probe_form, min_sensitivity=0.1):
    tried = []
    for bar_a in rank_bars(displacements):
        for bar_b in rank_partners(displacements, bar_a):
            if structure.bars[bar_a].length <= 0:
                continue
            try:
                pl = place_min_energy_spring(structure, forms, bar_a, bar_b,
                                             displacements=displacements,
                                             min_sensitivity=min_sensitivity,
                                             probe_form=probe_form)
            except PlacementError:
                tried.append((bar_a, bar_b))
                continue
            if is_duplicate(pl, structure.springs):
                tried.append((bar_a, bar_b))
                continue
            return pl
    raise PlacementError(f"no admissible spring placement ({len(tried)} pairs rejected)")


def design_loop(structure, forms, opts=None):
    """Add springs one at a time until every form is a stable minimum.

    Returns a :class:`LoopResult`; ``result.report.converged`` is False when
    the spring budget (default four per bar) runs out first.
    """
    opts = opts or PlacementOptions()
    t0 = time.perf_counter()
    budget = opts.max_springs if opts.max_springs is not None else 4 * len(structure.bars)
    k_new = structure.spring_scale() if opts.k0 is None else opts.k0
    springs = list(structure.springs)
    design = DesignVector.from_springs(springs, structure.spring_scale()) if springs else None
    trace = []
    opt_trace = []
    added = None
    eig_before = None
    while True:
        st = structure.with_springs(springs)
        if springs:
            rounds = []
            design, report = optimize_design(st, forms, design, opts.optimizer, trace=rounds)
            for r in rounds:
                r["springs"] = len(springs)
            opt_trace.extend(rounds)
            springs = _apply(springs, design)
            st = structure.with_springs(springs)
        else:
            report = analyze_design(st, forms, None, opts.optimizer)
        trace.append({"added_spring": added, "eigenvalue_before": eig_before,
                      "residuals": [f.residual_norm for f in report.forms],
                      "min_eigenvalues": [f.min_eigenvalue for f in report.forms],
                      "springs": len(springs), "converged": report.converged})
        log.info("design loop: %d springs, converged=%s", len(springs), report.converged)
        if report.converged or len(springs) >= budget:
            break
        analyses = [FormAnalysis(st, f, opts.optimizer.constraint_curvature) for f in forms]
        mode = most_unstable_mode(st, forms, design, opts.optimizer, analyses)
        if mode is None:
            mode = residual_mode(st, forms, design, opts.optimizer, analyses)
        if mode is None:
            break
        disp = mode_deformation(st, forms[mode.form_index], mode, opts.mode_step)
        mode.per_vertex_displacement = [(2 * b + e, float(np.linalg.norm(disp[b, e])))
                                        for b in range(disp.shape[0]) for e in range(2)]
        try:
            pl = _next_placement(st, forms, disp, mode.form_index)
        except PlacementError as exc:
            log.warning("design loop stopped: %s", exc)
            trace.append({"added_spring": None, "eigenvalue_before": mode.eigenvalue,
                          "residuals": [f.residual_norm for f in report.forms],
                          "min_eigenvalues": [f.min_eigenvalue for f in report.forms],
                          "springs": len(springs), "converged": False, "error": str(exc)})
            break
        sp = spring_between(st, len(springs), pl.bar_a, pl.bar_b, pl.s, pl.t, k_new,
                            pl.rest_length)
        springs.append(sp)
        base = DesignVector.from_springs([sp], structure.spring_scale())
        if design is None:
            design = base
        else:
            design = design.extended(base.k[0], base.l[0], base.lb[0], base.ub[0])
        eig_before = mode.eigenvalue
        added = {"id": sp.id, "bar_a": pl.bar_a, "bar_b": pl.bar_b, "s": pl.s, "t": pl.t,
                 "rest_length": pl.rest_length, "length_mismatch": pl.length_mismatch,
                 "form": mode.form_label, "from_residual": mode.from_residual}
    final = structure.with_springs(springs)
    if design is None:
        design = DesignVector(np.zeros(0), np.zeros(0), np.zeros((0, 2)), np.zeros((0, 2)))
    report.wall_time = time.perf_counter() - t0
    return LoopResult(final, design, report, trace, opt_trace, report.wall_time)


def _apply(springs, design):
    out = []
    for sp, k, l in zip(springs, design.k, design.l):
        out.append(Spring(sp.id, sp.body_1, sp.body_2, sp.u1_local, sp.u2_local, float(k),
                          float(l), sp.l0, sp.s, sp.t))
    return out
