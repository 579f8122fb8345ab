"""End-to-end acceptance checks.

Each check prints one ``PASS``/``FAIL`` line with its measurement and wall
time.  Run with ``pytest -s tests/test_acceptance.py`` to see the lines, or
``python tests/test_acceptance.py`` for the summary alone.
"""
import json
import time
from pathlib import Path

import numpy as np

from metamorph.cli import main as cli_main
from metamorph.rigidbody import (
    Pose,
    assemble_jacobian,
    bar_endpoints,
    chain_structure,
    chain_vertices,
    form_null_basis,
    planar_form,
)
from metamorph.scenes import (
    hinge_angle_form,
    pinned_chain,
    six_bar_curves,
    springy_linkage,
    zigzag_chain,
)
from metamorph.serialization import dumps
from metamorph.simulator import SimParams, SimState, Simulator, settle
from metamorph.spring_energy import (
    Spring,
    rodrigues,
    rotation_gradient,
    spring_gradient,
    spring_hessian,
    spring_potential,
    total_energy_report,
)
from metamorph.spring_placement import design_loop, mismatch_objective, place_min_energy_spring


def report(number, name, ok, detail, elapsed, limit):
    ok = ok and elapsed < limit
    print(f"{'PASS' if ok else 'FAIL'} [{number}] {name}: {detail} ({elapsed:.2f} s, limit {limit:g} s)")
    return ok


def _fd(fun, x, step):
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        cols.append((np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2 * step))
    return np.stack(cols, axis=-1)


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


# -- 1 -----------------------------------------------------------------------

def check_derivatives():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    g_err = h_err = r_err = 0.0
    for _ in range(100):
        u1, u2 = rng.normal(scale=20.0, size=(2, 3))
        sp = Spring(0, 0, 1, u1, u2, rng.uniform(0.5, 5.0), rng.uniform(5.0, 80.0), 1.0)
        x = np.concatenate([rng.normal(scale=50.0, size=3), rng.normal(size=3),
                            rng.normal(scale=50.0, size=3), rng.normal(size=3)])

        def poses(z):
            return Pose(z[0:3], z[3:6]), Pose(z[6:9], z[9:12])

        g = spring_gradient(sp, *poses(x))
        g_err = max(g_err, _rel(g, _fd(lambda z: spring_potential(sp, *poses(z)), x, 1e-6)))
        H = spring_hessian(sp, *poses(x))
        h_err = max(h_err, _rel(H, _fd(lambda z: spring_gradient(sp, *poses(z)), x, 1e-6)))
    for mag in (1e-9, 1e-3, 3.0):
        for _ in range(20):
            v = rng.standard_normal(3)
            a = mag * v / np.linalg.norm(v)
            fd = _fd(lambda z: rodrigues(z).ravel(), a, 1e-6)
            for i in range(3):
                r_err = max(r_err, float(np.max(np.abs(rotation_gradient(a, i).ravel() - fd[:, i]))))
    ok = g_err <= 1e-6 and h_err <= 1e-5 and r_err <= 1e-5
    detail = f"gradient {g_err:.1e}, Hessian {h_err:.1e}, rotation {r_err:.1e} over 100 configurations"
    return report(1, "derivatives", ok, detail, time.perf_counter() - t0, 5.0)


# -- 2 -----------------------------------------------------------------------

def six_bar_scene():
    from metamorph.geometry import fit_curves, parse_curves
    from metamorph.serialization import chain_scene_from_fits
    curves, m, bar_length, extras = parse_curves(json.loads(dumps(six_bar_curves())))
    fits, _ = fit_curves(curves, m, bar_length)
    return chain_scene_from_fits(fits, 0, ground_angle=extras["ground_angle"])


def check_null_space():
    t0 = time.perf_counter()
    st2, forms2 = springy_linkage()
    st6, forms6 = six_bar_scene()
    st24, form24 = zigzag_chain(24)
    worst_nj = worst_nn = 0.0
    for st, form in ((st2, forms2[0]), (st6, forms6[0]), (st6, forms6[1]), (st24, form24)):
        J = assemble_jacobian(st, form)
        N = form_null_basis(st, form).N
        worst_nj = max(worst_nj, float(np.max(np.abs(N @ J.T)) / np.max(np.abs(J))))
        worst_nn = max(worst_nn, float(np.max(np.abs(N @ N.T - np.eye(N.shape[0])))))
    r = form_null_basis(st2, forms2[0]).r
    ok = worst_nj <= 1e-9 and worst_nn <= 1e-10 and r == 1
    detail = f"max|NJ^T|/max|J| {worst_nj:.1e}, max|NN^T - I| {worst_nn:.1e}, two-bar r = {r}"
    return report(2, "null space", ok, detail, time.perf_counter() - t0, 5.0)


# -- 3 -----------------------------------------------------------------------

def check_energy_scan():
    t0 = time.perf_counter()
    st, forms = springy_linkage(spring=False)
    res = design_loop(st, forms)
    S = res.structure
    theta = np.linspace(-0.95 * np.pi, 0.95 * np.pi, 10_000)
    V = np.array([total_energy_report(S, hinge_angle_form(S, a), with_hessian=False).V
                  for a in theta])
    inner = np.arange(1, V.size - 1)
    mins = inner[(V[inner] < V[inner - 1]) & (V[inner] <= V[inner + 1])]
    maxs = inner[(V[inner] > V[inner - 1]) & (V[inner] >= V[inner + 1])]
    targets = np.array([np.pi / 3, -np.pi / 3])
    err = (max(float(np.min(np.abs(theta[mins] - t))) for t in targets) if len(mins) else np.inf)
    ok = (res.report.converged and len(mins) == 2 and len(maxs) == 1
          and theta[mins[0]] < theta[maxs[0]] < theta[mins[-1]] and err <= 1e-3)
    detail = (f"{len(S.springs)} spring, {len(mins)} minima, {len(maxs)} maxima, "
              f"minimum offset {err:.1e} rad")
    return report(3, "two-bar energy scan", ok, detail, time.perf_counter() - t0, 10.0)


# -- 4 -----------------------------------------------------------------------

def _quiet(argv):
    import contextlib
    import io
    with contextlib.redirect_stdout(io.StringIO()):
        return cli_main(argv)


def check_six_bar(workdir):
    t0 = time.perf_counter()
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    curves = workdir / "curves.json"
    curves.write_text(dumps(six_bar_curves()))
    codes = [_quiet(["fit", "--input", str(curves), "--out", str(workdir / "fit")])]
    codes.append(_quiet(["design", "--input", str(workdir / "fit" / "scene.json"),
                         "--out", str(workdir / "design")]))
    design = json.loads((workdir / "design" / "design.json").read_text())
    rep = design["report"]
    codes.append(_quiet(["simulate", "--input", str(workdir / "design" / "design.json"),
                         "--out", str(workdir / "sim"), "--perturbations", "10",
                         "--energy-fraction", "0.1", "--damping", "10"]))
    cls = json.loads((workdir / "sim" / "classification.json").read_text())
    M = np.array(cls["matrix"])
    diagonal = np.array_equal(M[:, :2], np.diag(M[:, :2].diagonal())) and M[:, 2:].sum() == 0
    forms_ok = all(f["residual_norm"] <= rep["residual_tol"] and f["eigenvalues"][0] >= rep["eig_margin"]
                   for f in rep["forms"])
    n_springs = len(design["springs"])
    ok = codes == [0, 0, 0] and rep["converged"] and n_springs <= 8 and forms_ok and diagonal \
        and M.sum() == 20
    detail = (f"exit codes {codes}, {n_springs} springs, min eigenvalues "
              f"{[round(f['eigenvalues'][0], 3) for f in rep['forms']]} (margin {rep['eig_margin']:.3g}), "
              f"classification {M.tolist()}")
    return report(4, "six-bar bistability", ok, detail, time.perf_counter() - t0, 60.0)


# -- 5 -----------------------------------------------------------------------

def _hang_angle(structure, state):
    e = bar_endpoints(structure, state.form())[0]
    d = e[1] - e[0]
    return float(np.arctan2(d[0], -d[1]))


def _drift(structure, form, steps, params):
    sim = Simulator(structure, params=params)
    p, R, vel = sim.pack(SimState.at_rest(form))
    worst = 0.0
    for _ in range(steps):
        p, R, vel, _ = sim.advance(p, R, vel)
        C = sim.residual(p, R).reshape(-1, 6)
        worst = max(worst, float(np.max(np.linalg.norm(C[:, :3], axis=1))))
    return worst


def check_simulator():
    t0 = time.perf_counter()
    st, form = pinned_chain(1, tilt=0.8)
    _, hanging = pinned_chain(1, tilt=0.0)
    final, label = settle(st, form, params=SimParams(viscous_damping=5.0), forms=[hanging])
    angle = abs(_hang_angle(st, final))
    sim = Simulator(st, params=SimParams(viscous_damping=1.0))
    p, R, vel = sim.pack(SimState.at_rest(form))
    E = [sim.energy(p, R, vel)]
    for _ in range(2000):
        p, R, vel, _ = sim.advance(p, R, vel)
        E.append(sim.energy(p, R, vel))
    rise = float(np.max(np.diff(E)))
    scale = st.typical_mass() * 9810.0 * st.typical_length()
    params = SimParams(h=1e-3, k_p=1e8, k_d=1e4)
    drift_1 = _drift(st, form, 10_000, params)
    st6, form6 = pinned_chain(6, tilt=0.5)
    drift_6 = _drift(st6, form6, 10_000, params)
    ok = label == 0 and angle <= 1e-3 and rise <= 1e-8 * scale and max(drift_1, drift_6) <= 1e-3
    detail = (f"hanging error {angle:.1e} rad, largest energy rise {rise:.1e} "
              f"(scale {scale:.1e}), drift {drift_1:.1e} mm (1 bar) / {drift_6:.1e} mm (6 bars)")
    return report(5, "simulator physics", ok, detail, time.perf_counter() - t0, 20.0)


# -- 6 -----------------------------------------------------------------------

def check_placement():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    grid = np.linspace(0.0, 1.0, 101)
    S, T = np.meshgrid(grid, grid, indexing="ij")
    worst = -np.inf
    matched = 0
    L = 50.0
    for _ in range(20):
        st = chain_structure([L] * 3, fixed_pose=Pose.planar(0.0, -L / 2, -np.pi / 2))
        forms = [planar_form(st, chain_vertices([L] * 3, [0, 0], np.concatenate(
            [[-np.pi / 2], -np.pi / 2 + rng.uniform(-1.5, 1.5, 2)]))) for _ in range(2)]
        a, b = (int(x) for x in rng.choice(3, 2, replace=False))
        fun, _, _ = mismatch_objective(st, forms, a, b)
        d = []
        for f in forms:
            e = bar_endpoints(st, f)
            pa = e[a, 0] + S[..., None] * (e[a, 1] - e[a, 0])
            pb = e[b, 0] + T[..., None] * (e[b, 1] - e[b, 0])
            d.append(np.linalg.norm(pa - pb, axis=-1))
        vals = 0.5 * (d[0] - d[1]) ** 2
        best = float(np.min(vals[np.minimum(d[0], d[1]) >= 1e-3 * L]))
        pl = place_min_energy_spring(st, forms, a, b)
        gap = fun((pl.s, pl.t)) - best
        worst = max(worst, gap)
        matched += gap <= 1e-9
    ok = matched == 20
    detail = f"{matched}/20 instances at or below the grid minimum (largest excess {worst:.1e} mm^2)"
    return report(6, "placement vs grid", ok, detail, time.perf_counter() - t0, 10.0)


# -- 7 -----------------------------------------------------------------------

def _pipeline(out):
    out.mkdir(parents=True, exist_ok=True)
    curves = out / "curves.json"
    curves.write_text(dumps(six_bar_curves()))
    _quiet(["fit", "--input", str(curves), "--out", str(out / "fit")])
    _quiet(["design", "--input", str(out / "fit" / "scene.json"), "--out", str(out / "design")])
    _quiet(["simulate", "--input", str(out / "design" / "design.json"), "--out", str(out / "sim"),
            "--perturbations", "1", "--damping", "10", "--seed", "7", "--trace"])
    _quiet(["export", "--input", str(out / "design" / "design.json"), "--out", str(out / "export")])
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


def check_determinism(workdir):
    t0 = time.perf_counter()
    workdir = Path(workdir)
    a = _pipeline(workdir / "run_a")
    b = _pipeline(workdir / "run_b")
    differing = [k for k in a if a.get(k) != b.get(k)]
    kinds = {k.rsplit(".", 1)[-1] for k in a}
    ok = a.keys() == b.keys() and not differing and {"json", "csv", "svg"} <= kinds
    detail = f"{len(a)} artifacts compared, {len(differing)} differ"
    return report(7, "determinism", ok, detail, time.perf_counter() - t0, 120.0)


# -- pytest entry points -------------------------------------------------------

def test_derivatives():
    assert check_derivatives()


def test_null_space():
    assert check_null_space()


def test_energy_scan():
    assert check_energy_scan()


def test_six_bar_bistability(tmp_path):
    assert check_six_bar(tmp_path)


def test_simulator_physics():
    assert check_simulator()


def test_placement_oracle():
    assert check_placement()


def test_determinism(tmp_path):
    assert check_determinism(tmp_path)


if __name__ == "__main__":
    import sys
    import tempfile
    with tempfile.TemporaryDirectory() as tmp:
        results = [check_derivatives(), check_null_space(), check_energy_scan(),
                   check_six_bar(Path(tmp) / "six"), check_simulator(), check_placement(),
                   check_determinism(Path(tmp) / "det")]
    print(f"{sum(results)}/{len(results)} criteria passed")
    sys.exit(0 if all(results) else 1)
