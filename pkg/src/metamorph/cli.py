"""Command line driver: fit -> design -> simulate -> export.

Exit codes: 0 success, 1 malformed input, 2 curve fit failure, 3 design not
converged (files are still written), 4 a simulation diverged.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from metamorph.fabrication_export import (
    LAYER_PITCH,
    assign_z_depths,
    export_design_json,
    export_svg,
    load_design,
    parse_design,
)
from metamorph.geometry import FitError, SchemaError, fit_curves, load_curves
from metamorph.serialization import chain_scene_from_fits, dumps, read_json, scene_to_dict
from metamorph.simulator import (
    SimParams,
    energy_barrier,
    random_perturbation,
    settle,
    write_trajectory,
)
from metamorph.spring_placement import PlacementOptions, design_loop
from metamorph.stability_opt import OptimizerOptions

log = logging.getLogger("metamorph")

EXIT_OK, EXIT_MALFORMED, EXIT_FIT, EXIT_NOT_CONVERGED, EXIT_DIVERGED = 0, 1, 2, 3, 4

SIM_DEFAULTS = {"perturbations": 10, "energy_fraction": 0.1, "record_every": 10,
                "barrier_samples": 65}


def defaults_table():
    """Every numeric default, grouped by where it is used."""
    rows = []
    for name, obj in (("optimizer", OptimizerOptions()), ("simulator", SimParams())):
        for f in dataclasses.fields(obj):
            rows.append((name, f.name, getattr(obj, f.name)))
    rows.append(("placement", "max_springs", "4 * bars"))
    rows.append(("placement", "k0", "bar weight / bar length"))
    rows.append(("placement", "mode_step", PlacementOptions().mode_step))
    for k, v in SIM_DEFAULTS.items():
        rows.append(("simulate", k, v))
    rows.append(("export", "layer_pitch_mm", LAYER_PITCH))
    rows.append(("cli", "seed", 0))
    rows.append(("cli", "jobs", 1))
    return rows


def print_defaults(out=None):
    out = out or sys.stdout
    rows = defaults_table()
    w0 = max(len(r[0]) for r in rows)
    w1 = max(len(r[1]) for r in rows)
    for group, name, value in rows:
        out.write(f"{group:<{w0}}  {name:<{w1}}  {value}\n")


def _setup_logging():
    level = os.environ.get("METAMORPH_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _outdir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write(path, text):
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


# -- fit ---------------------------------------------------------------------

def cmd_fit(args):
    curves, m, bar_length, extras = load_curves(args.input)
    if args.m is not None:
        m = args.m
    try:
        fits, _ = fit_curves(curves, m, bar_length)
    except SchemaError:
        raise
    except (FitError, ValueError) as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT
    try:
        st, forms = chain_scene_from_fits(
            fits, int(extras.get("fixed_bar", 0)), gravity=extras.get("gravity"),
            k0=extras.get("k0"), labels=extras.get("labels"),
            ground_angle=extras.get("ground_angle"),
            **({"density": float(extras["density"])} if "density" in extras else {}))
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"invalid scene options: {exc}") from exc
    out = _outdir(args.out)
    doc = scene_to_dict(st, forms, fit={"bar_length": float(fits[0].bar_length),
                                        "residuals": [float(f.residual) for f in fits]})
    _write(out / "scene.json", dumps(doc))
    for f, form in zip(fits, forms):
        print(f"{form.label}: fit residual {f.residual:.6g} mm^2, "
              f"length error {f.constraint_error():.3g} mm")
    return EXIT_OK


# -- design ------------------------------------------------------------------

def _optimizer_options(args):
    kw = {}
    for name in ("w", "eig_margin_rel", "residual_tol_rel"):
        v = getattr(args, name, None)
        if v is not None:
            kw[name] = v
    return OptimizerOptions(**kw)


def write_optimizer_trace(path, rows, n_forms, timing=True):
    header = (["iteration", "springs", "objective"] + [f"residual_{i}" for i in range(n_forms)]
              + [f"min_eigenvalue_{i}" for i in range(n_forms)] + ["penalty", "time"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([r["iteration"], r.get("springs", ""), repr(float(r["objective"]))]
                       + [repr(float(v)) for v in r["residuals"]]
                       + [repr(float(v)) for v in r["min_eigenvalues"]]
                       + [repr(float(r["penalty"])), repr(float(r["time"])) if timing else ""])


def cmd_design(args):
    bundle = parse_design(read_json(args.input))
    st, forms = bundle.structure, bundle.forms
    if len(forms) != 2:
        raise SchemaError("design needs exactly two forms")
    opts = PlacementOptions(optimizer=_optimizer_options(args), max_springs=args.max_springs)
    t0 = time.perf_counter()
    res = design_loop(st, forms, opts)
    wall = time.perf_counter() - t0
    out = _outdir(args.out)
    layers = assign_z_depths(res.structure)
    extra = {"wall_time": wall} if args.timing else None
    export_design_json(res.structure, forms, res.design, res.report, out / "design.json",
                       layers, extra)
    loop = [dict(r) for r in res.trace]
    _write(out / "loop_trace.json", dumps(loop))
    write_optimizer_trace(out / "optimizer_trace.csv", res.optimizer_trace, len(forms),
                          timing=args.timing)
    for f in res.report.forms:
        print(f"{f.label}: residual {f.residual_norm:.3e} (tol {res.report.residual_tol:.3e}), "
              f"min eigenvalue {f.min_eigenvalue:.6g} (margin {res.report.eig_margin:.3g})")
    print(f"springs: {len(res.structure.springs)}, converged: {res.report.converged}, "
          f"wall time {wall:.2f} s")
    return EXIT_OK if res.report.converged else EXIT_NOT_CONVERGED


# -- simulate ----------------------------------------------------------------

def _settle_task(task):
    st, forms, i, j, pert, params, record_every = task
    rows = []
    _, label = settle(st, forms[i], None, pert, params, forms, trajectory=rows,
                      record_every=record_every)
    return i, j, label, rows


def simulation_tasks(st, forms, n, fraction, seed, params, record_every, barrier):
    seqs = np.random.SeedSequence(seed).spawn(len(forms) * n)
    tasks = []
    for i, f in enumerate(forms):
        for j in range(n):
            rng = np.random.default_rng(seqs[i * n + j])
            pert = None if fraction == 0 else random_perturbation(st, f, fraction * barrier, rng)
            tasks.append((st, forms, i, j, pert, params, record_every))
    return tasks


def cmd_simulate(args):
    bundle = load_design(args.input)
    st, forms = bundle.structure, bundle.forms
    if not forms:
        raise SchemaError("design file has no forms")
    kw = {}
    if args.damping is not None:
        kw["viscous_damping"] = args.damping
    if args.h is not None:
        kw["h"] = args.h
    if args.max_steps is not None:
        kw["max_steps"] = args.max_steps
    params = SimParams(**kw)
    barrier = 0.0
    if len(forms) >= 2:
        barrier, _ = energy_barrier(st, forms[:2], None, SIM_DEFAULTS["barrier_samples"])
    scale = barrier if barrier > 0 else st.force_scale()
    every = 1 if args.trace else args.record_every
    tasks = simulation_tasks(st, forms, args.perturbations, args.energy_fraction, args.seed,
                             params, every, scale)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(_settle_task, tasks))
    else:
        results = [_settle_task(t) for t in tasks]
    out = _outdir(args.out)
    cols = [f.label for f in forms] + ["diverged", "unsettled"]
    matrix = np.zeros((len(forms), len(cols)), int)
    runs = []
    traj_dir = _outdir(out / "trajectories")
    for i, j, label, rows in results:
        col = label if isinstance(label, int) else cols.index(label)
        matrix[i, col] += 1
        runs.append({"form": i, "run": j,
                     "result": label if isinstance(label, str) else forms[label].label})
        write_trajectory(traj_dir / f"form{i}_run{j:03d}.csv", rows, len(st.bars))
    doc = {"rows": [f.label for f in forms], "columns": cols,
           "matrix": matrix.tolist(), "barrier": float(barrier),
           "energy_fraction": float(args.energy_fraction), "seed": int(args.seed),
           "params": dataclasses.asdict(params), "runs": runs}
    _write(out / "classification.json", dumps(doc))
    for lab, row in zip(doc["rows"], doc["matrix"]):
        print(f"{lab}: " + "  ".join(f"{c}={v}" for c, v in zip(cols, row)))
    return EXIT_DIVERGED if matrix[:, -2].any() else EXIT_OK


# -- export ------------------------------------------------------------------

def _safe(label):
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in label) or "form"


def cmd_export(args):
    bundle = load_design(args.input)
    out = _outdir(args.out)
    st = bundle.structure
    layers = bundle.layers
    for i, form in enumerate(bundle.forms):
        export_svg(st, form, bundle.design, layers, out / f"form{i}_{_safe(form.label)}.svg")
    export_design_json(st, bundle.forms, bundle.design, bundle.report, out / "fabrication.json",
                       layers, bundle.extra)
    print(f"layers: {layers.count}, stack depth {layers.depth:g} mm")
    return EXIT_OK


# -- entry point -------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="metamorph", description=__doc__.splitlines()[0])
    p.add_argument("--show-defaults", action="store_true", help="print the defaults table")
    sub = p.add_subparsers(dest="command")

    def common(sp):
        sp.add_argument("--input", required=True)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("--trace", action="store_true", help="write optional trace files")
        sp.add_argument("--show-defaults", action="store_true", help="print the defaults table")

    fit = sub.add_parser("fit", help="fit bar chains to two curves")
    common(fit)
    fit.add_argument("--m", type=int, default=None, help="bars per chain (overrides the file)")

    des = sub.add_parser("design", help="place and tune springs")
    common(des)
    des.add_argument("--max-springs", type=int, default=None)
    des.add_argument("--w", type=float, default=None)
    des.add_argument("--eig-margin-rel", type=float, default=None)
    des.add_argument("--residual-tol-rel", type=float, default=None)
    des.add_argument("--timing", action="store_true",
                     help="store wall times in the output files (breaks byte reproducibility)")

    sim = sub.add_parser("simulate", help="perturb each form and classify where it settles")
    common(sim)
    sim.add_argument("--perturbations", type=int, default=SIM_DEFAULTS["perturbations"])
    sim.add_argument("--energy-fraction", type=float, default=SIM_DEFAULTS["energy_fraction"])
    sim.add_argument("--record-every", type=int, default=SIM_DEFAULTS["record_every"],
                     help="trajectory CSV row interval in steps (1 with --trace)")
    sim.add_argument("--damping", type=float, default=None)
    sim.add_argument("--h", type=float, default=None)
    sim.add_argument("--max-steps", type=int, default=None)

    exp = sub.add_parser("export", help="write SVGs and the fabrication JSON")
    common(exp)
    return p


COMMANDS = {"fit": cmd_fit, "design": cmd_design, "simulate": cmd_simulate, "export": cmd_export}


def main(argv=None):
    _setup_logging()
    argv = list(sys.argv[1:] if argv is None else argv)
    if "--show-defaults" in argv:
        print_defaults()
        return EXIT_OK
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return EXIT_MALFORMED
    if args.jobs < 1:
        parser.error("--jobs must be at least 1")
    try:
        return COMMANDS[args.command](args)
    except (SchemaError, json.JSONDecodeError) as exc:
        print(f"malformed input: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"cannot read input: {exc}", file=sys.stderr)
        return EXIT_MALFORMED


if __name__ == "__main__":
    sys.exit(main())
