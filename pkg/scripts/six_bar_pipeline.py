"""Run fit, design, simulate and export on the six-bar mirrored-arc scene.

All artifacts go under ``--out``; stage summaries and wall times are printed.
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from metamorph.cli import main as cli
from metamorph.scenes import six_bar_curves
from metamorph.serialization import dumps


def stage(name, argv):
    t0 = time.perf_counter()
    code = cli(argv)
    print(f"[{name}] exit {code}, {time.perf_counter() - t0:.2f} s")
    return code


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="six_bar_run")
    ap.add_argument("--turn", type=float, default=1.5, help="arc turning angle (rad)")
    ap.add_argument("--m", type=int, default=6)
    ap.add_argument("--perturbations", type=int, default=10)
    ap.add_argument("--damping", type=float, default=10.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    curves = out / "curves.json"
    curves.write_text(dumps(six_bar_curves(args.turn, m=args.m)))

    if stage("fit", ["fit", "--input", str(curves), "--out", str(out / "fit")]):
        return
    stage("design", ["design", "--input", str(out / "fit" / "scene.json"),
                     "--out", str(out / "design"), "--timing"])
    design = out / "design" / "design.json"
    stage("simulate", ["simulate", "--input", str(design), "--out", str(out / "sim"),
                       "--perturbations", str(args.perturbations), "--damping", str(args.damping),
                       "--seed", str(args.seed), "--jobs", str(args.jobs)])
    stage("export", ["export", "--input", str(design), "--out", str(out / "export")])

    cls = json.loads((out / "sim" / "classification.json").read_text())
    M = np.array(cls["matrix"])
    print("classification (rows: start form, columns: " + ", ".join(cls["columns"]) + ")")
    print(M)
    print(f"barrier {cls['barrier']:.6g} g mm^2/s^2")


if __name__ == "__main__":
    main()
