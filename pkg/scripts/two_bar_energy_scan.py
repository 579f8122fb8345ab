"""Energy landscape of the two-bar springy linkage after spring design.

Places and tunes springs for the two mirrored target forms, then scans the
total potential over the hinge angle and reports its extrema.  With
``--csv`` the scan is written out for plotting.
"""
import argparse
import csv

import numpy as np

from metamorph.scenes import hinge_angle_form, springy_linkage
from metamorph.spring_energy import total_energy_report
from metamorph.spring_placement import design_loop


def scan(structure, samples=10_000, span=0.95 * np.pi):
    theta = np.linspace(-span, span, samples)
    V = np.array([total_energy_report(structure, hinge_angle_form(structure, a), with_hessian=False).V
                  for a in theta])
    return theta, V


def extrema(V):
    i = np.arange(1, V.size - 1)
    mins = i[(V[i] < V[i - 1]) & (V[i] <= V[i + 1])]
    maxs = i[(V[i] > V[i - 1]) & (V[i] >= V[i + 1])]
    return mins, maxs


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--angle", type=float, default=np.pi / 3, help="target hinge angle (rad)")
    ap.add_argument("--samples", type=int, default=10_000)
    ap.add_argument("--csv", help="write theta,V rows here")
    args = ap.parse_args()

    st, forms = springy_linkage(angle=args.angle, spring=False)
    res = design_loop(st, forms)
    print(f"converged: {res.report.converged}, springs: {len(res.structure.springs)}")
    for sp in res.structure.springs:
        print(f"  spring {sp.id}: bars {sp.body_1}-{sp.body_2} at s={sp.s:.3f} t={sp.t:.3f}, "
              f"k={sp.k:.6g}, l={sp.l:.6g} mm")
    for f in res.report.forms:
        print(f"  {f.label}: residual {f.residual_norm:.2e}, eigenvalues {np.round(f.eigenvalues, 4)}")

    theta, V = scan(res.structure, args.samples)
    mins, maxs = extrema(V)
    print(f"minima at {np.round(theta[mins], 5)} rad (targets +-{args.angle:.5f})")
    print(f"maxima at {np.round(theta[maxs], 5)} rad")
    if len(mins) == 2 and len(maxs):
        print(f"barrier {V[maxs].max() - V[mins].max():.6g} g mm^2/s^2")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["theta", "V"])
            w.writerows(zip(theta.tolist(), V.tolist()))


if __name__ == "__main__":
    main()
