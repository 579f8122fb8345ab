"""Constraint drift of the soft-constraint integrator on a few scenes.

Reports the largest joint position error over a run for several gain
settings, which separates the static compliance (load / k_p) from the
dynamic part set by k_d.
"""
import argparse

import numpy as np

from metamorph.scenes import pinned_chain
from metamorph.simulator import SimParams, SimState, Simulator


def drift(structure, form, params, steps):
    sim = Simulator(structure, params=params)
    p, R, vel = sim.pack(SimState.at_rest(form))
    worst = 0.0
    for _ in range(steps):
        p, R, vel, _ = sim.advance(p, R, vel)
        C = sim.residual(p, R).reshape(-1, 6)
        worst = max(worst, float(np.max(np.linalg.norm(C[:, :3], axis=1))))
    return worst


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=10_000)
    args = ap.parse_args()
    scenes = {"1 bar, tilt 0.8": pinned_chain(1, tilt=0.8),
              "6 bars, tilt 0.5": pinned_chain(6, tilt=0.5),
              "6 bars, horizontal": pinned_chain(6, tilt=np.pi / 2)}
    gains = [(1e8, 1e4), (1e8, 0.0), (1e9, 1e4)]
    print(f"{'scene':<20}" + "".join(f"  k_p={kp:.0e} k_d={kd:.0e}" for kp, kd in gains))
    for name, (st, form) in scenes.items():
        row = [drift(st, form, SimParams(k_p=kp, k_d=kd), args.steps) for kp, kd in gains]
        print(f"{name:<20}" + "".join(f"  {v:>20.3e} mm" for v in row))


if __name__ == "__main__":
    main()
