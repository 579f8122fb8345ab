"""Small reference scenes used by the tests, scripts and acceptance checks."""
from __future__ import annotations

import numpy as np

from metamorph.geometry import PiecewiseCurve
from metamorph.rigidbody import Pose, chain_structure, chain_vertices, planar_form
from metamorph.spring_energy import Spring


def springy_linkage(length=100.0, angle=np.pi / 3, spring=True):
    """Two bars hanging from a fixed top bar, hinge angle ``+-angle``.

    The top bar points straight down from the origin.  With ``spring`` one
    spring joins the top of bar 0 to the free end of bar 1; its rest length
    starts at the (common) end-to-end distance of the two forms.
    """
    L = float(length)
    st = chain_structure([L, L], fixed_pose=Pose.planar(0.0, -L / 2, -np.pi / 2))
    forms = [planar_form(st, chain_vertices([L, L], [0, 0], [-np.pi / 2, -np.pi / 2 + a]), lab)
             for a, lab in ((angle, "open_left"), (-angle, "open_right"))]
    if spring:
        d = 2 * L * np.cos(angle / 2)
        sp = Spring(0, 0, 1, st.bars[0].local_point(0.0), st.bars[1].local_point(1.0),
                    st.spring_scale(), d, d, 0.0, 1.0)
        st = st.with_springs([sp])
    return st, forms


def hinge_angle_form(structure, angle):
    """Form of :func:`springy_linkage` with relative hinge angle ``angle``."""
    L0, L1 = (b.length for b in structure.bars)
    return planar_form(structure, chain_vertices([L0, L1], [0, 0], [-np.pi / 2, -np.pi / 2 + angle]))


def hanging_arc(turn, length=300.0, start_dir=-np.pi / 2, pieces=4):
    """Circular arc leaving the origin along ``start_dir`` and turning by ``turn`` radians."""
    R = length / abs(turn)
    d = np.array([np.cos(start_dir), np.sin(start_dir)])
    nrm = np.sign(turn) * np.array([-d[1], d[0]])
    a0 = np.arctan2(-nrm[1], -nrm[0])
    return PiecewiseCurve.circle_arc(R * nrm, R, a0, a0 + turn, pieces)


def six_bar_curves(turn=1.5, length=300.0, m=6):
    """Curves document for two mirrored hanging arcs.

    The grounded bar is turned to point straight down so that gravity acts
    symmetrically on both forms.
    """
    curves = [hanging_arc(turn, length), hanging_arc(-turn, length)]
    return {"curves": [{"segments": c.segments.tolist(), "closed": False} for c in curves],
            "m": int(m), "bar_length": float(length) / m, "fixed_bar": 0,
            "ground_angle": -np.pi / 2}


def straight_chain(n_bars, length=50.0, fixed_bar=0, angle=-np.pi / 2):
    """Chain of ``n_bars`` equal bars laid out along ``angle`` with one bar welded."""
    L = float(length)
    verts = chain_vertices([L] * n_bars, [0, 0], [angle] * n_bars)
    mid = 0.5 * (verts[fixed_bar] + verts[fixed_bar + 1])
    st = chain_structure([L] * n_bars, fixed_bar=fixed_bar,
                         fixed_pose=Pose.planar(mid[0], mid[1], angle))
    return st, planar_form(st, verts, "straight")


def zigzag_chain(n_bars, length=50.0, amplitude=0.4, seed=0):
    """Welded chain with random bar angles, used for null-space checks."""
    rng = np.random.default_rng(seed)
    L = float(length)
    angles = -np.pi / 2 + amplitude * rng.standard_normal(n_bars)
    verts = chain_vertices([L] * n_bars, [0, 0], angles)
    mid = 0.5 * (verts[0] + verts[1])
    st = chain_structure([L] * n_bars, fixed_pose=Pose.planar(mid[0], mid[1], angles[0]))
    return st, planar_form(st, verts, "zigzag")


def pinned_chain(n_bars, length=50.0, tilt=0.5):
    """Chain pinned at its top end, all bars tilted ``tilt`` from hanging."""
    L = float(length)
    d = np.array([np.sin(tilt), -np.cos(tilt)])
    st = chain_structure([L] * n_bars, fixed_pose=Pose.planar(0.0, L / 2, np.pi / 2), ground="pin")
    form = planar_form(st, [i * L * d for i in range(n_bars + 1)], "tilted")
    return st, form
