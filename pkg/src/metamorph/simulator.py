"""Forward dynamics of the jointed structure for validating stable forms.

Velocity-level stepping with soft constraint stabilisation: the joint
forces solve

    (h J M^-1 J^T + a I) lambda = -a k_p C - J v - h J M^-1 F,
    a = 1 / (h k_p + k_d),

after which ``v += h M^-1 (F + J^T lambda)`` and the poses are advanced with
the new velocities.  Orientations are composed through the exponential map
(``R <- exp(h [w]x) R``) instead of adding axis-angle vectors.

Velocities are stored per bar as ``[v, w]`` with ``w`` in world coordinates.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.spatial.transform import Rotation

from metamorph.rigidbody import (
    JointKind,
    Pose,
    Form,
    WORLD,
    assemble_jacobian,
    bar_endpoints,
    constraint_residual,
    coordinate_to_velocity,
    form_null_basis,
)
from metamorph.spring_energy import rodrigues

log = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


@dataclass
class SimParams:
    h: float = 1e-3
    k_p: float = 1e8
    k_d: float = 1e4
    viscous_damping: float = 0.5
    max_steps: int = 200_000
    ke_rel: float = 1e-10
    classify_rel: float = 0.05
    curvature_passes: int = 1

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("time step must be positive")
        if self.k_p < 0 or self.k_d < 0 or self.viscous_damping < 0:
            raise ValueError("k_p, k_d and damping must be non-negative")
        if self.h * self.k_p + self.k_d <= 0:
            raise ValueError("h * k_p + k_d must be positive")


@dataclass
class SimState:
    poses: list
    velocities: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.velocities = np.asarray(self.velocities, float).reshape(-1, 6)

    @classmethod
    def at_rest(cls, form):
        return cls([Pose(p.p.copy(), p.a.copy()) for p in form.poses],
                   np.zeros((len(form.poses), 6)), 0.0)

    def form(self, label=""):
        return Form([Pose(p.p.copy(), p.a.copy()) for p in self.poses], label)


@dataclass
class StepInfo:
    constraint_norm: float
    kinetic: float
    potential: float
    singular: bool = False


def _skew_batch(v):
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _vee_batch(M):
    return 0.5 * np.stack([M[..., 2, 1] - M[..., 1, 2], M[..., 0, 2] - M[..., 2, 0],
                           M[..., 1, 0] - M[..., 0, 1]], axis=-1)


_SKEW_E = _skew_batch(np.eye(3))


def exp_rotation(w):
    """Batch of rotation matrices ``exp([w]x)`` for rows of ``w``."""
    th = np.sqrt(np.sum(w * w, axis=-1))
    small = th < 1e-8
    ts = np.where(small, 1.0, th)
    A = np.where(small, 1.0 - th * th / 6.0, np.sin(ts) / ts)
    B = np.where(small, 0.5 - th * th / 24.0, (1.0 - np.cos(ts)) / (ts * ts))
    K = _skew_batch(w)
    return np.eye(3) + A[..., None, None] * K + B[..., None, None] * (K @ K)


def _cross(a, b):
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


class Simulator:
    """Precomputed index arrays for fast repeated stepping of one structure."""

    def __init__(self, structure, design=None, params=None):
        self.structure = structure
        self.params = params or SimParams()
        bars = structure.bars
        n = len(bars)
        self.n = n
        self.mass = np.array([b.mass for b in bars], float)
        self.inertia = np.stack([b.inertia for b in bars]) if n else np.zeros((0, 3, 3))
        self.inertia_inv = np.linalg.inv(self.inertia) if n else self.inertia
        self.gravity = np.asarray(structure.gravity, float)
        joints = structure.joints
        self.nj = len(joints)
        # WORLD maps to a padded body index n with identity pose
        self.bi = np.array([j.body_i for j in joints], int)
        self.bj = np.array([n if j.body_j == WORLD else j.body_j for j in joints], int)
        self.ui = np.array([j.anchor_i for j in joints], float).reshape(-1, 3)
        self.uj = np.array([j.anchor_j for j in joints], float).reshape(-1, 3)
        self.axis = np.array([j.axis for j in joints], float).reshape(-1, 3)
        self.fixed = np.array([j.kind is JointKind.FIXED for j in joints], bool)
        self._any_fixed = bool(self.fixed.any())
        self._vec_i = np.stack([self.ui, self.axis], axis=2)
        self._vec_j = np.stack([self.uj, self.axis], axis=2)
        self.rel_T = np.stack([rodrigues(j.rel_rotation).T for j in joints]) if joints \
            else np.zeros((0, 3, 3))
        springs = structure.springs
        self.s1 = np.array([s.body_1 for s in springs], int)
        self.s2 = np.array([s.body_2 for s in springs], int)
        self.su1 = np.array([s.u1_local for s in springs], float).reshape(-1, 3)
        self.su2 = np.array([s.u2_local for s in springs], float).reshape(-1, 3)
        if design is None:
            self.k = np.array([s.k for s in springs], float)
            self.l = np.array([s.l for s in springs], float)
        else:
            self.k = np.asarray(design.k, float).copy()
            self.l = np.asarray(design.l, float).copy()
        self.a = 1.0 / (self.params.h * self.params.k_p + self.params.k_d)

    # -- state conversion -------------------------------------------------
    def pack(self, state):
        p = np.array([ps.p for ps in state.poses], float).reshape(-1, 3)
        R = Rotation.from_rotvec(np.array([ps.a for ps in state.poses], float).reshape(-1, 3))
        return p, R.as_matrix().reshape(-1, 3, 3), state.velocities.copy()

    def unpack(self, p, R, vel, t):
        a = Rotation.from_matrix(R).as_rotvec().reshape(-1, 3)
        return SimState([Pose(p[b], a[b]) for b in range(self.n)], vel.copy(), t)

    # -- assembly ---------------------------------------------------------
    def _ext(self, p, R):
        pe = np.vstack([p, np.zeros((1, 3))])
        Re = np.concatenate([R, np.eye(3)[None]], axis=0)
        return pe, Re

    def _frames(self, p, R):
        pe, Re = self._ext(p, R)
        Ri, Rj = Re[self.bi], Re[self.bj]
        Wi = Ri @ self._vec_i
        Wj = Rj @ self._vec_j
        ri, ni = Wi[:, :, 0], Wi[:, :, 1]
        rj, nj_ = Wj[:, :, 0], Wj[:, :, 1]
        Mfix = Ri @ self.rel_T if self._any_fixed else None
        C = np.empty((self.nj, 6))
        C[:, :3] = ri + pe[self.bi] - rj - pe[self.bj]
        C[:, 3:] = ni - nj_
        if self._any_fixed:
            E = Rj[self.fixed].transpose(0, 2, 1) @ Mfix[self.fixed]
            C[self.fixed, 3:] = _vee_batch(E)
        return C, Rj, ri, rj, ni, nj_, Mfix

    def residual(self, p, R):
        if self.nj == 0:
            return np.zeros(0)
        return self._frames(p, R)[0].ravel()

    def constraints(self, p, R):
        """Residual ``C`` (6 per joint) and velocity Jacobian ``J``."""
        nj, n = self.nj, self.n
        if nj == 0:
            return np.zeros(0), np.zeros((0, 6 * n))
        C, Rj, ri, rj, ni, nj_, Mfix = self._frames(p, R)

        J4 = np.zeros((nj, 6, n + 1, 6))
        ar = np.arange(nj)
        eye = np.eye(3)
        J4[ar, :3, self.bi, :3] = eye
        J4[ar, :3, self.bi, 3:] = -_skew_batch(ri)
        J4[ar, :3, self.bj, :3] = -eye
        J4[ar, :3, self.bj, 3:] = _skew_batch(rj)
        J4[ar, 3:, self.bi, 3:] = -_skew_batch(ni)
        J4[ar, 3:, self.bj, 3:] = _skew_batch(nj_)
        if self._any_fixed:
            # d vee(Rj^T [w]x Ri Rr^T) / dw; column k comes from the unit vector e_k
            fx = np.flatnonzero(self.fixed)
            blk = _vee_batch(np.einsum("jba,kbc,jcd->jkad", Rj[fx], _SKEW_E, Mfix[fx]))
            blk = np.transpose(blk, (0, 2, 1))
            J4[fx, 3:, self.bi[fx], 3:] = blk
            J4[fx, 3:, self.bj[fx], 3:] = -blk
        J = J4.reshape(6 * nj, 6 * (n + 1))[:, :6 * n]
        return C.ravel(), J

    def forces(self, p, R, vel):
        """Generalised force per bar ``[f, tau]`` (n, 6) and the potential energy."""
        n = self.n
        F = np.zeros((n, 6))
        F[:, :3] = self.mass[:, None] * self.gravity
        V = -float(np.sum(self.mass * (p @ self.gravity)))
        if self.k.size:
            r1 = (R[self.s1] @ self.su1[:, :, None])[:, :, 0]
            r2 = (R[self.s2] @ self.su2[:, :, None])[:, :, 0]
            g = (p[self.s1] + r1) - (p[self.s2] + r2)
            d = np.linalg.norm(g, axis=1)
            stretch = d - self.l
            V += 0.5 * float(np.sum(self.k * stretch ** 2))
            f = -(self.k * stretch / np.where(d > 0, d, 1.0))[:, None] * g
            np.add.at(F[:, :3], self.s1, f)
            np.add.at(F[:, 3:], self.s1, _cross(r1, f))
            np.add.at(F[:, :3], self.s2, -f)
            np.add.at(F[:, 3:], self.s2, _cross(r2, -f))
        Iw = R @ self.inertia @ R.transpose(0, 2, 1)
        w = vel[:, 3:]
        Lw = (Iw @ w[:, :, None])[:, :, 0]
        F[:, 3:] -= _cross(w, Lw)
        c = self.params.viscous_damping
        if c:
            F[:, :3] -= c * self.mass[:, None] * vel[:, :3]
            F[:, 3:] -= c * Lw
        return F, V, Iw

    def kinetic(self, R, vel):
        Iw = R @ self.inertia @ R.transpose(0, 2, 1)
        w = vel[:, 3:]
        Lw = (Iw @ w[:, :, None])[:, :, 0]
        return 0.5 * float(np.sum(self.mass * np.sum(vel[:, :3] ** 2, axis=1)) + np.sum(w * Lw))

    def potential(self, p, R):
        _, V, _ = self.forces(p, R, np.zeros((self.n, 6)))
        return V

    # -- stepping ---------------------------------------------------------
    def inverse_mass(self, R):
        """Dense block-diagonal ``M^-1`` for the current orientations."""
        n = self.n
        Iw_inv = R @ self.inertia_inv @ R.transpose(0, 2, 1)
        Minv = np.zeros((n, 6, n, 6))
        ar = np.arange(n)
        Minv[ar, :3, ar, :3] = np.eye(3)[None] / self.mass[:, None, None]
        Minv[ar, 3:, ar, 3:] = Iw_inv
        return Minv.reshape(6 * n, 6 * n)

    def advance(self, p, R, vel):
        """One step on raw arrays ``(p, R, vel)``; returns ``(p, R, vel, info)``.

        ``info`` describes the state the step started from (energies and the
        largest anchor-row residual).
        """
        h = self.params.h
        F, V, Iw = self.forces(p, R, vel)
        ke = 0.5 * float(np.sum(self.mass * np.sum(vel[:, :3] ** 2, axis=1))
                         + np.sum(vel[:, 3:] * (Iw @ vel[:, 3:, None])[:, :, 0]))
        Minv = self.inverse_mass(R)
        C, J = self.constraints(p, R)
        singular = False
        if J.shape[0]:
            v0 = vel.ravel()
            MJ = Minv @ J.T
            A = h * (J @ MJ) + self.a * np.eye(J.shape[0])
            b0 = -J @ v0 - h * (MJ.T @ F.ravel())
            try:
                lu = scipy.linalg.lu_factor(A, check_finite=False)
                solve = lambda rhs: scipy.linalg.lu_solve(lu, rhs, check_finite=False)
            except (ValueError, np.linalg.LinAlgError):
                singular = True
                solve = lambda rhs: np.linalg.lstsq(A, rhs, rcond=None)[0]
            Cp = C
            for it in range(1 + self.params.curvature_passes):
                lam = solve(b0 - self.a * self.params.k_p * Cp)
                total = F.ravel() + J.T @ lam
                if it == self.params.curvature_passes:
                    break
                # second-order part of C along the predicted velocity
                v_pred = vel + h * (Minv @ total).reshape(-1, 6)
                Rn = exp_rotation(h * v_pred[:, 3:]) @ R
                Cp = self.residual(p + h * v_pred[:, :3], Rn) - h * (J @ v_pred.ravel())
        else:
            total = F.ravel()
        vel = vel + h * (Minv @ total).reshape(-1, 6)
        p = p + h * vel[:, :3]
        R = exp_rotation(h * vel[:, 3:]) @ R
        cn = float(np.max(np.abs(C.reshape(-1, 6)[:, :3]))) if C.size else 0.0
        info = StepInfo(cn, ke, V, singular)
        if not (np.all(np.isfinite(vel)) and np.all(np.isfinite(p))):
            raise SimulationError("non-finite state")
        return p, R, vel, info

    def energy(self, p, R, vel):
        return self.kinetic(R, vel) + self.potential(p, R)


def step(structure, state, design=None, params=None, sim=None):
    """Advance ``state`` by one time step and return the new state."""
    sim = sim or Simulator(structure, design, params)
    p, R, vel = sim.pack(state)
    p, R, vel, _ = sim.advance(p, R, vel)
    return sim.unpack(p, R, vel, state.time + sim.params.h)


def kinetic_threshold(structure, params):
    L = structure.typical_length()
    return params.ke_rel * structure.typical_mass() * L * L


def classify(structure, state_form, forms, params):
    """Index of the nearest known form by vertex positions, or ``"diverged"``."""
    ends = bar_endpoints(structure, state_form)
    if not np.all(np.isfinite(ends)):
        return "diverged", float("inf")
    dists = [float(np.max(np.linalg.norm(ends - bar_endpoints(structure, f), axis=2)))
             for f in forms]
    best = int(np.argmin(dists))
    if dists[best] <= params.classify_rel * structure.typical_length():
        return best, dists[best]
    return "diverged", dists[best]


def settle(structure, form, design=None, perturbation=None, params=None, forms=None,
           trajectory=None, record_every=1):
    """Run from ``form`` (plus a velocity perturbation) until motion dies out.

    ``perturbation`` is a per-bar ``[v, w]`` velocity array (6n).  Returns
    ``(state, classification)`` where classification is the index in
    ``forms`` (default ``[form]``) of the nearest form, ``"diverged"`` or
    ``"unsettled"``.  ``trajectory`` (a list) receives rows of time, poses,
    energies and the constraint residual.
    """
    params = params or SimParams()
    forms = forms or [form]
    sim = Simulator(structure, design, params)
    state = SimState.at_rest(form)
    if perturbation is not None:
        state.velocities = np.asarray(perturbation, float).reshape(-1, 6).copy()
    p, R, vel = sim.pack(state)
    threshold = kinetic_threshold(structure, params)
    t = 0.0
    settled = False
    try:
        for it in range(params.max_steps):
            p, R, vel, info = sim.advance(p, R, vel)
            t += params.h
            if trajectory is not None and it % record_every == 0:
                a = Rotation.from_matrix(R).as_rotvec().reshape(-1, 3)
                C = sim.residual(p, R).reshape(-1, 6)
                cn = float(np.max(np.abs(C[:, :3]))) if C.size else 0.0
                trajectory.append([t] + list(np.hstack([p, a]).ravel())
                                  + [sim.kinetic(R, vel), sim.potential(p, R), cn])
            if info.kinetic < threshold and it > 0:
                settled = True
                break
    except SimulationError:
        return sim.unpack(p, R, vel, t), "diverged"
    final = sim.unpack(p, R, vel, t)
    label, _ = classify(structure, final.form(), forms, params)
    if not settled and label != "diverged":
        return final, "unsettled"
    return final, label


def write_trajectory(path, rows, n_bars):
    header = ["time"]
    for b in range(n_bars):
        header += [f"b{b}_{c}" for c in ("px", "py", "pz", "ax", "ay", "az")]
    header += ["kinetic", "potential", "constraint"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) for x in row])


def project_to_constraints(structure, q, iterations=30, tol=1e-10):
    """Minimum-norm Gauss-Newton projection of coordinates onto ``C(q) = 0``."""
    q = np.asarray(q, float).ravel().copy()
    for _ in range(iterations):
        f = Form.from_array(q)
        C = constraint_residual(structure, f)
        if C.size == 0 or np.max(np.abs(C)) < tol:
            break
        J = assemble_jacobian(structure, f)
        q -= np.linalg.lstsq(J, C, rcond=None)[0]
    return q


def energy_path(structure, form_a, form_b, design=None, samples=65):
    """Potential energy along a constraint-projected straight path between two forms."""
    sim = Simulator(structure, design)
    qa = form_a.as_array().ravel()
    qb = form_b.as_array().ravel()
    out = []
    q = qa.copy()
    for s in np.linspace(0.0, 1.0, samples):
        q = project_to_constraints(structure, (1 - s) * qa + s * qb)
        f = Form.from_array(q)
        p = np.array([ps.p for ps in f.poses])
        R = np.stack([rodrigues(ps.a) for ps in f.poses])
        out.append(sim.potential(p, R))
    return np.array(out)


def energy_barrier(structure, forms, design=None, samples=65):
    """Height of the potential along the path between two forms above the lower endpoint."""
    V = energy_path(structure, forms[0], forms[1], design, samples)
    return float(np.max(V) - max(V[0], V[-1])), V


def random_perturbation(structure, form, energy, rng):
    """Random feasible velocity with kinetic energy ``energy``."""
    basis = form_null_basis(structure, form)
    e = rng.standard_normal(basis.r)
    qdot = basis.N.T @ e
    vel = coordinate_to_velocity(form, qdot).reshape(-1, 6)
    sim = Simulator(structure)
    R = np.stack([rodrigues(ps.a) for ps in form.poses])
    ke = sim.kinetic(R, vel)
    if ke <= 0:
        return np.zeros_like(vel)
    return vel * np.sqrt(energy / ke)
