"""Maximal-coordinate model of a hinged bar structure.

Every bar carries six coordinates ``[p, a]`` (translation, axis-angle).  Joints
add six constraint rows each:

* hinge: 3 rows of anchor coincidence and 3 rows ``R_i n - R_j n``
* fixed: 3 rows of anchor coincidence and 3 rows of relative orientation

The planar hinge produces one redundant axis row; the SVD null-space
extraction absorbs it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from metamorph.spring_energy import (
    GRAVITY,
    rodrigues,
    rotated_point_hessian,
    rotation_gradients,
    skew,
    vee,
)

WORLD = -1
DEFAULT_DENSITY = 0.01  # g/mm
DEFAULT_SECTION = 4.0  # mm, bar width and thickness


class LockedStructureError(RuntimeError):
    """The joints remove every degree of freedom; stability is undefined."""


class JointKind(str, Enum):
    HINGE = "hinge"
    FIXED = "fixed"


@dataclass
class Pose:
    p: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float).reshape(3)
        self.a = np.asarray(self.a, dtype=float).reshape(3)

    @classmethod
    def planar(cls, x, y, theta):
        return cls(np.array([x, y, 0.0]), np.array([0.0, 0.0, theta]))

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), np.zeros(3))

    def as_array(self):
        return np.concatenate([self.p, self.a])

    def rotation(self):
        return rodrigues(self.a)


def world_point(pose, u_local):
    return rodrigues(pose.a) @ np.asarray(u_local, dtype=float) + pose.p


@dataclass
class Bar:
    id: int
    endpoints_local: np.ndarray
    length: float
    mass: float
    inertia: np.ndarray
    z_layer: int | None = None

    def __post_init__(self):
        self.endpoints_local = np.asarray(self.endpoints_local, dtype=float).reshape(2, 3)
        self.inertia = np.asarray(self.inertia, dtype=float).reshape(3, 3)
        span = np.linalg.norm(self.endpoints_local[0] - self.endpoints_local[1])
        if abs(span - self.length) > 1e-9 * max(1.0, self.length):
            raise ValueError(f"bar {self.id}: endpoints do not match length {self.length}")
        if self.mass <= 0:
            raise ValueError(f"bar {self.id}: mass must be positive")

    @classmethod
    def rod(cls, id, length, density=DEFAULT_DENSITY, width=DEFAULT_SECTION,
            thickness=DEFAULT_SECTION):
        """Bar along the local x axis centred on its centre of mass.

        The inertia is that of a thin rectangular beam so that the tensor
        stays positive definite about the long axis.
        """
        m = density * length
        inertia = np.diag([m * (width ** 2 + thickness ** 2) / 12.0,
                           m * (length ** 2 + thickness ** 2) / 12.0,
                           m * (length ** 2 + width ** 2) / 12.0])
        ends = np.array([[-0.5 * length, 0.0, 0.0], [0.5 * length, 0.0, 0.0]])
        return cls(id, ends, length, m, inertia)

    def local_point(self, s):
        """Point at fraction ``s`` from endpoint 0 towards endpoint 1."""
        return (1.0 - s) * self.endpoints_local[0] + s * self.endpoints_local[1]


@dataclass
class Joint:
    kind: JointKind
    body_i: int
    body_j: int
    anchor_i: np.ndarray
    anchor_j: np.ndarray
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    # fixed joints: target value of R_j^T R_i as an axis-angle vector
    rel_rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.kind = JointKind(self.kind)
        self.anchor_i = np.asarray(self.anchor_i, dtype=float).reshape(3)
        self.anchor_j = np.asarray(self.anchor_j, dtype=float).reshape(3)
        axis = np.asarray(self.axis, dtype=float).reshape(3)
        self.axis = axis / np.linalg.norm(axis)
        self.rel_rotation = np.asarray(self.rel_rotation, dtype=float).reshape(3)
        if self.body_i == self.body_j:
            raise ValueError("joint connects a body to itself")
        if self.body_i == WORLD:
            raise ValueError("WORLD may only appear as body_j")


@dataclass
class Structure:
    bars: list
    joints: list
    springs: list = field(default_factory=list)
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, -GRAVITY, 0.0]))
    k0: float | None = None

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=float).reshape(3)

    @property
    def n_bars(self):
        return len(self.bars)

    @property
    def n_dof(self):
        return 6 * len(self.bars)

    def validate(self, require_ground=True):
        n = len(self.bars)
        for b, bar in enumerate(self.bars):
            if bar.id != b:
                raise ValueError("bar ids must be 0..n-1 in order")
        for jt in self.joints:
            if not (0 <= jt.body_i < n) or not (jt.body_j == WORLD or 0 <= jt.body_j < n):
                raise ValueError(f"joint references unknown bar ({jt.body_i}, {jt.body_j})")
        for s in self.springs:
            if not (0 <= s.body_1 < n and 0 <= s.body_2 < n):
                raise ValueError(f"spring {s.id} references unknown bar")
        if require_ground and not any(jt.body_j == WORLD for jt in self.joints):
            raise ValueError("structure is not grounded: add a joint to WORLD")

    def with_springs(self, springs):
        return Structure(self.bars, self.joints, list(springs), self.gravity, self.k0)

    def typical_length(self):
        return float(np.mean([b.length for b in self.bars]))

    def typical_mass(self):
        return float(np.mean([b.mass for b in self.bars]))

    def spring_scale(self):
        """Default new-spring stiffness: bar weight per bar length, times ``k0``.

        ``k0`` is read in these scale units; without gravity the scale is 1.
        """
        g = float(np.linalg.norm(self.gravity))
        base = self.typical_mass() * g / self.typical_length() if g > 0 else 1.0
        return base * (1.0 if self.k0 is None else self.k0)

    def force_scale(self):
        """``m g L`` used to normalise residuals; falls back to spring energy."""
        g = float(np.linalg.norm(self.gravity))
        L = self.typical_length()
        if g > 0:
            return self.typical_mass() * g * L
        return self.spring_scale() * L * L


@dataclass
class Form:
    poses: list
    label: str = ""

    def as_array(self):
        return np.array([p.as_array() for p in self.poses])

    @classmethod
    def from_array(cls, q, label=""):
        q = np.asarray(q, dtype=float).reshape(-1, 6)
        return cls([Pose(row[:3], row[3:]) for row in q], label)

    def displaced(self, dq):
        """New form with coordinates ``q + dq`` (flat 6n vector)."""
        return Form.from_array(self.as_array().ravel() + dq, self.label)


@dataclass
class NullBasis:
    N: np.ndarray
    sigma_cut: float
    rank: int

    @property
    def r(self):
        return self.N.shape[0]

    @property
    def locked(self):
        return self.N.shape[0] == 0


def _body_rotation(form, body):
    if body == WORLD:
        return np.zeros(3), np.eye(3)
    pose = form.poses[body]
    return pose.p, rodrigues(pose.a)


def constraint_residual(structure, form):
    rows = []
    for jt in structure.joints:
        pi, Ri = _body_rotation(form, jt.body_i)
        pj, Rj = _body_rotation(form, jt.body_j)
        rows.append(Ri @ jt.anchor_i + pi - Rj @ jt.anchor_j - pj)
        if jt.kind is JointKind.HINGE:
            rows.append(Ri @ jt.axis - Rj @ jt.axis)
        else:
            E = Rj.T @ Ri @ rodrigues(jt.rel_rotation).T
            rows.append(vee(E))
    if not rows:
        return np.zeros(0)
    return np.concatenate(rows)


def assemble_jacobian(structure, form):
    """Dense ``dC/dq`` with 6 rows per joint and 6 columns per bar."""
    n = len(structure.bars)
    J = np.zeros((6 * len(structure.joints), 6 * n))
    dR = [rotation_gradients(p.a) for p in form.poses]
    for r, jt in enumerate(structure.joints):
        row = 6 * r
        i, j = jt.body_i, jt.body_j
        ci = 6 * i
        J[row:row + 3, ci:ci + 3] = np.eye(3)
        for k in range(3):
            J[row:row + 3, ci + 3 + k] = dR[i][k] @ jt.anchor_i
        if j != WORLD:
            cj = 6 * j
            J[row:row + 3, cj:cj + 3] = -np.eye(3)
            for k in range(3):
                J[row:row + 3, cj + 3 + k] = -dR[j][k] @ jt.anchor_j
        if jt.kind is JointKind.HINGE:
            for k in range(3):
                J[row + 3:row + 6, ci + 3 + k] = dR[i][k] @ jt.axis
                if j != WORLD:
                    J[row + 3:row + 6, 6 * j + 3 + k] = -dR[j][k] @ jt.axis
        else:
            _, Ri = _body_rotation(form, i)
            _, Rj = _body_rotation(form, j)
            Rr = rodrigues(jt.rel_rotation).T
            for k in range(3):
                J[row + 3:row + 6, ci + 3 + k] = vee(Rj.T @ dR[i][k] @ Rr)
                if j != WORLD:
                    J[row + 3:row + 6, 6 * j + 3 + k] = vee(dR[j][k].T @ Ri @ Rr)
    return J


def velocity_jacobian(structure, form):
    """Constraint Jacobian with respect to (linear, world angular) velocities."""
    n = len(structure.bars)
    J = np.zeros((6 * len(structure.joints), 6 * n))
    for r, jt in enumerate(structure.joints):
        row = 6 * r
        i, j = jt.body_i, jt.body_j
        pi, Ri = _body_rotation(form, i)
        pj, Rj = _body_rotation(form, j)
        ci = 6 * i
        J[row:row + 3, ci:ci + 3] = np.eye(3)
        J[row:row + 3, ci + 3:ci + 6] = -skew(Ri @ jt.anchor_i)
        if j != WORLD:
            cj = 6 * j
            J[row:row + 3, cj:cj + 3] = -np.eye(3)
            J[row:row + 3, cj + 3:cj + 6] = skew(Rj @ jt.anchor_j)
        if jt.kind is JointKind.HINGE:
            J[row + 3:row + 6, ci + 3:ci + 6] = -skew(Ri @ jt.axis)
            if j != WORLD:
                J[row + 3:row + 6, 6 * j + 3:6 * j + 6] = skew(Rj @ jt.axis)
        else:
            M = Ri @ rodrigues(jt.rel_rotation).T
            block = np.column_stack([vee(Rj.T @ skew(e) @ M) for e in np.eye(3)])
            J[row + 3:row + 6, ci + 3:ci + 6] = block
            if j != WORLD:
                J[row + 3:row + 6, 6 * j + 3:6 * j + 6] = -block
    return J


def _rotation_hessians(a):
    """``d2R/da_j da_k`` as a (3, 3, 3, 3) array ``[j, k]`` of matrices."""
    cols = [rotated_point_hessian(a, e) for e in np.eye(3)]
    return np.stack(cols, axis=-1)


def constraint_curvature(structure, form, lam):
    """``sum_k lam_k * hess(C_k)`` over the 6n coordinates."""
    n = len(structure.bars)
    G = np.zeros((6 * n, 6 * n))
    lam = np.asarray(lam, dtype=float)
    for r, jt in enumerate(structure.joints):
        la, lb = lam[6 * r:6 * r + 3], lam[6 * r + 3:6 * r + 6]
        i, j = jt.body_i, jt.body_j
        si = slice(6 * i + 3, 6 * i + 6)
        ai = form.poses[i].a
        G[si, si] += np.einsum("jkr,r->jk", rotated_point_hessian(ai, jt.anchor_i), la)
        if j != WORLD:
            sj = slice(6 * j + 3, 6 * j + 6)
            aj = form.poses[j].a
            G[sj, sj] -= np.einsum("jkr,r->jk", rotated_point_hessian(aj, jt.anchor_j), la)
        if jt.kind is JointKind.HINGE:
            G[si, si] += np.einsum("jkr,r->jk", rotated_point_hessian(ai, jt.axis), lb)
            if j != WORLD:
                G[sj, sj] -= np.einsum("jkr,r->jk", rotated_point_hessian(aj, jt.axis), lb)
            continue
        Rr = rodrigues(jt.rel_rotation).T
        Ri = rodrigues(ai)
        Rj = np.eye(3) if j == WORLD else rodrigues(form.poses[j].a)
        d2Ri = _rotation_hessians(ai)
        for p in range(3):
            for q in range(3):
                G[6 * i + 3 + p, 6 * i + 3 + q] += vee(Rj.T @ d2Ri[p, q] @ Rr) @ lb
        if j != WORLD:
            dRi = rotation_gradients(ai)
            dRj = rotation_gradients(form.poses[j].a)
            d2Rj = _rotation_hessians(form.poses[j].a)
            for p in range(3):
                for q in range(3):
                    G[6 * j + 3 + p, 6 * j + 3 + q] += vee(d2Rj[p, q].T @ Ri @ Rr) @ lb
                    cross = vee(dRj[q].T @ dRi[p] @ Rr) @ lb
                    G[6 * i + 3 + p, 6 * j + 3 + q] += cross
                    G[6 * j + 3 + q, 6 * i + 3 + p] += cross
    return G


def null_space_basis(J, rel_cut=1e-8):
    """Orthonormal rows spanning ``ker J``, from the SVD of ``J``.

    A basis with zero rows means the structure is locked; callers that need
    motion raise :class:`LockedStructureError`.
    """
    J = np.asarray(J, dtype=float)
    ncol = J.shape[1]
    if J.shape[0] == 0:
        return NullBasis(np.eye(ncol), 0.0, 0)
    _, sigma, Vt = np.linalg.svd(J, full_matrices=True)
    smax = sigma[0] if sigma.size else 0.0
    cut = rel_cut * smax
    rank = int(np.sum(sigma > cut))
    N = Vt[rank:].copy()
    for row in N:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return NullBasis(N, cut, rank)


def form_null_basis(structure, form):
    return null_space_basis(assemble_jacobian(structure, form))


def coordinate_to_angular(a):
    """Matrix ``T`` with ``omega = T @ a_dot`` for the axis-angle ``a``."""
    R = rodrigues(a)
    dR = rotation_gradients(a)
    return np.column_stack([vee(dR[i] @ R.T) for i in range(3)])


def coordinate_to_velocity(form, qdot):
    """Convert coordinate rates ``[p_dot, a_dot]`` to ``[v, omega]`` per bar."""
    qdot = np.asarray(qdot, dtype=float).reshape(-1, 6)
    out = qdot.copy()
    for b, pose in enumerate(form.poses):
        out[b, 3:] = coordinate_to_angular(pose.a) @ qdot[b, 3:]
    return out.ravel()


def bar_endpoints(structure, form):
    """World positions of both endpoints of every bar, shape (n, 2, 3)."""
    out = np.empty((len(structure.bars), 2, 3))
    for b, (bar, pose) in enumerate(zip(structure.bars, form.poses)):
        R = rodrigues(pose.a)
        out[b] = bar.endpoints_local @ R.T + pose.p
    return out


def planar_form(structure, vertices, label=""):
    """Form of a chain whose bar ``b`` runs from ``vertices[b]`` to ``vertices[b+1]``."""
    vertices = np.asarray(vertices, dtype=float)
    poses = []
    for b in range(len(structure.bars)):
        v0, v1 = vertices[b], vertices[b + 1]
        mid = 0.5 * (v0 + v1)
        theta = np.arctan2(v1[1] - v0[1], v1[0] - v0[0])
        poses.append(Pose.planar(mid[0], mid[1], theta))
    return Form(poses, label)


def chain_structure(lengths, fixed_bar=0, fixed_pose=None, gravity=None, k0=None,
                    density=DEFAULT_DENSITY, ground="fixed"):
    """Open chain of bars joined end to end by z-axis hinges.

    ``ground="fixed"`` welds ``fixed_bar`` to WORLD at ``fixed_pose``;
    ``ground="pin"`` pins endpoint 0 of ``fixed_bar`` with a hinge instead.
    """
    bars = [Bar.rod(b, L, density) for b, L in enumerate(lengths)]
    joints = []
    for b in range(len(bars) - 1):
        joints.append(Joint(JointKind.HINGE, b, b + 1,
                            bars[b].endpoints_local[1], bars[b + 1].endpoints_local[0]))
    fixed_pose = Pose.identity() if fixed_pose is None else fixed_pose
    if ground == "fixed":
        anchor = bars[fixed_bar].endpoints_local[0]
        joints.insert(0, Joint(JointKind.FIXED, fixed_bar, WORLD, anchor,
                               world_point(fixed_pose, anchor), rel_rotation=fixed_pose.a))
    elif ground == "pin":
        anchor = bars[fixed_bar].endpoints_local[0]
        joints.insert(0, Joint(JointKind.HINGE, fixed_bar, WORLD, anchor,
                               world_point(fixed_pose, anchor)))
    else:
        raise ValueError(f"unknown ground mode {ground!r}")
    kw = {} if gravity is None else {"gravity": gravity}
    return Structure(bars, joints, [], k0=k0, **kw)


def chain_vertices(lengths, origin, angles):
    """Vertices of a planar chain from absolute bar angles."""
    pts = [np.asarray(origin, dtype=float)[:2]]
    for L, th in zip(lengths, angles):
        pts.append(pts[-1] + L * np.array([np.cos(th), np.sin(th)]))
    return np.array(pts)


def chain_angles(structure, form):
    """Absolute in-plane bar angles of a planar form."""
    return np.array([pose.a[2] for pose in form.poses])
