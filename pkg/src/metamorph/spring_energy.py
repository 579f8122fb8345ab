"""Axis-angle rotation calculus and the Hookean spring potential.

Coordinates of one rigid body are ``q = [p, a]``: a translation ``p`` and an
axis-angle vector ``a``.  A spring joins a local point on each of two bodies;
all derivatives below are taken with respect to the 12 coordinates
``(p1, a1, p2, a2)`` in that order.

Units are millimeters, grams and seconds throughout.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-7
# below this angle the second-derivative coefficients use their Taylor series
SERIES_ANGLE = 2e-2
DEGENERATE_LENGTH = 1e-9
GRAVITY = 9810.0  # mm/s^2


class DegenerateSpringError(ValueError):
    """Raised when both spring attachment points coincide."""

    def __init__(self, message, spring_id=None):
        super().__init__(message)
        self.spring_id = spring_id


def skew(v):
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def vee(m):
    """Inverse of :func:`skew` applied to the skew part of ``m``."""
    return 0.5 * np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])


def rodrigues(a):
    """Rotation matrix of the axis-angle vector ``a``."""
    a = np.asarray(a, dtype=float)
    theta = np.linalg.norm(a)
    if theta < SMALL_ANGLE:
        K = skew(a)
        return np.eye(3) + K + 0.5 * K @ K
    v = a / theta
    c, s = np.cos(theta), np.sin(theta)
    return c * np.eye(3) + s * skew(v) + (1.0 - c) * np.outer(v, v)


def rotation_gradient(a, i):
    """Derivative of ``rodrigues(a)`` with respect to component ``i`` of ``a``.

    Below ``SMALL_ANGLE`` the first-order expansion about zero is used, whose
    leading term is ``skew(e_i)``.
    """
    a = np.asarray(a, dtype=float)
    e = np.zeros(3)
    e[i] = 1.0
    theta = np.linalg.norm(a)
    if theta < SMALL_ANGLE:
        E, K = skew(e), skew(a)
        return E + 0.5 * (E @ K + K @ E)
    v = a / theta
    vi = v[i]
    K = skew(v)
    c, s = np.cos(theta), np.sin(theta)
    one_minus_c = 2.0 * np.sin(0.5 * theta) ** 2
    return (c * vi * K
            + s * vi * (K @ K)
            + (s / theta) * skew(e - vi * v)
            + (one_minus_c / theta) * (np.outer(e, v) + np.outer(v, e) - 2.0 * vi * np.outer(v, v)))


def rotation_gradients(a):
    """All three ``dR/da_i`` stacked as a (3, 3, 3) array indexed ``[i]``."""
    return np.stack([rotation_gradient(a, i) for i in range(3)])


def _angle_coefficients(theta):
    """``alpha = sin t / t`` and ``beta = (1 - cos t) / t^2`` with derivatives.

    Returns (alpha, alpha1, alpha2, beta, beta1, beta2) where ``x1 = x'/t`` and
    ``x2 = x1'/t`` so that ``grad_a x = x1 * a`` and
    ``hess_a x = x1 * I + x2 * a a^T``.
    """
    t2 = theta * theta
    if theta < SERIES_ANGLE:
        t4, t6 = t2 * t2, t2 * t2 * t2
        alpha = 1.0 - t2 / 6.0 + t4 / 120.0 - t6 / 5040.0
        alpha1 = -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0 + t6 / 45360.0
        alpha2 = 1.0 / 15.0 - t2 / 210.0 + t4 / 7560.0 - t6 / 498960.0
        beta = 0.5 - t2 / 24.0 + t4 / 720.0 - t6 / 40320.0
        beta1 = -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0 + t6 / 453600.0
        beta2 = 1.0 / 90.0 - t2 / 1680.0 + t4 / 75600.0 - t6 / 5987520.0
        return alpha, alpha1, alpha2, beta, beta1, beta2
    c, s = np.cos(theta), np.sin(theta)
    omc = 2.0 * np.sin(0.5 * theta) ** 2
    t3, t4 = t2 * theta, t2 * t2
    alpha = s / theta
    alpha1 = (theta * c - s) / t3
    alpha2 = (-t2 * s - 3.0 * theta * c + 3.0 * s) / (t4 * theta)
    beta = omc / t2
    beta1 = (theta * s - 2.0 * omc) / t4
    beta2 = (theta * c - s) / (t4 * theta) - 4.0 * (theta * s - 2.0 * omc) / (t4 * t2)
    return alpha, alpha1, alpha2, beta, beta1, beta2


def rotated_point_hessian(a, u):
    """Second derivatives of ``R(a) u``: array ``H[j, i, :] = d2(R u)/da_j da_i``.

    Uses ``R u = u + alpha (a x u) + beta (a x (a x u))``, which stays well
    conditioned through ``a = 0``.
    """
    a = np.asarray(a, dtype=float)
    u = np.asarray(u, dtype=float)
    theta = np.linalg.norm(a)
    al, al1, al2, be, be1, be2 = _angle_coefficients(theta)
    w = np.cross(a, u)
    z = a * np.dot(a, u) - u * np.dot(a, a)
    eye = np.eye(3)
    dw = np.cross(eye, u)  # dw[i] = e_i x u
    dz = np.array([eye[i] * np.dot(a, u) + a * u[i] - 2.0 * a[i] * u for i in range(3)])
    H = np.empty((3, 3, 3))
    for i in range(3):
        for j in range(i, 3):
            dij = 1.0 if i == j else 0.0
            val = ((al1 * dij + al2 * a[i] * a[j]) * w
                   + al1 * a[i] * dw[j] + al1 * a[j] * dw[i]
                   + (be1 * dij + be2 * a[i] * a[j]) * z
                   + be1 * a[i] * dz[j] + be1 * a[j] * dz[i]
                   + be * (eye[i] * u[j] + eye[j] * u[i] - 2.0 * dij * u))
            H[j, i] = val
            H[i, j] = val
    return H


@dataclass
class Spring:
    """Linear spring between local points on two bars.

    ``s`` and ``t`` record where along each bar the attachment sits (0 at the
    first endpoint, 1 at the second); ``u1_local``/``u2_local`` are the
    resulting body-frame points.
    """

    id: int
    body_1: int
    body_2: int
    u1_local: np.ndarray
    u2_local: np.ndarray
    k: float
    l: float
    l0: float
    s: float = 0.5
    t: float = 0.5

    def __post_init__(self):
        self.u1_local = np.asarray(self.u1_local, dtype=float)
        self.u2_local = np.asarray(self.u2_local, dtype=float)
        if self.body_1 == self.body_2:
            raise ValueError(f"spring {self.id} attaches a bar to itself")
        if not (self.k > 0 and self.l > 0):
            raise ValueError(f"spring {self.id} needs k > 0 and l > 0")


@dataclass
class EnergyReport:
    V: float
    grad: np.ndarray
    hess: np.ndarray
    spring_V: float = 0.0
    gravity_V: float = 0.0

    def to_dict(self):
        return {"V": self.V, "spring_V": self.spring_V, "gravity_V": self.gravity_V,
                "grad": self.grad.tolist(), "hess": self.hess.tolist()}


def _separation(spring, pose_1, pose_2):
    R1 = rodrigues(pose_1.a)
    R2 = rodrigues(pose_2.a)
    g = R1 @ spring.u1_local + pose_1.p - R2 @ spring.u2_local - pose_2.p
    return g


def _check_length(d, spring):
    if d < DEGENERATE_LENGTH:
        raise DegenerateSpringError(
            f"spring {spring.id}: attachment points coincide (length {d:.3e} mm)", spring.id)


def spring_length(spring, pose_1, pose_2):
    return float(np.linalg.norm(_separation(spring, pose_1, pose_2)))


def spring_potential(spring, pose_1, pose_2, k=None, l=None):
    """``0.5 k (l - |g|)^2``; ``k``/``l`` override the spring's own values."""
    k = spring.k if k is None else k
    l = spring.l if l is None else l
    d = spring_length(spring, pose_1, pose_2)
    return 0.5 * k * (l - d) ** 2


def _separation_jacobian(spring, pose_1, pose_2):
    """``g`` and its 3x12 Jacobian with respect to (p1, a1, p2, a2)."""
    g = _separation(spring, pose_1, pose_2)
    G = np.zeros((3, 12))
    G[:, 0:3] = np.eye(3)
    G[:, 6:9] = -np.eye(3)
    dR1 = rotation_gradients(pose_1.a)
    dR2 = rotation_gradients(pose_2.a)
    for i in range(3):
        G[:, 3 + i] = dR1[i] @ spring.u1_local
        G[:, 9 + i] = -dR2[i] @ spring.u2_local
    return g, G


def spring_gradient(spring, pose_1, pose_2, k=None, l=None):
    """Gradient ``k (1 - l/|g|) G^T g`` over (p1, a1, p2, a2)."""
    k = spring.k if k is None else k
    l = spring.l if l is None else l
    g, G = _separation_jacobian(spring, pose_1, pose_2)
    d = np.linalg.norm(g)
    _check_length(d, spring)
    return k * (1.0 - l / d) * (G.T @ g)


def _dh(spring, pose_1, pose_2, g, G):
    """Matrix of ``d h_i / d x_j`` with ``h = G^T g``."""
    M = G.T @ G
    H1 = rotated_point_hessian(pose_1.a, spring.u1_local)
    H2 = rotated_point_hessian(pose_2.a, spring.u2_local)
    M[3:6, 3:6] += np.einsum("jik,k->ji", H1, g)
    M[9:12, 9:12] -= np.einsum("jik,k->ji", H2, g)
    return M


def spring_hessian(spring, pose_1, pose_2, k=None, l=None):
    """Full 12x12 Hessian of the spring potential.

    Cross-body blocks are nonzero through the ``G^T G`` and ``h h^T`` terms even
    though the mixed second derivatives of ``g`` itself vanish.
    """
    k = spring.k if k is None else k
    l = spring.l if l is None else l
    g, G = _separation_jacobian(spring, pose_1, pose_2)
    d = np.linalg.norm(g)
    _check_length(d, spring)
    h = G.T @ g
    dh = _dh(spring, pose_1, pose_2, g, G)
    hess = k * (dh - l * (dh / d - np.outer(h, h) / d ** 3))
    return 0.5 * (hess + hess.T)


def spring_length_derivatives(spring, pose_1, pose_2):
    """Current length ``d`` with its gradient and Hessian over the 12 coordinates."""
    g, G = _separation_jacobian(spring, pose_1, pose_2)
    d = np.linalg.norm(g)
    _check_length(d, spring)
    h = G.T @ g
    grad = h / d
    hess = (_dh(spring, pose_1, pose_2, g, G) - np.outer(grad, grad)) / d
    return d, grad, 0.5 * (hess + hess.T)


def spring_dofs(spring):
    """Indices of the 12 spring coordinates inside the 6n structure vector."""
    b1, b2 = spring.body_1, spring.body_2
    return np.r_[6 * b1:6 * b1 + 6, 6 * b2:6 * b2 + 6]


def gravity_energy(structure, form):
    gvec = np.asarray(structure.gravity, dtype=float)
    return float(sum(-bar.mass * np.dot(gvec, pose.p)
                     for bar, pose in zip(structure.bars, form.poses)))


def gravity_gradient(structure, form):
    """Gradient of the gravity potential; only translation rows are nonzero."""
    n = len(structure.bars)
    grad = np.zeros(6 * n)
    gvec = np.asarray(structure.gravity, dtype=float)
    for b, bar in enumerate(structure.bars):
        grad[6 * b:6 * b + 3] = -bar.mass * gvec
    return grad


def total_energy_report(structure, form, design=None, with_hessian=True):
    """Spring plus gravity energy of ``form`` with its gradient and Hessian.

    ``design`` supplies per-spring ``k`` and ``l`` arrays; without it the
    springs' own values are used.  Summation follows spring id order.
    """
    n = len(structure.bars)
    springs = structure.springs
    if design is not None:
        ks, ls = np.asarray(design.k, float), np.asarray(design.l, float)
        if len(ks) != len(springs) or len(ls) != len(springs):
            raise ValueError("design dimensions do not match the spring set")
    else:
        ks = np.array([s.k for s in springs])
        ls = np.array([s.l for s in springs])
    grad = gravity_gradient(structure, form)
    hess = np.zeros((6 * n, 6 * n))
    Vg = gravity_energy(structure, form)
    Vs = 0.0
    for s, k, l in zip(springs, ks, ls):
        p1, p2 = form.poses[s.body_1], form.poses[s.body_2]
        idx = spring_dofs(s)
        Vs += spring_potential(s, p1, p2, k, l)
        grad[idx] += spring_gradient(s, p1, p2, k, l)
        if with_hessian:
            hess[np.ix_(idx, idx)] += spring_hessian(s, p1, p2, k, l)
    return EnergyReport(V=Vs + Vg, grad=grad, hess=hess, spring_V=Vs, gravity_V=Vg)
