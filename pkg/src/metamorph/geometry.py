"""Input curves to linkage forms.

Each target curve is sampled at uniform arc length and the samples are
pulled onto a chain of equal-length bars by a constrained least-squares fit.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from metamorph.optim import ALMOptions, Problem, augmented_lagrangian

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(5)


class SchemaError(ValueError):
    """Malformed input file."""


class FitError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class PiecewiseCurve:
    segments: np.ndarray  # (n_seg, 4, 2) cubic Bezier control points
    closed: bool = False

    def __post_init__(self):
        seg = np.asarray(self.segments, dtype=float)
        if seg.ndim != 3 or seg.shape[1:] != (4, 2) or seg.shape[0] < 1:
            raise ValueError("segments must be a non-empty list of 4 control points in 2D")
        if not np.all(np.isfinite(seg)):
            raise ValueError("control points must be finite")
        scale = max(1.0, float(np.max(np.abs(seg))))
        for a, b in zip(seg[:-1], seg[1:]):
            if np.linalg.norm(a[3] - b[0]) > 1e-9 * scale:
                raise ValueError("consecutive segments must share an endpoint")
        if self.closed and np.linalg.norm(seg[-1, 3] - seg[0, 0]) > 1e-9 * scale:
            raise ValueError("closed curve must end where it starts")
        object.__setattr__(self, "segments", seg)

    @classmethod
    def line(cls, p0, p1):
        p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
        return cls(np.array([[p0, p0 + (p1 - p0) / 3, p0 + 2 * (p1 - p0) / 3, p1]]))

    @classmethod
    def polyline(cls, points, closed=False):
        pts = np.asarray(points, float)
        segs = [[a, a + (b - a) / 3, a + 2 * (b - a) / 3, b] for a, b in zip(pts[:-1], pts[1:])]
        return cls(np.array(segs), closed)

    @classmethod
    def circle_arc(cls, center, radius, start, stop, pieces=4):
        """Bezier approximation of a circular arc from ``start`` to ``stop`` (radians)."""
        c = np.asarray(center, float)
        angles = np.linspace(start, stop, pieces + 1)
        segs = []
        for a0, a1 in zip(angles[:-1], angles[1:]):
            k = 4.0 / 3.0 * np.tan((a1 - a0) / 4.0)
            p0 = c + radius * np.array([np.cos(a0), np.sin(a0)])
            p3 = c + radius * np.array([np.cos(a1), np.sin(a1)])
            p1 = p0 + k * radius * np.array([-np.sin(a0), np.cos(a0)])
            p2 = p3 - k * radius * np.array([-np.sin(a1), np.cos(a1)])
            segs.append([p0, p1, p2, p3])
        closed = np.isclose(abs(stop - start), 2 * np.pi)
        segs = np.array(segs)
        if closed:
            segs[-1, 3] = segs[0, 0]
        return cls(segs, bool(closed))


@dataclass
class CurveSamples:
    points: np.ndarray
    source: str = ""

    @property
    def m(self):
        return len(self.points) - 1


@dataclass
class FittedForm:
    vertices: np.ndarray
    bar_length: float
    residual: float

    def constraint_error(self):
        d = np.linalg.norm(np.diff(self.vertices, axis=0), axis=1)
        return float(np.max(np.abs(d - self.bar_length)))


def bezier_point(ctrl, t):
    s = 1.0 - t
    return (s ** 3) * ctrl[0] + 3 * s * s * t * ctrl[1] + 3 * s * t * t * ctrl[2] + t ** 3 * ctrl[3]


def bezier_speed(ctrl, t):
    s = 1.0 - t
    d = 3 * (s * s * (ctrl[1] - ctrl[0]) + 2 * s * t * (ctrl[2] - ctrl[1]) + t * t * (ctrl[3] - ctrl[2]))
    return np.hypot(d[..., 0], d[..., 1]) if d.ndim > 1 else float(np.hypot(d[0], d[1]))


def _gl(ctrl, a, b):
    x = 0.5 * (b - a) * _GL_NODES + 0.5 * (a + b)
    s = 1.0 - x[:, None]
    t = x[:, None]
    d = 3 * (s * s * (ctrl[1] - ctrl[0]) + 2 * s * t * (ctrl[2] - ctrl[1]) + t * t * (ctrl[3] - ctrl[2]))
    return 0.5 * (b - a) * float(_GL_WEIGHTS @ np.hypot(d[:, 0], d[:, 1]))


def segment_length(ctrl, a=0.0, b=1.0, rtol=1e-7, _whole=None, _depth=0):
    """Arc length of a Bezier segment on ``[a, b]`` by adaptive Gauss-Legendre."""
    whole = _gl(ctrl, a, b) if _whole is None else _whole
    mid = 0.5 * (a + b)
    left, right = _gl(ctrl, a, mid), _gl(ctrl, mid, b)
    if abs(left + right - whole) <= rtol * max(abs(left + right), 1e-300) or _depth > 40:
        return left + right
    return (segment_length(ctrl, a, mid, rtol, left, _depth + 1)
            + segment_length(ctrl, mid, b, rtol, right, _depth + 1))


def curve_length(curve):
    return float(sum(segment_length(seg) for seg in curve.segments))


def sample_curve(curve, m, source=""):
    """``m + 1`` points at uniform arc-length spacing, endpoints included."""
    if m < 1:
        raise ValueError("m must be at least 1")
    seg_len = np.array([segment_length(seg) for seg in curve.segments])
    total = float(seg_len.sum())
    if total < 1e-9:
        raise ValueError(f"degenerate curve: arc length {total:.3e} mm")
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    pts = [curve.segments[0][0].copy()]
    for k in range(1, m):
        target = total * k / m
        i = int(np.clip(np.searchsorted(cum, target, side="right") - 1, 0, len(seg_len) - 1))
        ctrl = curve.segments[i]
        local = target - cum[i]
        if local <= 0:
            t = 0.0
        elif local >= seg_len[i]:
            t = 1.0
        else:
            t = brentq(lambda u: segment_length(ctrl, 0.0, u) - local, 0.0, 1.0,
                       xtol=1e-14, rtol=1e-14)
        pts.append(bezier_point(ctrl, t))
    pts.append(curve.segments[0][0].copy() if curve.closed else curve.segments[-1][3].copy())
    return CurveSamples(np.array(pts), source)


class _ChainFit(Problem):
    """Scaled fit: variables are vertices divided by the bar length."""

    def __init__(self, target):
        self.target = target
        self.m = len(target) - 1

    def values(self, x):
        v = x.reshape(-1, 2)
        diff = v - self.target
        seg = v[:-1] - v[1:]
        ce = np.einsum("ij,ij->i", seg, seg) - 1.0
        return 0.5 * float(np.sum(diff * diff)), ce, np.zeros(0)

    def derivatives(self, x):
        v = x.reshape(-1, 2)
        seg = v[:-1] - v[1:]
        Je = np.zeros((self.m, v.size))
        for j in range(self.m):
            Je[j, 2 * j:2 * j + 2] = 2 * seg[j]
            Je[j, 2 * j + 2:2 * j + 4] = -2 * seg[j]
        return (v - self.target).ravel(), Je, np.zeros((0, v.size))


def _project_lengths(x, iterations=20):
    """Gauss-Newton projection onto the unit-length set with minimum-norm steps."""
    prob = _ChainFit(x.reshape(-1, 2))
    for _ in range(iterations):
        _, ce, _ = prob.values(x)
        if np.max(np.abs(ce), initial=0.0) < 1e-15:
            break
        _, Je, _ = prob.derivatives(x)
        x = x - np.linalg.lstsq(Je, ce, rcond=None)[0]
    return x


def fit_form(samples, c, initial=None, options=None, trace=None):
    """Closest chain of ``m`` bars of length ``c`` to the samples.

    Minimises ``0.5 * sum |v_j - s_j|^2`` subject to every consecutive pair of
    vertices lying exactly ``c`` apart.  ``trace``, when a list, receives the
    inner augmented-Lagrangian objective traces.
    """
    pts = np.asarray(samples.points if hasattr(samples, "points") else samples, float)
    m = len(pts) - 1
    if m < 1:
        raise ValueError("need at least two samples")
    if not c > 0:
        raise ValueError("bar length must be positive")
    if not np.all(np.isfinite(pts)):
        raise ValueError("samples must be finite")
    gaps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    if np.min(gaps) <= 1e-9 * max(1.0, float(np.max(np.abs(pts)))):
        raise ValueError("consecutive samples coincide")
    x0 = pts if initial is None else np.asarray(initial, float)
    if x0.shape != pts.shape:
        raise ValueError("initial guess must have m + 1 vertices")
    prob = _ChainFit(pts / c)
    opts = options or ALMOptions(max_outer=60, max_inner=500, ctol=1e-11, gtol=1e-11)
    big = np.full(x0.size, np.inf)
    try:
        res = augmented_lagrangian(prob, (x0 / c).ravel(), -big, big, opts)
        x = _project_lengths(res.x)
    except np.linalg.LinAlgError as exc:
        raise FitError(f"fit failed: {exc}", float("nan")) from exc
    if trace is not None:
        trace.extend(res.inner_traces)
    v = x.reshape(-1, 2) * c
    d2 = np.sum(np.diff(v, axis=0) ** 2, axis=1)
    violation = float(np.max(np.abs(d2 - c * c)))
    residual = 0.5 * float(np.sum((v - pts) ** 2))
    if violation > 1e-8 * c * c or not np.all(np.isfinite(v)):
        raise FitError(f"fit did not reach a feasible chain (violation {violation:.3e} mm^2,"
                       f" residual {residual:.6g} mm^2)", residual)
    return FittedForm(v, float(c), residual)


def normalize_samples(samples):
    """Translate samples so their centroid sits at the origin."""
    pts = np.asarray(samples.points, float)
    return CurveSamples(pts - pts.mean(axis=0), samples.source)


def fit_curves(curves, m, bar_length=None):
    """Sample every curve with the same ``m`` and fit chains of one bar length.

    The default bar length is the mean over curves of arc length / ``m``.
    """
    samples = [normalize_samples(sample_curve(cv, m, source=f"curve{i}"))
               for i, cv in enumerate(curves)]
    if bar_length is None:
        bar_length = float(np.mean([curve_length(cv) for cv in curves])) / m
    return [fit_form(s, bar_length) for s in samples], samples


def parse_curves(data):
    """Validate a curves document and return ``(curves, m, bar_length, extras)``."""
    if not isinstance(data, dict) or "curves" not in data:
        raise SchemaError("curves file must be an object with a 'curves' list")
    raw = data["curves"]
    if not isinstance(raw, list) or len(raw) != 2:
        raise SchemaError("'curves' must list exactly two curves")
    curves = []
    for i, entry in enumerate(raw):
        try:
            curves.append(PiecewiseCurve(np.asarray(entry["segments"], float),
                                         bool(entry.get("closed", False))))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"curve {i}: {exc}") from exc
    m = data.get("m")
    if not isinstance(m, int) or isinstance(m, bool) or m < 1:
        raise SchemaError("'m' must be a positive integer")
    bar_length = data.get("bar_length")
    if bar_length is not None and not (isinstance(bar_length, (int, float)) and bar_length > 0):
        raise SchemaError("'bar_length' must be a positive number")
    extras = {k: v for k, v in data.items() if k not in ("curves", "m", "bar_length")}
    return curves, m, bar_length, extras


def load_curves(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}") from exc
    return parse_curves(data)
