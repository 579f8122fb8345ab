"""Layer assignment and file export of finished designs.

Every bar and spring gets its own z layer so that nothing in the stack
collides when the linkage folds between forms.  Designs are written as
versioned JSON; each form can also be drawn as an SVG.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from metamorph.geometry import SchemaError
from metamorph.rigidbody import JointKind, WORLD, bar_endpoints, world_point
from metamorph.serialization import (
    SCHEMA,
    dumps,
    forms_from_dict,
    read_json,
    structure_from_dict,
    structure_to_dict,
    form_to_dict,
)
from metamorph.stability_opt import DesignVector, StabilityReport

LAYER_PITCH = 5.0  # mm per layer
COILS = 8
SVG_DIGITS = 9


@dataclass
class LayerAssignment:
    bars: list = field(default_factory=list)
    springs: list = field(default_factory=list)
    pitch: float = LAYER_PITCH

    @property
    def count(self):
        return len(self.bars) + len(self.springs)

    @property
    def depth(self):
        return self.count * self.pitch

    def bar_layer(self, bar_id):
        return self.bars[bar_id]

    def spring_layer(self, index):
        return self.springs[index]

    def to_dict(self):
        return {"pitch": float(self.pitch), "bars": [int(b) for b in self.bars],
                "springs": [int(s) for s in self.springs], "depth": float(self.depth)}

    @classmethod
    def from_dict(cls, d):
        return cls([int(b) for b in d["bars"]], [int(s) for s in d["springs"]],
                   float(d.get("pitch", LAYER_PITCH)))


def assign_z_depths(structure, pitch=LAYER_PITCH):
    """Bars first in id order, then springs in id order, one layer each."""
    n = len(structure.bars)
    bars = list(range(n))
    order = sorted(range(len(structure.springs)), key=lambda i: structure.springs[i].id)
    springs = [0] * len(order)
    for rank, i in enumerate(order):
        springs[i] = n + rank
    for bar, z in zip(structure.bars, bars):
        bar.z_layer = z
    return LayerAssignment(bars, springs, pitch)


# -- SVG ---------------------------------------------------------------------

def _fmt(x):
    v = round(float(x), SVG_DIGITS)
    if v == 0:
        v = 0.0
    return f"{v:.{SVG_DIGITS}f}".rstrip("0").rstrip(".")


def _pt(p):
    return f"{_fmt(p[0])},{_fmt(p[1])}"


def spring_attachments(structure, form):
    """World attachment points (S, 2, 3) of every spring in ``form``."""
    out = np.empty((len(structure.springs), 2, 3))
    for i, sp in enumerate(structure.springs):
        out[i, 0] = world_point(form.poses[sp.body_1], sp.u1_local)
        out[i, 1] = world_point(form.poses[sp.body_2], sp.u2_local)
    return out


def zigzag(p0, p1, coils=COILS, width=None, lead=0.1):
    """Polyline points of a decorative coil spring from ``p0`` to ``p1`` (2D).

    The first and last points are exactly the attachment points.
    """
    p0 = np.asarray(p0, float)[:2]
    p1 = np.asarray(p1, float)[:2]
    d = p1 - p0
    L = float(np.linalg.norm(d))
    if L == 0.0:
        return np.array([p0, p1])
    u = d / L
    nrm = np.array([-u[1], u[0]])
    width = 0.08 * L if width is None else width
    pts = [p0, p0 + lead * d]
    body = np.linspace(lead, 1.0 - lead, 2 * coils + 1)
    for i, s in enumerate(body[1:-1], start=1):
        side = 1.0 if i % 2 else -1.0
        pts.append(p0 + s * d + 0.5 * width * side * nrm)
    pts += [p0 + (1.0 - lead) * d, p1]
    return np.array(pts)


def hinge_points(structure, form):
    """World positions of hinge joints (one per joint)."""
    pts = []
    for jt in structure.joints:
        if jt.kind is JointKind.HINGE:
            pts.append(world_point(form.poses[jt.body_i], jt.anchor_i))
    return np.array(pts).reshape(-1, 3)


def anchor_points(structure, form):
    pts = []
    for jt in structure.joints:
        if jt.kind is JointKind.FIXED and jt.body_j == WORLD:
            pts.append(world_point(form.poses[jt.body_i], jt.anchor_i))
    return np.array(pts).reshape(-1, 3)


def svg_document(structure, form, layers=None, margin=10.0):
    """SVG text for one form.

    Geometry is written in world millimetres inside a group that flips the y
    axis, so a reader recovers world coordinates by negating y of the
    rendered (viewBox) coordinates, or by reading the raw attributes.
    """
    layers = layers or assign_z_depths(structure)
    ends = bar_endpoints(structure, form)[:, :, :2]
    att = spring_attachments(structure, form)[:, :, :2]
    hinges = hinge_points(structure, form)[:, :2]
    anchors = anchor_points(structure, form)[:, :2]
    L = structure.typical_length()
    everything = np.vstack([ends.reshape(-1, 2), att.reshape(-1, 2), hinges, anchors])
    lo = everything.min(axis=0) - margin
    hi = everything.max(axis=0) + margin
    # viewBox in flipped coordinates
    vb = (lo[0], -hi[1], hi[0] - lo[0], hi[1] - lo[1])
    r = 0.04 * L
    lines = ['<?xml version="1.0" encoding="UTF-8"?>',
             f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
             f'width="{_fmt(vb[2])}mm" height="{_fmt(vb[3])}mm" '
             f'viewBox="{" ".join(_fmt(v) for v in vb)}">',
             f'<title>{_escape(form.label)}</title>',
             '<g transform="scale(1,-1)" fill="none" stroke-linecap="round">']
    items = []
    for b in range(len(structure.bars)):
        z = layers.bar_layer(b)
        p, q = ends[b]
        items.append((z, f'<path class="bar" data-id="{b}" data-z="{z}" '
                         f'd="M {_pt(p)} L {_pt(q)}" stroke="#333333" stroke-width="{_fmt(0.06 * L)}"/>'))
    for i, sp in enumerate(structure.springs):
        z = layers.spring_layer(i)
        pts = " ".join(_pt(p) for p in zigzag(att[i, 0], att[i, 1]))
        items.append((z, f'<polyline class="spring" data-id="{sp.id}" data-z="{z}" '
                         f'points="{pts}" stroke="#c0392b" stroke-width="{_fmt(0.015 * L)}"/>'))
    items.sort(key=lambda it: it[0])
    lines += [s for _, s in items]
    for h in hinges:
        lines.append(f'<circle class="hinge" cx="{_fmt(h[0])}" cy="{_fmt(h[1])}" r="{_fmt(r)}" '
                     f'stroke="#000000" fill="#ffffff"/>')
    for a in anchors:
        lines.append(f'<rect class="anchor" x="{_fmt(a[0] - r)}" y="{_fmt(a[1] - r)}" '
                     f'width="{_fmt(2 * r)}" height="{_fmt(2 * r)}" fill="#000000"/>')
    lines += ["</g>", "</svg>"]
    return "\n".join(lines) + "\n"


def _escape(text):
    return (str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;"))


def export_svg(structure, form, design=None, layers=None, path=None):
    """Write (and return) the SVG of one form.  ``design`` overrides spring values."""
    if design is not None:
        structure = _with_design(structure, design)
    text = svg_document(structure, form, layers)
    if path is not None:
        with open(path, "w", newline="\n") as fh:
            fh.write(text)
    return text


def _with_design(structure, design):
    from metamorph.spring_placement import _apply
    return structure.with_springs(_apply(structure.springs, design))


# -- design JSON -------------------------------------------------------------

def design_to_dict(design):
    return {"k": [float(v) for v in design.k], "l": [float(v) for v in design.l],
            "lb": [[float(a), float(b)] for a, b in design.lb],
            "ub": [[float(a), float(b)] for a, b in design.ub]}


def design_from_dict(d, structure):
    if d is None:
        if not structure.springs:
            return DesignVector(np.zeros(0), np.zeros(0), np.zeros((0, 2)), np.zeros((0, 2)))
        return DesignVector.from_springs(structure.springs, structure.spring_scale())
    n = len(structure.springs)
    try:
        dv = DesignVector(d["k"], d["l"], d.get("lb", np.zeros((n, 2))), d.get("ub", np.zeros((n, 2))))
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"design: {exc}") from exc
    if len(dv) != n or dv.lb.shape[0] != n or dv.ub.shape[0] != n:
        raise SchemaError("design: arrays must have one entry per spring")
    if "lb" not in d or "ub" not in d:
        ref = DesignVector.from_springs(structure.springs, structure.spring_scale())
        if "lb" not in d:
            dv.lb = ref.lb
        if "ub" not in d:
            dv.ub = ref.ub
    return dv


def design_document(structure, forms, design=None, report=None, layers=None, extra=None):
    layers = layers or assign_z_depths(structure)
    if design is None:
        design = design_from_dict(None, structure)
    doc = {"schema": SCHEMA}
    doc.update(structure_to_dict(structure))
    doc["forms"] = [form_to_dict(f) for f in forms]
    doc["design"] = design_to_dict(design)
    doc["report"] = None if report is None else report.to_dict()
    doc["layers"] = layers.to_dict()
    if extra:
        doc["extra"] = extra
    return doc


def export_design_json(structure, forms, design=None, report=None, path=None, layers=None,
                       extra=None):
    """Write (and return) the design document text."""
    text = dumps(design_document(structure, forms, design, report, layers, extra))
    if path is not None:
        with open(path, "w", newline="\n") as fh:
            fh.write(text)
    return text


@dataclass
class DesignBundle:
    structure: object
    forms: list
    design: DesignVector
    report: StabilityReport | None
    layers: LayerAssignment
    extra: dict | None = None


def parse_design(doc):
    if not isinstance(doc, dict):
        raise SchemaError("design file must be a JSON object")
    if doc.get("schema", SCHEMA) != SCHEMA:
        raise SchemaError(f"unsupported schema {doc.get('schema')!r}")
    st = structure_from_dict(doc)
    forms = forms_from_dict(doc, st)
    design = design_from_dict(doc.get("design"), st)
    rep = doc.get("report")
    try:
        report = None if rep is None else StabilityReport.from_dict(rep)
        layers = (LayerAssignment.from_dict(doc["layers"]) if doc.get("layers") is not None
                  else assign_z_depths(st))
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"invalid report or layers: {exc}") from exc
    if len(layers.bars) != len(st.bars) or len(layers.springs) != len(st.springs):
        raise SchemaError("layers do not match the structure")
    return DesignBundle(st, forms, design, report, layers, doc.get("extra"))


def load_design(path):
    return parse_design(read_json(path))
