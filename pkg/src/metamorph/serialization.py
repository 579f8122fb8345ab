"""JSON round-tripping of structures, forms, designs and reports.

Floats are written with ``repr`` precision so that load followed by dump
reproduces a file byte for byte.
"""
from __future__ import annotations

import json

import numpy as np

from metamorph.geometry import SchemaError
from metamorph.rigidbody import (
    DEFAULT_DENSITY,
    Bar,
    Form,
    Joint,
    JointKind,
    Pose,
    Structure,
    WORLD,
    chain_structure,
    planar_form,
)
from metamorph.spring_energy import Spring

SCHEMA = "metamorph/v1"


def _f(x):
    return [float(v) for v in np.asarray(x, float).ravel()]


def bar_to_dict(bar):
    d = {"id": int(bar.id), "length": float(bar.length), "mass": float(bar.mass),
         "endpoints_local": [_f(p) for p in bar.endpoints_local],
         "inertia": [_f(r) for r in bar.inertia]}
    if bar.z_layer is not None:
        d["z_layer"] = int(bar.z_layer)
    return d


def joint_to_dict(jt):
    return {"kind": jt.kind.value, "body_i": int(jt.body_i), "body_j": int(jt.body_j),
            "anchor_i": _f(jt.anchor_i), "anchor_j": _f(jt.anchor_j), "axis": _f(jt.axis),
            "rel_rotation": _f(jt.rel_rotation)}


def spring_to_dict(sp):
    return {"id": int(sp.id), "body_1": int(sp.body_1), "body_2": int(sp.body_2),
            "s": float(sp.s), "t": float(sp.t), "u1_local": _f(sp.u1_local),
            "u2_local": _f(sp.u2_local), "k": float(sp.k), "l": float(sp.l), "l0": float(sp.l0)}


def form_to_dict(form):
    return {"label": form.label, "poses": [_f(p.as_array()) for p in form.poses]}


def structure_to_dict(structure):
    return {"bars": [bar_to_dict(b) for b in structure.bars],
            "joints": [joint_to_dict(j) for j in structure.joints],
            "springs": [spring_to_dict(s) for s in structure.springs],
            "gravity": _f(structure.gravity),
            "k0": None if structure.k0 is None else float(structure.k0)}


def scene_to_dict(structure, forms, **extra):
    d = {"schema": SCHEMA}
    d.update(structure_to_dict(structure))
    d["forms"] = [form_to_dict(f) for f in forms]
    d.update(extra)
    return d


def _need(d, key, where):
    if key not in d:
        raise SchemaError(f"{where}: missing field '{key}'")
    return d[key]


def bar_from_dict(d):
    bid = int(_need(d, "id", "bar"))
    length = float(_need(d, "length", f"bar {bid}"))
    if "endpoints_local" not in d:
        bar = Bar.rod(bid, length, float(d.get("density", DEFAULT_DENSITY)))
        if "mass" in d:
            scale = float(d["mass"]) / bar.mass
            bar = Bar(bid, bar.endpoints_local, length, float(d["mass"]), bar.inertia * scale)
    else:
        bar = Bar(bid, d["endpoints_local"], length, float(_need(d, "mass", f"bar {bid}")),
                  _need(d, "inertia", f"bar {bid}"))
    bar.z_layer = d.get("z_layer")
    return bar


def joint_from_dict(d, bars):
    kind = JointKind(_need(d, "kind", "joint"))
    bi, bj = int(_need(d, "body_i", "joint")), int(_need(d, "body_j", "joint"))
    return Joint(kind, bi, bj, _need(d, "anchor_i", "joint"), _need(d, "anchor_j", "joint"),
                 d.get("axis", [0.0, 0.0, 1.0]), d.get("rel_rotation", [0.0, 0.0, 0.0]))


def spring_from_dict(d, bars):
    sid = int(_need(d, "id", "spring"))
    b1, b2 = int(_need(d, "body_1", f"spring {sid}")), int(_need(d, "body_2", f"spring {sid}"))
    s, t = float(d.get("s", 0.5)), float(d.get("t", 0.5))
    u1 = d.get("u1_local")
    u2 = d.get("u2_local")
    if u1 is None:
        u1 = bars[b1].local_point(s)
    if u2 is None:
        u2 = bars[b2].local_point(t)
    l = float(_need(d, "l", f"spring {sid}"))
    return Spring(sid, b1, b2, u1, u2, float(_need(d, "k", f"spring {sid}")), l,
                  float(d.get("l0", l)), s, t)


def structure_from_dict(d):
    if not isinstance(d, dict):
        raise SchemaError("scene must be a JSON object")
    try:
        bars = [bar_from_dict(b) for b in _need(d, "bars", "scene")]
        joints = [joint_from_dict(j, bars) for j in _need(d, "joints", "scene")]
        springs = [spring_from_dict(s, bars) for s in d.get("springs", [])]
        gravity = d.get("gravity", [0.0, -9810.0, 0.0])
        st = Structure(bars, joints, springs, np.asarray(gravity, float), d.get("k0"))
        st.validate()
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise SchemaError(f"invalid scene: {exc}") from exc
    return st


def forms_from_dict(d, structure):
    out = []
    for i, fd in enumerate(d.get("forms", [])):
        poses = np.asarray(_need(fd, "poses", f"form {i}"), float)
        if poses.shape != (len(structure.bars), 6) or not np.all(np.isfinite(poses)):
            raise SchemaError(f"form {i}: poses must be {len(structure.bars)} rows of 6 numbers")
        out.append(Form([Pose(r[:3], r[3:]) for r in poses], fd.get("label", f"form{i}")))
    return out


def scene_from_dict(d):
    if d.get("schema", SCHEMA) != SCHEMA:
        raise SchemaError(f"unsupported schema {d.get('schema')!r}")
    st = structure_from_dict(d)
    return st, forms_from_dict(d, st)


def _plain(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, (np.ndarray, tuple)):
        return obj.tolist() if isinstance(obj, np.ndarray) else list(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(data):
    return json.dumps(data, indent=2, default=_plain) + "\n"


def write_json(path, data):
    with open(path, "w") as fh:
        fh.write(dumps(data))


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON in {path}: {exc}") from exc


def _align(vertices, ref, bar):
    """Rigidly move ``vertices`` so that bar ``bar`` lands on the same bar of ``ref``."""
    a0, a1 = vertices[bar], vertices[bar + 1]
    b0, b1 = ref[bar], ref[bar + 1]
    ang = np.arctan2(*(b1 - b0)[::-1]) - np.arctan2(*(a1 - a0)[::-1])
    c, s = np.cos(ang), np.sin(ang)
    R = np.array([[c, -s], [s, c]])
    return (vertices - a0) @ R.T + b0


def chain_scene_from_fits(fits, fixed_bar=0, gravity=None, density=DEFAULT_DENSITY, k0=None,
                          labels=None, ground_angle=None):
    """Chain structure grounded at ``fixed_bar`` plus one form per fitted chain.

    Every form after the first is moved rigidly so that the grounded bar
    coincides with its position in the first form.  ``ground_angle`` (radians
    from +x) additionally turns all forms about the grounded bar's first
    endpoint so that bar points in that direction.
    """
    verts = [np.asarray(f.vertices if hasattr(f, "vertices") else f, float) for f in fits]
    c = float(np.linalg.norm(verts[0][1] - verts[0][0]))
    m = len(verts[0]) - 1
    if not 0 <= fixed_bar < m:
        raise SchemaError(f"fixed_bar must be in 0..{m - 1}")
    if ground_angle is not None:
        ref = verts[0][fixed_bar] + c * np.array([np.cos(ground_angle), np.sin(ground_angle)])
        target = verts[0].copy()
        target[fixed_bar + 1] = ref
        verts[0] = _align(verts[0], target, fixed_bar)
    verts = [verts[0]] + [_align(v, verts[0], fixed_bar) for v in verts[1:]]
    v0 = verts[0]
    d = v0[fixed_bar + 1] - v0[fixed_bar]
    theta = float(np.arctan2(d[1], d[0]))
    mid = 0.5 * (v0[fixed_bar] + v0[fixed_bar + 1])
    st = chain_structure([c] * m, fixed_bar=fixed_bar, fixed_pose=Pose.planar(mid[0], mid[1], theta),
                         gravity=gravity, k0=k0, density=density)
    labels = labels or [f"form{i}" for i in range(len(verts))]
    forms = [planar_form(st, v, lab) for v, lab in zip(verts, labels)]
    return st, forms


__all__ = ["SCHEMA", "WORLD", "scene_to_dict", "scene_from_dict", "structure_from_dict",
           "structure_to_dict", "forms_from_dict", "form_to_dict", "chain_scene_from_fits",
           "dumps", "write_json", "read_json"]
