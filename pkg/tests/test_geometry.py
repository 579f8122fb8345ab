import json

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from metamorph.geometry import (
    CurveSamples,
    PiecewiseCurve,
    SchemaError,
    curve_length,
    fit_curves,
    fit_form,
    load_curves,
    parse_curves,
    sample_curve,
)
from metamorph.scenes import six_bar_curves


def test_sample_line():
    s = sample_curve(PiecewiseCurve.line([0, 0], [4, 0]), 4)
    assert np.allclose(s.points, [[0, 0], [1, 0], [2, 0], [3, 0], [4, 0]])


def test_sample_m1_gives_endpoints():
    cv = PiecewiseCurve(np.array([[[0, 0], [1, 2], [3, 2], [4, 0]]]))
    assert np.allclose(sample_curve(cv, 1).points, [[0, 0], [4, 0]])


def _dense_arc_lengths(curve, pts, n=100_000):
    from metamorph.geometry import bezier_point
    t = np.linspace(0, 1, n // len(curve.segments) + 1)
    poly = np.vstack([np.array([bezier_point(seg, u) for u in t])[:-1] for seg in curve.segments]
                     + [curve.segments[-1][3][None]])
    cum = np.concatenate([[0], np.cumsum(np.linalg.norm(np.diff(poly, axis=0), axis=1))])
    idx = [int(np.argmin(np.linalg.norm(poly - p, axis=1))) for p in pts[:-1]]
    return cum, np.array(idx + [len(poly) - 1])


def test_sample_circle_equal_arcs():
    cv = PiecewiseCurve.circle_arc([0, 0], 1.0, 0.0, 2 * np.pi, pieces=4)
    assert cv.closed
    s = sample_curve(cv, 8)
    assert np.allclose(s.points[0], s.points[-1])
    cum, idx = _dense_arc_lengths(cv, s.points)
    arcs = np.diff(cum[idx])
    assert np.max(np.abs(arcs - 2 * np.pi / 8)) <= 0.005 * 2 * np.pi / 8


def test_degenerate_curve_rejected():
    with pytest.raises(ValueError):
        sample_curve(PiecewiseCurve.line([1, 1], [1, 1]), 3)


def test_curve_validation():
    with pytest.raises(ValueError):
        PiecewiseCurve(np.array([[[0, 0], [1, 0], [2, 0], [3, 0]], [[5, 0], [6, 0], [7, 0], [8, 0]]]))
    with pytest.raises(ValueError):
        PiecewiseCurve(np.array([[[0, 0], [1, 0], [2, 0], [3, 0]]]), closed=True)


def test_fit_feasible_samples_unchanged():
    pts = np.array([[0, 0], [2, 0], [4, 0], [6, 0]], float)
    fit = fit_form(CurveSamples(pts), 2.0)
    assert np.allclose(fit.vertices, pts, atol=1e-9)
    assert fit.residual <= 1e-16


def test_fit_single_segment_shrinks_symmetrically():
    fit = fit_form(CurveSamples(np.array([[0.0, 0.0], [2.0, 0.0]])), 1.0)
    assert np.allclose(fit.vertices, [[0.5, 0], [1.5, 0]], atol=1e-8)
    assert fit.residual == pytest.approx(0.25, abs=1e-8)


def test_fit_quarter_circle_chords():
    ang = np.linspace(0, np.pi / 2, 8)
    pts = 10 * np.column_stack([np.cos(ang), np.sin(ang)])
    c = float(np.linalg.norm(pts[1] - pts[0]))
    fit = fit_form(CurveSamples(pts), c)
    assert fit.residual <= 1e-6
    assert fit.constraint_error() <= 1e-8 * c


@settings(max_examples=20, deadline=None)
@given(st.lists(st.tuples(st.floats(-30, 30), st.floats(-30, 30)), min_size=3, max_size=7),
       st.floats(2.0, 20.0))
def test_fit_always_feasible(points, c):
    pts = np.array(points, float)
    assume(np.min(np.linalg.norm(np.diff(pts, axis=0), axis=1)) > 0.5)
    fit = fit_form(CurveSamples(pts), c)
    d = np.linalg.norm(np.diff(fit.vertices, axis=0), axis=1)
    assert np.max(np.abs(d - c)) <= 1e-8 * c
    assert fit.residual >= 0


def test_fit_rejects_coincident_samples():
    with pytest.raises(ValueError):
        fit_form(CurveSamples(np.zeros((3, 2))), 1.0)


def test_fit_curves_share_topology():
    cq = PiecewiseCurve.circle_arc([0, 0], 100.0, 0.0, np.pi / 2)
    line = PiecewiseCurve.line([0, 0], [157.08, 0])
    fits, samples = fit_curves([cq, line], 6)
    assert [len(f.vertices) for f in fits] == [7, 7]
    assert fits[0].bar_length == fits[1].bar_length
    assert max(f.constraint_error() for f in fits) <= 1e-8 * fits[0].bar_length
    assert np.allclose(samples[0].points.mean(axis=0), 0.0, atol=1e-9)


def test_fit_objective_trace_monotone():
    ang = np.linspace(0, np.pi, 9)
    pts = 40 * np.column_stack([np.cos(ang), np.sin(ang)])
    trace = []
    fit_form(CurveSamples(pts), 12.0, trace=trace)
    for inner in trace:
        assert np.all(np.diff(inner) <= 1e-12 * max(1.0, abs(inner[0])))


def test_parse_curves_document(tmp_path):
    doc = six_bar_curves()
    curves, m, bar_length, extras = parse_curves(doc)
    assert m == 6 and bar_length == 50.0
    assert extras["fixed_bar"] == 0
    assert curve_length(curves[0]) == pytest.approx(300.0, rel=1e-3)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(doc))
    assert load_curves(p)[1] == 6


@pytest.mark.parametrize("doc", [[], {"m": 3}, {"curves": [], "m": 3},
                                 {"curves": [{"segments": [[0, 0]]}, {"segments": [[0, 0]]}], "m": 3},
                                 {"curves": six_bar_curves()["curves"], "m": 0},
                                 {"curves": six_bar_curves()["curves"], "m": 3, "bar_length": -1}])
def test_parse_curves_rejects_malformed(doc):
    with pytest.raises(SchemaError):
        parse_curves(doc)


def test_load_curves_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(SchemaError):
        load_curves(p)
