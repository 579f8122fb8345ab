import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from metamorph.fabrication_export import (
    LayerAssignment,
    assign_z_depths,
    design_from_dict,
    export_design_json,
    export_svg,
    parse_design,
    spring_attachments,
    zigzag,
)
from metamorph.geometry import SchemaError
from metamorph.rigidbody import bar_endpoints, chain_structure
from metamorph.scenes import springy_linkage
from metamorph.spring_placement import spring_between
from metamorph.stability_opt import analyze_design

SVG = "{http://www.w3.org/2000/svg}"


def test_layers_two_bars_one_spring():
    st, _ = springy_linkage()
    layers = assign_z_depths(st)
    assert layers.bars == [0, 1] and layers.springs == [2]
    assert layers.count == 3 and layers.depth == pytest.approx(15.0)
    assert [b.z_layer for b in st.bars] == [0, 1]


def test_layers_six_bars_four_springs():
    st = chain_structure([50.0] * 6)
    springs = [spring_between(st, i, 0, i + 1, 0.5, 0.5, 1.0, 10.0) for i in range(4)]
    layers = assign_z_depths(st.with_springs(springs))
    assert layers.count == 10 and layers.depth == pytest.approx(50.0)
    assert sorted(layers.bars + layers.springs) == list(range(10))


def test_layers_without_springs():
    st = chain_structure([50.0] * 3)
    layers = assign_z_depths(st)
    assert layers.springs == [] and layers.depth == pytest.approx(15.0)
    assert LayerAssignment.from_dict(layers.to_dict()) == layers


def test_zigzag_endpoints_exact():
    p0, p1 = np.array([1.0, 2.0, 0.0]), np.array([-3.0, 7.5, 0.0])
    pts = zigzag(p0, p1)
    assert np.array_equal(pts[0], p0[:2]) and np.array_equal(pts[-1], p1[:2])


def test_svg_element_counts_and_coordinates():
    st, forms = springy_linkage()
    root = ET.fromstring(export_svg(st, forms[0]))
    bars = root.findall(f".//{SVG}path[@class='bar']")
    springs = root.findall(f".//{SVG}polyline[@class='spring']")
    assert len(bars) == 2 and len(springs) == 1
    assert len(root.findall(f".//{SVG}circle[@class='hinge']")) == 1
    assert len(root.findall(f".//{SVG}rect[@class='anchor']")) == 1
    ends = bar_endpoints(st, forms[0])
    for el in bars:
        nums = el.get("d").replace("M", "").replace("L", "").split()
        pts = np.array([[float(v) for v in p.split(",")] for p in nums])
        assert np.allclose(pts, ends[int(el.get("data-id")), :, :2], atol=1e-6)
    pts = np.array([[float(v) for v in p.split(",")] for p in springs[0].get("points").split()])
    att = spring_attachments(st, forms[0])[0, :, :2]
    assert np.allclose(pts[[0, -1]], att, atol=1e-6)
    assert springs[0].get("data-z") == "2"


def test_svg_is_byte_identical():
    first = export_svg(*_second_form())
    assert export_svg(*_second_form()) == first


def _second_form():
    st, forms = springy_linkage()
    return st, forms[1]


def test_design_json_round_trip(tmp_path):
    st, forms = springy_linkage()
    rep = analyze_design(st, forms)
    text = export_design_json(st, forms, report=rep, path=tmp_path / "d.json")
    bundle = parse_design(json.loads(text))
    again = export_design_json(bundle.structure, bundle.forms, bundle.design, bundle.report,
                               layers=bundle.layers)
    assert again == text == (tmp_path / "d.json").read_text()
    for f in json.loads(text)["report"]["forms"]:
        assert f["eigenvalues"] == sorted(f["eigenvalues"])


def test_design_defaults_for_missing_fields():
    st, forms = springy_linkage()
    doc = json.loads(export_design_json(st, forms))
    del doc["report"], doc["layers"]
    del doc["design"]["lb"], doc["design"]["ub"]
    bundle = parse_design(doc)
    assert bundle.report is None
    assert bundle.layers.count == 3
    assert np.all(bundle.design.lb[:, 1] < bundle.design.ub[:, 1])


def test_design_rejects_wrong_lengths():
    st, _ = springy_linkage()
    with pytest.raises(SchemaError):
        design_from_dict({"k": [1.0, 2.0], "l": [1.0, 2.0]}, st)
    with pytest.raises(SchemaError):
        parse_design({"schema": "other"})
