import io
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from PIL import Image

from conftest import tiny_model
from xpose.bench import SweepCurve, TransferReport, TransferRow, feature_diff
from xpose.report import emit_csv, emit_grid, emit_svg, emit_sweep_csv, parse_csv, parse_sweep_csv

SVG = "{http://www.w3.org/2000/svg}"


def make_report(attack, rates, transform="transpose"):
    rows = [TransferRow(f"bb{i}", b, t) for i, (b, t) in enumerate(rates)]
    return TransferReport("white", attack, transform, rows, "synthetic", 3, 100)


def test_csv_round_trip():
    reps = [make_report("MIFGSM", [(12.0, 31.0), (0.1 + 0.2, 50.0)]), make_report("DIM", [(40.0, 61.0), (9.0, 9.0)])]
    text = emit_csv(reps)
    assert text.splitlines()[0] == (
        "attack,white_box,transform,dataset,seed,n_images,bb0:transformed,bb0:baseline,bb1:transformed,bb1:baseline"
    )
    assert parse_csv(text) == reps


def test_csv_pairs_transformed_before_baseline():
    line = emit_csv([make_report("MIFGSM", [(12.5, 31.0)])]).splitlines()[1]
    assert line.endswith(",31.0,12.5")


def test_empty_csv_is_header_only():
    text = emit_csv([])
    assert text == "attack,white_box,transform,dataset,seed,n_images\n"
    assert parse_csv(text) == []


def test_mismatched_columns_rejected():
    a = make_report("A", [(1.0, 2.0)])
    b = make_report("B", [(1.0, 2.0), (3.0, 4.0)])
    with pytest.raises(ValueError):
        emit_csv([a, b])
    with pytest.raises(ValueError):
        parse_csv("x,y\n1,2\n")


def test_sweep_csv_round_trip_and_argmax_flag():
    curves = [SweepCurve("a", [(0.0, 10.0), (90.0, 40.0), (180.0, 40.0)]), SweepCurve("b", [(0.0, 5.0)])]
    text = emit_sweep_csv(curves)
    flags = [line.rsplit(",", 1)[1] for line in text.splitlines()[1:]]
    assert flags == ["0", "1", "0", "1"]
    assert parse_sweep_csv(text) == curves


def test_svg_has_axes_polyline_and_marker():
    curves = [SweepCurve("a", [(a, float(a % 70)) for a in range(0, 360, 10)]), SweepCurve("b&c", [(0, 1.0), (10, 2.0)])]
    root = ET.fromstring(emit_svg(curves, title="rot <sweep>"))
    texts = [t.text for t in root.iter(f"{SVG}text")]
    assert "rotation angle (deg)" in texts and "success rate (%)" in texts
    assert "rot <sweep>" in texts and "b&c" in texts
    assert len(root.findall(f"{SVG}polyline")) == 2
    assert len(root.findall(f"{SVG}circle")) == 2


def test_single_point_svg_has_marker_only():
    root = ET.fromstring(emit_svg([SweepCurve("a", [(0.0, 50.0)])]))
    assert root.findall(f"{SVG}polyline") == []
    (circle,) = root.findall(f"{SVG}circle")
    assert circle.get("fill") == "red"


def test_grid_png_has_five_panels():
    a, b = np.random.default_rng(0).uniform(size=(2, 8, 8, 2)).astype(np.float32)
    rep = feature_diff(tiny_model(), a[..., :2], b[..., :2], "c1", k=4)
    # tiny model has 2 channels; pad to RGB for display
    rep.input_without = np.concatenate([a, a[..., :1]], axis=-1)
    rep.input_with = np.concatenate([b, b[..., :1]], axis=-1)
    png = emit_grid(rep, scale=2)
    assert png[:8] == b"\x89PNG\r\n\x1a\n"
    img = Image.open(io.BytesIO(png))
    assert img.mode == "RGB"
    # two 8px inputs and three 2x2 grids of 8px tiles, all scaled by 2, plus gaps
    assert img.size == (2 * (8 + 8 + 3 * 17) + 4 * 4, 2 * 17)
