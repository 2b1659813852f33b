import math
import re
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyntraj.analytics import MetricConfig, MetricReport, compute_report, read_metrics_csv
from dyntraj.errors import ValidationError
from dyntraj.render import (
    CanvasTransform,
    PlotSpec,
    emit_html,
    emit_svg,
    export_csv,
    export_json,
    plot_metrics,
    read_html_data,
)
from dyntraj.trajectory import TrajectorySet

from helpers import random_series

SVG_NS = "{http://www.w3.org/2000/svg}"
SVG11_ELEMENTS = {"svg", "title", "defs", "marker", "path", "rect", "g", "circle", "polyline", "text"}


def _traj(n_nodes=4, T=3, seed=0, anchors=3):
    rng = np.random.default_rng(seed)
    positions = {(i, t): tuple(float(v) for v in rng.normal(size=2)) for i in range(n_nodes) for t in range(T)}
    labels = tuple(f"n{i}" for i in range(n_nodes))
    return TrajectorySet(
        labels,
        tuple(str(2000 + t) for t in range(T)),
        positions,
        tuple(range(anchors)),
        tuple(tuple(float(v) for v in rng.normal(size=2)) for _ in range(anchors)),
        {"method": "pca", "k": 2},
    )


def _parse(path):
    root = ET.parse(path).getroot()
    assert root.tag == SVG_NS + "svg"
    for el in root.iter():
        assert el.tag.startswith(SVG_NS) and el.tag[len(SVG_NS) :] in SVG11_ELEMENTS
    return root


def test_single_node_two_points(tmp_path):
    traj = TrajectorySet(("a",), ("0", "1"), {(0, 0): (0.0, 0.0), (0, 1): (1.0, 2.0)})
    emit_svg(traj, PlotSpec(highlight=["a"]), tmp_path / "t.svg")
    root = _parse(tmp_path / "t.svg")
    lines = root.findall(f".//{SVG_NS}polyline")
    assert len(lines) == 1
    assert len(lines[0].get("points").split()) == 2


def test_empty_highlight_only_anchors(tmp_path):
    traj = _traj(anchors=5)
    emit_svg(traj, PlotSpec(), tmp_path / "t.svg")
    root = _parse(tmp_path / "t.svg")
    assert root.findall(f".//{SVG_NS}polyline") == []
    circles = root.findall(f".//{SVG_NS}circle")
    assert len(circles) == 5
    group = root.find(f".//{SVG_NS}g[@id='anchors']")
    assert group.get("fill") == "#B0B0B0" and group.get("fill-opacity") == "0.4"


def test_degenerate_box(tmp_path):
    traj = TrajectorySet(("a", "b"), ("0", "1"), {(0, 0): (1.0, 1.0), (0, 1): (1.0, 1.0), (1, 0): (1.0, 1.0)}, (1,), ((1.0, 1.0),))
    emit_svg(traj, PlotSpec(highlight=["a"]), tmp_path / "t.svg")
    root = _parse(tmp_path / "t.svg")
    for val in re.findall(r'"(-?[\d.]+)"', (tmp_path / "t.svg").read_text()):
        assert math.isfinite(float(val))
    pts = root.find(f".//{SVG_NS}polyline").get("points").split()
    assert pts == ["400,300", "400,300"]


def test_all_points_on_one_axis(tmp_path):
    traj = TrajectorySet(("a",), ("0", "1", "2"), {(0, 0): (0.0, 5.0), (0, 1): (1.0, 5.0), (0, 2): (2.0, 5.0)})
    emit_svg(traj, PlotSpec(highlight=["a"]), tmp_path / "t.svg")
    pts = [tuple(map(float, p.split(","))) for p in _parse(tmp_path / "t.svg").find(f".//{SVG_NS}polyline").get("points").split()]
    assert pts[0] == (40.0, 300.0) and pts[-1] == (760.0, 300.0)


@pytest.mark.parametrize(
    "traj, spec, match",
    [
        (TrajectorySet(("a",), ("0",), {}), PlotSpec(), "zero positions"),
        (_traj(), PlotSpec(highlight=["ghost"]), "unknown highlighted label"),
        (_traj(), PlotSpec(width=50), "width"),
        (_traj(), PlotSpec(colors={"n0": "red"}), "colour"),
        (_traj(), PlotSpec(stride=0), "stride"),
    ],
)
def test_svg_errors(tmp_path, traj, spec, match):
    with pytest.raises(ValidationError, match=match):
        emit_svg(traj, spec, tmp_path / "t.svg")


def test_svg_arrows_labels_and_timestamps(tmp_path):
    traj = _traj()
    spec = PlotSpec(highlight=["n1", "n2"], colors={"n2": "#123456"}, show_timestamps=True)
    emit_svg(traj, spec, tmp_path / "t.svg")
    root = _parse(tmp_path / "t.svg")
    lines = root.findall(f".//{SVG_NS}polyline")
    assert [ln.get("marker-end") for ln in lines] == ["url(#arrow0)", "url(#arrow1)"]
    assert lines[1].get("stroke") == "#123456"
    texts = [t.text for t in root.iter(SVG_NS + "text")]
    assert "n1" in texts and "n2" in texts and "2001" in texts


def test_stride_keeps_endpoints(tmp_path):
    traj = _traj(n_nodes=1, T=10, anchors=0)
    emit_svg(traj, PlotSpec(highlight=["n0"], stride=4), tmp_path / "t.svg")
    pts = _parse(tmp_path / "t.svg").find(f".//{SVG_NS}polyline").get("points").split()
    assert len(pts) == 4  # t = 0, 4, 8 and the final point


def test_svg_is_byte_deterministic(tmp_path):
    traj = _traj()
    spec = PlotSpec(highlight=["n0", "n3"], show_timestamps=True)
    emit_svg(traj, spec, tmp_path / "a.svg")
    emit_svg(traj, spec, tmp_path / "b.svg")
    emit_html(traj, spec, tmp_path / "a.html")
    emit_html(traj, spec, tmp_path / "b.html")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    assert (tmp_path / "a.html").read_bytes() == (tmp_path / "b.html").read_bytes()


coords = st.floats(-1e4, 1e4, allow_nan=False)


@given(st.lists(st.tuples(coords, coords), min_size=3, max_size=30), st.integers(100, 2000), st.integers(100, 2000))
@settings(max_examples=200, deadline=None)
def test_canvas_preserves_distance_ratios(points, w, h):
    xs, ys = zip(*points)
    tf = CanvasTransform.fit(xs, ys, w, h)
    mapped = [tf(x, y) for x, y in points]
    for (x, y), (px, py) in zip(points, mapped):
        assert -1e-6 <= px <= w + 1e-6 and -1e-6 <= py <= h + 1e-6
    d0 = math.dist(points[0], points[1])
    d1 = math.dist(points[1], points[2])
    c0 = math.dist(mapped[0], mapped[1])
    c1 = math.dist(mapped[1], mapped[2])
    if d0 > 1e-3 and d1 > 1e-3:
        assert abs(c0 / c1 - d0 / d1) <= 1e-6 * max(1.0, d0 / d1)


def test_canvas_margin_and_letterbox():
    tf = CanvasTransform.fit([0.0, 10.0], [0.0, 1.0], 800, 600)
    assert tf(0.0, 0.5) == pytest.approx((40.0, 300.0))
    assert tf(10.0, 0.5) == pytest.approx((760.0, 300.0))


# -- HTML ----------------------------------------------------------------------------------------


def test_html_has_no_external_urls(tmp_path):
    traj = _traj()
    traj.meta["note"] = "see http://example.com </script>"
    emit_html(traj, PlotSpec(highlight=["n0"]), tmp_path / "p.html")
    text = (tmp_path / "p.html").read_text()
    assert re.search(r"(src|href)\s*=", text) is None
    assert "xmlns" not in text
    assert "<script" in text and "http://example.com" in text  # only as escaped data
    assert text.count("</script>") == 1
    assert text.count("<svg") == traj.T


def test_html_round_trip(tmp_path):
    traj = _traj(n_nodes=6, T=4)
    traj.positions[(5, 2)] = (1 / 3, -2.0**-40)
    emit_html(traj, PlotSpec(highlight=["n5"]), tmp_path / "p.html")
    back = read_html_data(tmp_path / "p.html")
    assert back == traj


def test_html_rejects_oversize(tmp_path, monkeypatch):
    import dyntraj.render as render

    monkeypatch.setattr(render, "MAX_POINTS", 10)
    with pytest.raises(ValidationError, match="decimate first"):
        emit_html(_traj(n_nodes=4, T=3), PlotSpec(), tmp_path / "p.html")
    emit_html(_traj(n_nodes=4, T=3), PlotSpec(stride=2), tmp_path / "p.html")


def test_html_rejects_a_million_points(tmp_path):
    n = 500_001
    positions = {}
    for i in range(n):
        positions[(i, 0)] = (0.0, 0.0)
        positions[(i, 1)] = (1.0, 1.0)
    traj = TrajectorySet(tuple(str(i) for i in range(n)), ("0", "1"), positions)
    with pytest.raises(ValidationError, match="decimate first"):
        emit_html(traj, PlotSpec(), tmp_path / "p.html")


# -- exports ------------------------------------------------------------------------------------


def test_json_export_round_trip(tmp_path):
    traj = _traj(n_nodes=5, T=4, seed=3)
    export_json(traj, tmp_path / "t.json")
    assert TrajectorySet.load(tmp_path / "t.json").positions == traj.positions


def test_csv_row_count(tmp_path):
    s = random_series(np.random.default_rng(8), n_max=20, t_max=5, min_common=4)
    export_csv(compute_report(s, MetricConfig(n=2, m=3)), tmp_path / "m.csv")
    expected = sum(len(set(s.matrices[t - 1].row_map) & set(s.matrices[t].row_map)) for t in range(1, s.T))
    assert len(read_metrics_csv(tmp_path / "m.csv")) == expected


def test_empty_report_is_header_only(tmp_path):
    export_csv(MetricReport(labels=()), tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text() == "node,t,jaccard_n,rbo_raw,rbo_norm,arc,l1,l2\n"


def test_metrics_figure(tmp_path):
    s = random_series(np.random.default_rng(1), n_max=15, t_max=4, min_common=4)
    report = compute_report(s, MetricConfig(n=2, m=3))
    plot_metrics(report, tmp_path / "a.png", [m.timestamp_label for m in s.matrices])
    plot_metrics(report, tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    plot_metrics(MetricReport(labels=()), tmp_path / "empty.png")
    assert (tmp_path / "empty.png").stat().st_size > 0
