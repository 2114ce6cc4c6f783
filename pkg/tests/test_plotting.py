import xml.etree.ElementTree as ET

import numpy as np
import pytest

from defed.plotting import COLORS, PlotError, graph_svg, line_chart_svg
from defed.topology import build_complete_graph


def test_line_chart_is_valid_svg():
    t = np.arange(1, 50)
    svg = line_chart_svg([("a", t, 1 / t), ("b <&>", t, 2 / t)], title="x", logx=True, logy=True)
    root = ET.fromstring(svg)
    lines = [e for e in root.iter() if e.tag.endswith("polyline")]
    assert [e.get("stroke") for e in lines] == list(COLORS[:2])


def test_log_axes_drop_nonpositive_points():
    svg = line_chart_svg([("a", np.arange(5), np.array([0.0, 1, 2, 3, 4]))], logx=True, logy=True)
    pts = [e for e in ET.fromstring(svg).iter() if e.tag.endswith("polyline")][0].get("points").split()
    assert len(pts) == 4


def test_constant_series_and_errors():
    ET.fromstring(line_chart_svg([("c", np.arange(3), np.ones(3))]))
    with pytest.raises(PlotError):
        line_chart_svg([])
    with pytest.raises(PlotError):
        line_chart_svg([("z", np.arange(3), np.zeros(3))], logy=True)


def test_graph_svg_complete():
    root = ET.fromstring(graph_svg(build_complete_graph(5)))
    assert len([e for e in root.iter() if e.tag.endswith("line")]) == 10
