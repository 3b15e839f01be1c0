import re

import numpy as np
import pytest

from rrbpred.metrics import MultiModalPrediction
from rrbpred.predictors import predict_kd1
from rrbpred.render import RenderError, parse_polylines, render_svg, write_figure
from rrbpred.scene import T_PRED

from conftest import lane_state


def drawn_rects(svg):
    """Drivable rectangles exactly as written into the figure (world metres)."""
    block = svg.split('<g id="drivable"', 1)[1].split("</g>", 1)[0]
    return np.array([[float(v) for v in r]
                     for r in re.findall(r'<rect x="([^"]+)" y="([^"]+)" width="([^"]+)" height="([^"]+)"/>', block)])


def inside_any(points, rects):
    x, y = points[:, :1], points[:, 1:]
    # half-open cells, like the raster
    return np.any((x >= rects[:, 0]) & (x < rects[:, 0] + rects[:, 2])
                  & (y >= rects[:, 1]) & (y < rects[:, 1] + rects[:, 3]), axis=1)


def predictions(state):
    kd = predict_kd1(state).means
    drift = kd + np.column_stack([np.zeros(T_PRED), 1.5 * np.arange(1, T_PRED + 1)])  # leaves the road
    return {"kd1": MultiModalPrediction(kd), "edn": MultiModalPrediction(drift)}


class TestRender:
    def test_header_and_file(self, tmp_path):
        s = lane_state()
        path = write_figure(tmp_path / "fig.svg", s, predictions(s))
        text = path.read_text()
        assert path.stat().st_size > 0
        assert text.startswith('<svg xmlns="http://www.w3.org/2000/svg"') and text.rstrip().endswith("</svg>")

    def test_deterministic(self):
        s = lane_state()
        assert render_svg(s, predictions(s)) == render_svg(s, predictions(s))

    def test_distinct_styles(self):
        s = lane_state()
        svg = render_svg(s, predictions(s))
        styles = re.findall(r'class="prediction" data-pipeline="([^"]+)".*?stroke="(#[0-9a-f]+)"', svg)
        assert dict(styles)["kd1"] != dict(styles)["edn"]
        assert "ground-truth" in svg and 'id="history"' in svg

    def test_off_road_prediction_exits_drawn_band(self):
        s = lane_state()
        svg = render_svg(s, predictions(s))
        rects = drawn_rects(svg)
        lines = parse_polylines(svg)
        kd, edn = lines[("kd1", 0)], lines[("edn", 0)]
        assert inside_any(kd, rects).all()
        assert not inside_any(edn, rects).all()
        # the drawn coordinates agree with the map itself
        np.testing.assert_array_equal(inside_any(edn, rects), s.map.is_drivable(edn))

    def test_drawn_points_are_world_coordinates(self):
        s = lane_state()
        pred = predictions(s)
        pts = parse_polylines(render_svg(s, pred))[("edn", 0)]
        np.testing.assert_allclose(pts[1:], pred["edn"].means[0], atol=5e-4)

    def test_multimodal_polylines(self):
        s = lane_state()
        kd = predict_kd1(s).means
        svg = render_svg(s, {"rrb_m": MultiModalPrediction(np.stack([kd, kd + 0.5]))})
        assert set(parse_polylines(svg)) == {("rrb_m", 0), ("rrb_m", 1)}

    def test_unsupported_extension(self, tmp_path):
        with pytest.raises(RenderError, match="svg"):
            write_figure(tmp_path / "fig.png", lane_state())

    def test_too_many_pipelines(self):
        s = lane_state()
        kd = MultiModalPrediction(predict_kd1(s).means)
        with pytest.raises(RenderError):
            render_svg(s, {f"p{i}": kd for i in range(20)})
