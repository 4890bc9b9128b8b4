import re

import numpy as np
import pytest

from resample_bnn.plots import (
    band_chart_svg,
    bar_chart_svg,
    emit_plots,
    parse_axes_comment,
)
from resample_bnn.sweeps import PatchRow, SweepResult, aggregate_rows


def make_result(n_factors=5, patches=6, seed=0, n_draws=10):
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_factors):
        s = round(0.5 + 0.25 * i, 10)
        for m in range(patches):
            p = float(rng.random())
            rows.append(PatchRow(f"s{s}_resc_{m}", s, "bilinear", "none",
                                 "rescaled", p, float(rng.random() * 0.1),
                                 n_draws, int(p > 0.5)))
    return SweepResult(rows=rows, per_factor=aggregate_rows(rows),
                       training_scales=[0.9, 1.45], pooled_std=False)


def invert_y(py, axes):
    return (axes["py0"] - py) / (axes["py0"] - axes["py1"])


def invert_x(px, axes):
    return axes["x0"] + (px - axes["px0"]) / (axes["px1"] - axes["px0"]) \
        * (axes["x1"] - axes["x0"])


class TestBarChart:
    def test_bar_heights_match_stats(self, tmp_path):
        result = make_result(n_draws=1)
        path = tmp_path / "bars.svg"
        bar_chart_svg(result, path, "bars")
        text = path.read_text()
        axes = parse_axes_comment(text)
        for cls, attr in (("acc", "accuracy"), ("conf", "confidence")):
            rects = re.findall(
                rf'<rect class="{cls}" data-scale="([^"]+)" x="[0-9.]+" '
                rf'y="([0-9.]+)" width="[0-9.]+" height="([0-9.]+)"', text)
            assert len(rects) == len(result.per_factor)
            for scale_text, y, height in rects:
                stat = next(s for s in result.per_factor
                            if abs(s.scale - float(scale_text)) < 1e-9)
                got = invert_y(float(y), axes)
                assert abs(got - getattr(stat, attr)) < 0.005  # 0.5% of range

    def test_training_range_shaded(self, tmp_path):
        result = make_result()
        path = tmp_path / "bars.svg"
        bar_chart_svg(result, path, "bars")
        text = path.read_text()
        m = re.search(r'<rect class="train-range" x="([0-9.]+)" y="[0-9.]+" '
                      r'width="([0-9.]+)"', text)
        assert m is not None
        axes = parse_axes_comment(text)
        lo = invert_x(float(m.group(1)), axes)
        hi = invert_x(float(m.group(1)) + float(m.group(2)), axes)
        assert abs(lo - 0.9) < 0.01 and abs(hi - 1.45) < 0.01

    def test_single_point_grid_valid(self, tmp_path):
        result = make_result(n_factors=1)
        path = tmp_path / "one.svg"
        bar_chart_svg(result, path, "one")
        text = path.read_text()
        assert text.startswith("<svg") and text.rstrip().endswith("</svg>")
        assert '<rect class="acc"' in text
        band_path = tmp_path / "one_band.svg"
        band_chart_svg(result, band_path, "one")
        assert '<circle class="pt"' in band_path.read_text()


class TestBandChart:
    def test_mean_points_match_stats(self, tmp_path):
        result = make_result()
        path = tmp_path / "band.svg"
        band_chart_svg(result, path, "band")
        text = path.read_text()
        axes = parse_axes_comment(text)
        pts = re.findall(r'<circle class="pt" data-scale="([^"]+)" '
                         r'cx="([0-9.]+)" cy="([0-9.]+)"', text)
        assert len(pts) == len(result.per_factor)
        for scale_text, cx, cy in pts:
            stat = next(s for s in result.per_factor
                        if abs(s.scale - float(scale_text)) < 1e-9)
            assert abs(invert_x(float(cx), axes) - stat.scale) < 0.005 * 4.0
            assert abs(invert_y(float(cy), axes) - stat.mean_p_rescaled) < 0.005

    def test_band_path_present_and_clamped(self, tmp_path):
        result = make_result()
        path = tmp_path / "band.svg"
        band_chart_svg(result, path, "band")
        text = path.read_text()
        m = re.search(r'<path class="band" d="([^"]+)"', text)
        assert m is not None
        axes = parse_axes_comment(text)
        ys = [float(v) for v in re.findall(r"[0-9.]+ ([0-9.]+)", m.group(1))]
        for py in ys:
            val = invert_y(py, axes)
            assert -0.005 <= val <= 1.005  # display clamp to [0, 1]


class TestEmitPlots:
    def test_writes_csv_and_svg_per_sweep(self, tmp_path):
        results = {"a": ("bar", make_result(n_draws=1)),
                   "b": ("band", make_result())}
        written = emit_plots(results, tmp_path / "plots")
        names = sorted(p.name for p in written)
        assert names == ["a.csv", "a.svg", "b.csv", "b.svg"]
        for p in written:
            assert p.exists() and p.stat().st_size > 0

    def test_empty_results_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="no sweep results"):
            emit_plots({}, tmp_path)

    def test_unknown_kind_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="kind"):
            emit_plots({"x": ("pie", make_result())}, tmp_path)
