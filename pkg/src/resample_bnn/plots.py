"""Static SVG charts, hand-emitted so the artifact carries no plot deps.

Two chart kinds mirror the experiment reports: a paired bar chart
(accuracy vs confidence per factor) and a band chart (mean probability
line inside a +-2 std ribbon). Every SVG embeds its axis transform in an
``<!-- axes ... -->`` comment; data coordinates are recoverable from the
element geometry alone, which the tests exploit to cross-check the SVG
against the CSV.
"""

from __future__ import annotations

import re
from pathlib import Path

from .sweeps import SweepResult, write_rows_csv

WIDTH, HEIGHT = 860, 420
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 60, 20, 30, 50
PLOT_W = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
PLOT_H = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM

ACCURACY_COLOR = "#d62728"
CONFIDENCE_COLOR = "#1f77b4"
MEAN_COLOR = "#1f77b4"
BAND_COLOR = "#d62728"
TRAIN_COLOR = "#2ca02c"


class AxisTransform:
    def __init__(self, x0: float, x1: float):
        if x1 <= x0:
            x1 = x0 + 1.0
        self.x0, self.x1 = x0, x1

    def px(self, x: float) -> float:
        return MARGIN_LEFT + (x - self.x0) / (self.x1 - self.x0) * PLOT_W

    def py(self, y: float) -> float:
        return MARGIN_TOP + (1.0 - y) * PLOT_H

    def comment(self) -> str:
        return (f"<!-- axes x0={self.x0!r} x1={self.x1!r} y0=0.0 y1=1.0 "
                f"px0={MARGIN_LEFT} px1={MARGIN_LEFT + PLOT_W} "
                f"py0={MARGIN_TOP + PLOT_H} py1={MARGIN_TOP} -->")


def parse_axes_comment(svg_text: str) -> dict[str, float]:
    m = re.search(r"<!-- axes ([^>]*) -->", svg_text)
    if not m:
        raise ValueError("SVG carries no axes comment")
    out = {}
    for token in m.group(1).split():
        key, _, value = token.partition("=")
        out[key] = float(value)
    return out


def _header(title: str, axes: AxisTransform) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
        f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        axes.comment(),
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="18" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13">{title}</text>',
    ]


def _axes_elements(axes: AxisTransform, xticks) -> list[str]:
    out = []
    x_left, x_right = axes.px(axes.x0), axes.px(axes.x1)
    y_bot, y_top = axes.py(0.0), axes.py(1.0)
    out.append(f'<line x1="{x_left:.3f}" y1="{y_bot:.3f}" x2="{x_right:.3f}" '
               f'y2="{y_bot:.3f}" stroke="black"/>')
    out.append(f'<line x1="{x_left:.3f}" y1="{y_bot:.3f}" x2="{x_left:.3f}" '
               f'y2="{y_top:.3f}" stroke="black"/>')
    for y in (0.0, 0.25, 0.5, 0.75, 1.0):
        py = axes.py(y)
        out.append(f'<line x1="{x_left - 4:.3f}" y1="{py:.3f}" '
                   f'x2="{x_left:.3f}" y2="{py:.3f}" stroke="black"/>')
        out.append(f'<text x="{x_left - 8:.3f}" y="{py + 4:.3f}" '
                   f'text-anchor="end" font-family="sans-serif" '
                   f'font-size="10">{y:g}</text>')
    for x in xticks:
        px = axes.px(x)
        out.append(f'<line x1="{px:.3f}" y1="{y_bot:.3f}" x2="{px:.3f}" '
                   f'y2="{y_bot + 4:.3f}" stroke="black"/>')
        out.append(f'<text x="{px:.3f}" y="{y_bot + 16:.3f}" '
                   f'text-anchor="middle" font-family="sans-serif" '
                   f'font-size="10">{x:g}</text>')
    return out


def _train_range_rect(axes: AxisTransform, training_scales) -> list[str]:
    if not training_scales:
        return []
    lo = max(min(training_scales), axes.x0)
    hi = min(max(training_scales), axes.x1)
    if hi < lo:
        return []
    x = axes.px(lo)
    w = max(axes.px(hi) - x, 0.5)
    return [f'<rect class="train-range" x="{x:.3f}" y="{axes.py(1.0):.3f}" '
            f'width="{w:.3f}" height="{PLOT_H:.3f}" fill="{TRAIN_COLOR}" '
            f'fill-opacity="0.15"/>']


def _xticks(factors) -> list[float]:
    if len(factors) <= 12:
        return list(factors)
    stride = max(1, len(factors) // 10)
    ticks = list(factors[::stride])
    if ticks[-1] != factors[-1]:
        ticks.append(factors[-1])
    return ticks


def bar_chart_svg(result: SweepResult, out_path, title: str) -> None:
    """Paired accuracy/confidence bars per factor, training range shaded."""
    stats = result.per_factor
    if not stats:
        raise ValueError("empty sweep result")
    factors = [s.scale for s in stats]
    span = (factors[-1] - factors[0]) or 1.0
    pitch = span / max(len(factors) - 1, 1)
    axes = AxisTransform(factors[0] - pitch / 2, factors[-1] + pitch / 2)
    bar_w = max(pitch / (span + pitch) * PLOT_W * 0.4, 1.0)

    parts = _header(title, axes)
    parts += _train_range_rect(axes, result.training_scales)
    y0 = axes.py(0.0)
    for s in stats:
        cx = axes.px(s.scale)
        for cls, value, color, off in (("acc", s.accuracy, ACCURACY_COLOR, -bar_w),
                                       ("conf", s.confidence, CONFIDENCE_COLOR, 0.0)):
            top = axes.py(value)
            parts.append(f'<rect class="{cls}" data-scale="{s.scale!r}" '
                         f'x="{cx + off:.3f}" y="{top:.3f}" width="{bar_w:.3f}" '
                         f'height="{max(y0 - top, 0.0):.3f}" fill="{color}" '
                         f'fill-opacity="0.85"/>')
    parts += _axes_elements(axes, _xticks(factors))
    parts.append("</svg>")
    Path(out_path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def band_chart_svg(result: SweepResult, out_path, title: str) -> None:
    """Mean P(rescaled) line with the +-2 std ribbon (display-clamped)."""
    stats = result.per_factor
    if not stats:
        raise ValueError("empty sweep result")
    factors = [s.scale for s in stats]
    axes = AxisTransform(factors[0], factors[-1])

    parts = _header(title, axes)
    parts += _train_range_rect(axes, result.training_scales)
    upper = [(s.scale, min(s.mean_p_rescaled + s.band, 1.0)) for s in stats]
    lower = [(s.scale, max(s.mean_p_rescaled - s.band, 0.0)) for s in stats]
    d = "M " + " L ".join(f"{axes.px(x):.3f} {axes.py(y):.3f}" for x, y in upper)
    d += " L " + " L ".join(f"{axes.px(x):.3f} {axes.py(y):.3f}"
                            for x, y in reversed(lower)) + " Z"
    parts.append(f'<path class="band" d="{d}" fill="{BAND_COLOR}" '
                 f'fill-opacity="0.3" stroke="none"/>')
    pts = " ".join(f"{axes.px(s.scale):.3f},{axes.py(s.mean_p_rescaled):.3f}"
                   for s in stats)
    parts.append(f'<polyline class="mean" points="{pts}" fill="none" '
                 f'stroke="{MEAN_COLOR}" stroke-width="1.5"/>')
    for s in stats:
        parts.append(f'<circle class="pt" data-scale="{s.scale!r}" '
                     f'cx="{axes.px(s.scale):.3f}" '
                     f'cy="{axes.py(s.mean_p_rescaled):.3f}" r="2" '
                     f'fill="{MEAN_COLOR}"/>')
    parts += _axes_elements(axes, _xticks(factors))
    parts.append("</svg>")
    Path(out_path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def emit_plots(results: dict[str, tuple[str, SweepResult]], out_dir) -> list[Path]:
    """One CSV and one SVG per named sweep; kind is 'bar' or 'band'."""
    if not results:
        raise ValueError("no sweep results to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, (kind, result) in results.items():
        if not result.rows:
            raise ValueError(f"sweep {name!r} has no rows")
        csv_path = out_dir / f"{name}.csv"
        svg_path = out_dir / f"{name}.svg"
        write_rows_csv(result.rows, csv_path)
        if kind == "bar":
            bar_chart_svg(result, svg_path, name)
        elif kind == "band":
            band_chart_svg(result, svg_path, name)
        else:
            raise ValueError(f"unknown chart kind {kind!r}")
        written += [csv_path, svg_path]
    return written
