"""CSV and SVG emission for envelopes, burst overlays, and harf curves.

SVG output is hand-rolled line plotting (no figure library) so files are
deterministic text: same data, same bytes.
"""

from __future__ import annotations

from pathlib import Path

from .artifacts import CSV_HEADER
from .segmentation import Burst
from .signal import Envelope

SVG_WIDTH = 640
SVG_HEIGHT = 240
SVG_MARGIN = 10


def write_csv(path, header_cols: list[str], rows) -> None:
    lines = [CSV_HEADER, ",".join(header_cols)]
    for row in rows:
        lines.append(",".join(
            v if isinstance(v, str) else repr(float(v)) for v in row
        ))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _scale(points, width, height, margin):
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def to_px(x, y):
        px = margin + (x - x_lo) / x_span * (width - 2 * margin)
        py = height - margin - (y - y_lo) / y_span * (height - 2 * margin)
        return px, py

    return to_px


def _polyline(points, to_px, color):
    coords = " ".join(f"{to_px(x, y)[0]:.2f},{to_px(x, y)[1]:.2f}"
                      for x, y in points)
    return (f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
            f'points="{coords}"/>')


def _svg_document(body: list[str]) -> str:
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" '
        f'height="{SVG_HEIGHT}" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}">',
        f'<rect width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="white"/>',
        *body,
        "</svg>",
    ]) + "\n"


def write_envelope_svg(path, env: Envelope, bursts: list[Burst]) -> None:
    """Envelope trace with translucent rectangles over detected bursts."""
    points = [(i * env.hop_s, float(v)) for i, v in enumerate(env.values)]
    if len(points) < 2:
        points = points + points  # degenerate single-frame envelope
    to_px = _scale(points, SVG_WIDTH, SVG_HEIGHT, SVG_MARGIN)
    body = []
    for b in bursts:
        x0, _ = to_px(b.onset_s, 0.0)
        x1, _ = to_px(b.offset_s, 0.0)
        body.append(
            f'<rect x="{x0:.2f}" y="{SVG_MARGIN}" width="{x1 - x0:.2f}" '
            f'height="{SVG_HEIGHT - 2 * SVG_MARGIN}" fill="orange" '
            f'opacity="0.25"/>'
        )
    body.append(_polyline(points, to_px, "steelblue"))
    floor_pts = [(points[0][0], env.noise_floor), (points[-1][0], env.noise_floor)]
    body.append(_polyline(floor_pts, to_px, "gray"))
    Path(path).write_text(_svg_document(body), encoding="utf-8")


def write_curve_svg(path, points: list[tuple[float, float]]) -> None:
    """Single-curve line plot (harf parabola samples)."""
    if len(points) < 2:
        points = points + points
    to_px = _scale(points, SVG_WIDTH, SVG_HEIGHT, SVG_MARGIN)
    Path(path).write_text(
        _svg_document([_polyline(points, to_px, "darkred")]), encoding="utf-8"
    )
