"""Deterministic SVG output for comparison reports."""
from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

PLOT_HEIGHT = 300.0
BAR_WIDTH = 60.0
BAR_GAP = 30.0
MARGIN_LEFT = 60.0
MARGIN_TOP = 40.0
MARGIN_BOTTOM = 50.0


def comparison_svg(rows, title="Subject-level accuracy by architecture") -> str:
    """Bar chart with one bar per row; bar height is accuracy * PLOT_HEIGHT."""
    n = len(rows)
    width = MARGIN_LEFT + n * (BAR_WIDTH + BAR_GAP) + BAR_GAP
    height = MARGIN_TOP + PLOT_HEIGHT + MARGIN_BOTTOM
    base = MARGIN_TOP + PLOT_HEIGHT
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}" '
        f'viewBox="0 0 {width:.0f} {height:.0f}">',
        f'<text x="{width / 2:.2f}" y="20" text-anchor="middle" font-family="sans-serif" '
        f'font-size="14">{escape(title)}</text>',
        f'<line x1="{MARGIN_LEFT:.2f}" y1="{base:.2f}" x2="{width - BAR_GAP / 2:.2f}" y2="{base:.2f}" stroke="black"/>',
        f'<line x1="{MARGIN_LEFT:.2f}" y1="{MARGIN_TOP:.2f}" x2="{MARGIN_LEFT:.2f}" y2="{base:.2f}" stroke="black"/>',
    ]
    for tick in range(0, 101, 25):
        y = base - PLOT_HEIGHT * tick / 100
        out.append(f'<text x="{MARGIN_LEFT - 6:.2f}" y="{y + 4:.2f}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="10">{tick}%</text>')
    for i, row in enumerate(rows):
        acc = float(row["subject_accuracy"])
        h = acc * PLOT_HEIGHT
        x = MARGIN_LEFT + BAR_GAP + i * (BAR_WIDTH + BAR_GAP)
        cx = x + BAR_WIDTH / 2
        name = escape(str(row["architecture"]))
        out.append(f'<rect x="{x:.2f}" y="{base - h:.2f}" width="{BAR_WIDTH:.2f}" height="{h:.2f}" '
                   f'fill="#4a7ab5" data-architecture="{name}"/>')
        out.append(f'<text x="{cx:.2f}" y="{base - h - 5:.2f}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="11">{acc * 100:.2f}%</text>')
        out.append(f'<text x="{cx:.2f}" y="{base + 16:.2f}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="11">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_comparison_figure(report, path) -> Path:
    path = Path(path)
    path.write_text(comparison_svg(report.rows), encoding="utf-8")
    return path
