import re

from mcinet import figures
from mcinet.train import ComparisonReport

ROWS = [{"architecture": a, "subject_accuracy": acc, "slice_accuracy": acc, "params": 1, "train_seconds": 0}
        for a, acc in [("alexnet", 0.9683), ("vgg16", 0.9395), ("googlenet", 0.904), ("resnet18", 0.8333)]]


def bars(svg):
    out = {}
    for m in re.finditer(r'<rect x="([\d.]+)" y="([\d.]+)" width="([\d.]+)" height="([\d.]+)"[^>]*'
                         r'data-architecture="(\w+)"', svg):
        out[m.group(5)] = float(m.group(4))
    return out


def test_four_bars():
    svg = figures.comparison_svg(ROWS)
    assert svg.count("<rect") == 4
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")


def test_labels_two_decimals():
    svg = figures.comparison_svg(ROWS)
    for label in ("96.83%", "93.95%", "90.40%", "83.33%"):
        assert f">{label}<" in svg


def test_heights_proportional():
    h = bars(figures.comparison_svg(ROWS))
    scale = h["alexnet"] / 0.9683
    for r in ROWS:
        assert abs(h[r["architecture"]] - r["subject_accuracy"] * scale) <= 0.5


def test_deterministic(tmp_path):
    rep = ComparisonReport(ROWS, {"x": 1}, "f")
    a = figures.emit_comparison_figure(rep, tmp_path / "a.svg").read_bytes()
    b = figures.emit_comparison_figure(rep, tmp_path / "b.svg").read_bytes()
    assert a == b


def test_escapes_names():
    svg = figures.comparison_svg([{"architecture": "a<b", "subject_accuracy": 0.5}])
    assert "a&lt;b" in svg and "a<b" not in svg
