"""
Plain SVG renderings of ROC curves and similarity histograms. The CSV files
remain the canonical output; these are for a quick look.
"""
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

DEFAULT_WIDTH = 480
DEFAULT_HEIGHT = 360
MARGIN = 48
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def _frame(width, height, title, x_label, y_label) -> list:
    right, bottom = width - MARGIN / 2, height - MARGIN
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<line x1="{MARGIN}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
        f'<line x1="{MARGIN}" y1="{MARGIN / 2}" x2="{MARGIN}" y2="{bottom}" stroke="black"/>',
        f'<text x="{(MARGIN + right) / 2}" y="{height - 12}" text-anchor="middle">{escape(x_label)}</text>',
        f'<text x="14" y="{height / 2}" text-anchor="middle" '
        f'transform="rotate(-90 14 {height / 2})">{escape(y_label)}</text>',
    ]


def _legend(labels: Sequence[str], width) -> list:
    items = []
    for i, label in enumerate(labels):
        y = MARGIN / 2 + 14 * (i + 1)
        color = PALETTE[i % len(PALETTE)]
        items.append(f'<rect x="{width - 150}" y="{y - 8}" width="10" height="10" fill="{color}"/>')
        items.append(f'<text x="{width - 136}" y="{y}">{escape(label)}</text>')
    return items


def _project(xs, ys, x_range, y_range, width, height):
    x0, x1 = x_range
    y0, y1 = y_range
    plot_w = width - MARGIN * 1.5
    plot_h = height - MARGIN * 1.5
    px = MARGIN + (np.asarray(xs) - x0) / (x1 - x0) * plot_w
    py = height - MARGIN - (np.asarray(ys) - y0) / (y1 - y0) * plot_h
    return px, py


def _polyline(px, py, color) -> str:
    points = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(px, py))
    return f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="1.5"/>'


def roc_svg(curves: Mapping[str, tuple], width=DEFAULT_WIDTH, height=DEFAULT_HEIGHT) -> str:
    """curves: label -> (fpr, tpr); the false positive axis is logarithmic."""
    parts = _frame(width, height, "ROC", "false positive rate (log)", "true positive rate")
    floor = 1e-4
    for i, (label, (fpr, tpr)) in enumerate(curves.items()):
        logged = np.log10(np.clip(fpr, floor, 1.0))
        px, py = _project(logged, tpr, (np.log10(floor), 0.0), (0.0, 1.0), width, height)
        parts.append(_polyline(px, py, PALETTE[i % len(PALETTE)]))
    parts.extend(_legend(list(curves), width))
    parts.append("</svg>")
    return "\n".join(parts)


def histogram_svg(histograms: Mapping[str, object], width=DEFAULT_WIDTH, height=DEFAULT_HEIGHT) -> str:
    """histograms: label -> SimilarityHistograms; positive solid, negative dashed."""
    parts = _frame(width, height, "Similarity distributions", "cosine similarity", "mass")
    peak = max(max(h.positive.max(), h.negative.max()) for h in histograms.values()) or 1.0
    labels = []
    for i, (label, hist) in enumerate(histograms.items()):
        color = PALETTE[i % len(PALETTE)]
        centers = (hist.edges[:-1] + hist.edges[1:]) / 2
        for masses, dash in ((hist.positive, ""), (hist.negative, ' stroke-dasharray="4 3"')):
            px, py = _project(centers, masses, (-1.0, 1.0), (0.0, peak), width, height)
            parts.append(_polyline(px, py, color).replace("/>", f"{dash}/>"))
        labels.append(f"{label} (overlap {hist.overlap:.3f})")
    parts.extend(_legend(labels, width))
    parts.append("</svg>")
    return "\n".join(parts)


def write_svg(path, document: str) -> Path:
    path = Path(path)
    path.write_text(document + "\n", encoding="utf-8")
    return path
