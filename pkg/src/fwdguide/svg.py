"""Minimal SVG scatter plot: reference points, generated samples and the target circle."""

from __future__ import annotations

import math

import numpy as np

SIZE = 600
LIMIT = 1.5

REFERENCE_COLOR = "#1f77b4"
SAMPLE_COLOR = "#ff7f0e"
TARGET_COLOR = "#d62728"


def _px(v: float, flip: bool) -> str:
    frac = (v + LIMIT) / (2 * LIMIT)
    return f"{(1.0 - frac if flip else frac) * SIZE:.2f}"


def scatter_svg(reference: np.ndarray, samples: np.ndarray, radius: float | None = None, title: str = "") -> str:
    """Render points in data coordinates [−1.5, 1.5]² onto a 600×600 canvas.

    Sample markers carry ``class="sample"`` (one per row of ``samples``, even
    when outside the visible range) so they can be counted.
    """
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {SIZE} {SIZE}" width="{SIZE}" height="{SIZE}">',
        f'<rect width="{SIZE}" height="{SIZE}" fill="white"/>',
        f'<line x1="0" y1="{SIZE / 2:.2f}" x2="{SIZE}" y2="{SIZE / 2:.2f}" stroke="#cccccc"/>',
        f'<line x1="{SIZE / 2:.2f}" y1="0" x2="{SIZE / 2:.2f}" y2="{SIZE}" stroke="#cccccc"/>',
    ]
    if title:
        out.append(f'<text x="10" y="20" font-family="sans-serif" font-size="14">{_escape(title)}</text>')
    out.append(f'<g fill="{REFERENCE_COLOR}" fill-opacity="0.35">')
    for x, y in np.asarray(reference, float):
        out.append(f'<circle class="reference" cx="{_px(x, False)}" cy="{_px(y, True)}" r="1.5"/>')
    out.append("</g>")
    out.append(f'<g fill="{SAMPLE_COLOR}">')
    for x, y in np.asarray(samples, float):
        out.append(f'<circle class="sample" cx="{_px(x, False)}" cy="{_px(y, True)}" r="3"/>')
    out.append("</g>")
    if radius is not None and math.isfinite(radius) and radius > 0:
        r_px = radius / (2 * LIMIT) * SIZE
        out.append(
            f'<circle class="target" cx="{SIZE / 2:.2f}" cy="{SIZE / 2:.2f}" r="{r_px:.2f}" '
            f'fill="none" stroke="{TARGET_COLOR}" stroke-width="2"/>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
