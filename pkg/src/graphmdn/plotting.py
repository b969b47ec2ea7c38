"""Static SVG figures of pose hypotheses.

Each figure holds the 2D input followed by the 3D kernel means seen from a
few azimuths. Azimuth rotates about the vertical image axis; 0 is the
camera view. Every kernel skeleton is drawn with opacity
``0.05 + 0.95 * pi`` so low-weight kernels fade out.
"""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .graph import SkeletonGraph
from .mdn import PoseMixture

AZIMUTHS = (0, 60, 90)
PANEL = 220
MARGIN = 14
KERNEL_COLOR = "#1f5fa8"
TRUTH_COLOR = "#c0392b"
INPUT_COLOR = "#333333"


def kernel_opacity(pi: float) -> float:
    """Mixing coefficient mapped linearly onto [0.05, 1]."""
    return 0.05 + 0.95 * min(max(float(pi), 0.0), 1.0)


def rotate_azimuth(pose, degrees: float) -> np.ndarray:
    """Rotate K x 3 points about the vertical (y) axis and drop depth."""
    p = np.asarray(pose, dtype=np.float64).reshape(-1, 3)
    a = math.radians(degrees)
    x = p[:, 0] * math.cos(a) + p[:, 2] * math.sin(a)
    return np.stack([x, p[:, 1]], axis=1)


def _fmt(v: float) -> str:
    s = f"{v:.3f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


class _Frame:
    """Maps a square data window onto one panel (image y grows downwards)."""

    def __init__(self, origin_x: float, half: float):
        self.ox = origin_x
        self.half = half if half > 0 else 1.0

    def xy(self, pt):
        scale = (PANEL / 2 - MARGIN) / self.half
        return self.ox + PANEL / 2 + pt[0] * scale, PANEL / 2 + MARGIN + pt[1] * scale


def _skeleton_lines(frame, pts, edges, color, opacity, dashed=False) -> list[str]:
    dash = ' stroke-dasharray="4 3"' if dashed else ""
    out = []
    for i, j in edges:
        x1, y1 = frame.xy(pts[i])
        x2, y2 = frame.xy(pts[j])
        out.append(
            f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" y2="{_fmt(y2)}" '
            f'stroke="{color}" stroke-opacity="{_fmt(opacity)}" stroke-width="2"{dash}/>'
        )
    return out


def render_sample(skeleton: SkeletonGraph, input2d, mixture: PoseMixture, truth=None, title: str = "") -> str:
    """SVG text for one sample: input panel plus one panel per azimuth."""
    x2d = np.asarray(input2d, dtype=np.float64).reshape(-1, 2)
    mu = np.asarray(mixture.mu, dtype=np.float64).reshape(mixture.kernels, -1, 3)
    pi = np.asarray(mixture.pi, dtype=np.float64)
    gt = None if truth is None else np.asarray(truth, dtype=np.float64).reshape(-1, 3)
    edges = sorted(skeleton.edges)
    panels = 1 + len(AZIMUTHS)
    width, height = PANEL * panels, PANEL + 2 * MARGIN + 10
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    if title:
        parts.append(f'<text x="{MARGIN}" y="{MARGIN}" font-family="sans-serif" font-size="11">{escape(title)}</text>')

    centred = x2d - x2d.mean(axis=0)
    frame = _Frame(0.0, float(np.abs(centred).max()))
    parts.append(f'<text x="{PANEL // 2}" y="{height - 6}" font-family="sans-serif" font-size="11" text-anchor="middle">input</text>')
    parts += _skeleton_lines(frame, centred, edges, INPUT_COLOR, 1.0)

    clouds = [mu[j] for j in range(mu.shape[0])] + ([gt] if gt is not None else [])
    for n, az in enumerate(AZIMUTHS, start=1):
        views = [rotate_azimuth(c, az) for c in clouds]
        half = max(float(np.abs(v).max()) for v in views)
        frame = _Frame(n * PANEL, half)
        cx = n * PANEL + PANEL // 2
        parts.append(f'<text x="{cx}" y="{height - 6}" font-family="sans-serif" font-size="11" text-anchor="middle">azimuth {az}</text>')
        if gt is not None:
            parts += _skeleton_lines(frame, views[-1], edges, TRUTH_COLOR, 0.8, dashed=True)
        for j in np.argsort(pi, kind="stable"):  # heaviest kernel drawn last
            parts += _skeleton_lines(frame, views[j], edges, KERNEL_COLOR, kernel_opacity(pi[j]))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_sample_svg(path, skeleton, input2d, mixture, truth=None, title=""):
    Path(path).write_text(render_sample(skeleton, input2d, mixture, truth, title))
