"""Static SVG charts of aggregated results (mean with 95% CI whiskers)."""
from __future__ import annotations

import math
import re
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
           "#7f7f7f", "#bcbd22", "#17becf")
_SWEEP = re.compile(r"^(.*)\[(\w+)=(.*)\]$")


def _fmt(v):
    if v == 0:
        return "0"
    a = abs(v)
    if a >= 1e4 or a < 1e-3:
        return f"{v:.2e}"
    return f"{v:.4g}"


def _ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    step = 10 ** math.floor(math.log10((hi - lo) / n))
    for m in (1, 2, 5, 10):
        if (hi - lo) / (step * m) <= n:
            step *= m
            break
    t = math.floor(lo / step) * step
    out = []
    while t <= hi + 1e-9 * step:
        out.append(t)
        t += step
    return out


class _Canvas:
    def __init__(self, w, h, title):
        self.w, self.h = w, h
        self.parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
                      f'viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">',
                      f'<rect width="{w}" height="{h}" fill="white"/>',
                      f'<text x="{w / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>']

    def line(self, x1, y1, x2, y2, color="black", width=1.0, dash=None):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
                          f'stroke="{color}" stroke-width="{width}"{d}/>')

    def text(self, x, y, s, anchor="middle", rotate=None, size=None):
        tr = f' transform="rotate({rotate} {x:.2f} {y:.2f})"' if rotate else ""
        fs = f' font-size="{size}"' if size else ""
        self.parts.append(f'<text x="{x:.2f}" y="{y:.2f}" text-anchor="{anchor}"{tr}{fs}>'
                          f'{escape(str(s))}</text>')

    def rect(self, x, y, w, h, color):
        self.parts.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{w:.2f}" height="{h:.2f}" '
                          f'fill="{color}" fill-opacity="0.75"/>')

    def circle(self, x, y, r, color):
        self.parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r}" fill="{color}"/>')

    def polyline(self, pts, color):
        s = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
        self.parts.append(f'<polyline points="{s}" fill="none" stroke="{color}" stroke-width="1.6"/>')

    def svg(self):
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _axes(c, x0, y0, x1, y1, lo, hi, ylabel):
    ticks = _ticks(lo, hi)
    lo, hi = min(lo, ticks[0]), max(hi, ticks[-1])
    sy = lambda v: y1 - (v - lo) / (hi - lo) * (y1 - y0)
    c.line(x0, y0, x0, y1)
    c.line(x0, y1, x1, y1)
    for t in ticks:
        c.line(x0 - 4, sy(t), x0, sy(t))
        c.line(x0, sy(t), x1, sy(t), "#dddddd", 0.6)
        c.text(x0 - 6, sy(t) + 4, _fmt(t), anchor="end")
    c.text(16, (y0 + y1) / 2, ylabel, rotate=-90)
    return sy


def bar_chart(rows, metric, title=None, width=640, height=380) -> str:
    """rows: (method, mean, ci_half or None) for one metric."""
    c = _Canvas(width, height, title or metric)
    x0, y0, x1, y1 = 70, 34, width - 20, height - 90
    vals = [(m, mu, ci or 0.0) for m, mu, ci in rows]
    lo = min(0.0, min(mu - ci for _, mu, ci in vals))
    hi = max(mu + ci for _, mu, ci in vals)
    sy = _axes(c, x0, y0, x1, y1, lo, hi if hi > lo else lo + 1, metric)
    slot = (x1 - x0) / len(vals)
    for i, (m, mu, ci) in enumerate(vals):
        col = PALETTE[i % len(PALETTE)]
        cx = x0 + slot * (i + 0.5)
        bw = slot * 0.6
        c.rect(cx - bw / 2, min(sy(mu), sy(0)), bw, abs(sy(0) - sy(mu)), col)
        if ci > 0:
            c.line(cx, sy(mu - ci), cx, sy(mu + ci), width=1.4)
            c.line(cx - 6, sy(mu - ci), cx + 6, sy(mu - ci), width=1.4)
            c.line(cx - 6, sy(mu + ci), cx + 6, sy(mu + ci), width=1.4)
        c.text(cx, y1 + 14, m, anchor="end", rotate=-35)
    return c.svg()


def line_chart(series, metric, xlabel, title=None, width=640, height=380) -> str:
    """series: {label: [(x, mean, ci_half or None), ...]} with numeric x."""
    c = _Canvas(width, height, title or metric)
    x0, y0, x1, y1 = 70, 34, width - 150, height - 50
    pts = [p for s in series.values() for p in s]
    lo = min(mu - (ci or 0) for _, mu, ci in pts)
    hi = max(mu + (ci or 0) for _, mu, ci in pts)
    if hi <= lo:
        hi = lo + 1.0
    sy = _axes(c, x0, y0, x1, y1, lo, hi, metric)
    xs = sorted({x for x, _, _ in pts})
    xlo, xhi = xs[0], xs[-1] if xs[-1] > xs[0] else xs[0] + 1
    sx = lambda v: x0 + 10 + (v - xlo) / (xhi - xlo) * (x1 - x0 - 20)
    for x in xs:
        c.line(sx(x), y1, sx(x), y1 + 4)
        c.text(sx(x), y1 + 16, _fmt(x))
    c.text((x0 + x1) / 2, height - 12, xlabel)
    for i, (lab, s) in enumerate(series.items()):
        col = PALETTE[i % len(PALETTE)]
        s = sorted(s)
        c.polyline([(sx(x), sy(mu)) for x, mu, _ in s], col)
        for x, mu, ci in s:
            c.circle(sx(x), sy(mu), 2.5, col)
            if ci:
                c.line(sx(x), sy(mu - ci), sx(x), sy(mu + ci), col, 1.2)
        ly = y0 + 14 + 16 * i
        c.line(x1 + 12, ly - 4, x1 + 30, ly - 4, col, 2)
        c.text(x1 + 34, ly, lab, anchor="start")
    return c.svg()


def plot_aggregate(aggregate, metric, title=None) -> str | None:
    """Bar chart, or a line chart when method names carry sweep suffixes 'name[param=value]'."""
    rows = [(m, mu, ci) for m, k, mu, ci in aggregate if k == metric]
    if not rows:
        return None
    series, param = {}, None
    for m, mu, ci in rows:
        hit = _SWEEP.match(m)
        if not hit:
            series = None
            break
        try:
            x = float(hit.group(3))
        except ValueError:
            series = None
            break
        param = hit.group(2)
        series.setdefault(hit.group(1), []).append((x, mu, ci))
    if series:
        return line_chart(series, metric, param, title)
    return bar_chart(rows, metric, title)
