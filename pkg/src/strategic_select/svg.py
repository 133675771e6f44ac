"""Minimal standalone SVG charts: grouped bars and lines with error bands.

Output is a pure function of the input data; coordinates are printed with
fixed precision so identical data gives identical bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence
from xml.sax.saxutils import escape

__all__ = ["ChartError", "Series", "bar_chart", "line_chart"]

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=150, top=40, bottom=50)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


class ChartError(ValueError):
    """Data cannot be drawn (empty, non-finite, or non-positive on a log axis)."""


@dataclass(frozen=True)
class Series:
    """One named series; ``low``/``high`` give an error bar or band per point."""

    name: str
    x: Sequence[float]
    y: Sequence[float]
    low: Sequence[float] | None = None
    high: Sequence[float] | None = None
    extra: dict = field(default_factory=dict)


def _f(v: float) -> str:
    return f"{v:.2f}"


def _nice_ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = min((s * mag for s in (1, 2, 2.5, 5, 10) if s * mag >= raw), default=10 * mag)
    start = math.floor(lo / step) * step
    ticks = []
    v = start
    while v <= hi + 1e-9 * step:
        ticks.append(round(v, 12))
        v += step
    return ticks


class _Axis:
    def __init__(self, lo: float, hi: float, a: float, b: float, log: bool = False):
        if log:
            if lo <= 0:
                raise ChartError("log axis needs positive values")
            lo, hi = math.log10(lo), math.log10(hi)
        if hi == lo:
            lo, hi = lo - 0.5, hi + 0.5
        self.lo, self.hi, self.a, self.b, self.log = lo, hi, a, b, log

    def __call__(self, v: float) -> float:
        if self.log:
            v = math.log10(v)
        return self.a + (v - self.lo) / (self.hi - self.lo) * (self.b - self.a)

    def ticks(self) -> list[float]:
        if self.log:
            return [10.0 ** k for k in range(math.floor(self.lo), math.ceil(self.hi) + 1)]
        return [t for t in _nice_ticks(self.lo, self.hi) if self.lo - 1e-12 <= t <= self.hi + 1e-12]


def _bounds(values: list[float], pad: float = 0.05) -> tuple[float, float]:
    vals = [v for v in values if math.isfinite(v)]
    if not vals:
        raise ChartError("no finite values to draw")
    lo, hi = min(vals), max(vals)
    span = hi - lo or abs(hi) or 1.0
    return lo - pad * span, hi + pad * span


def _frame(title: str, xlabel: str, ylabel: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<text x="{(MARGIN["left"] + WIDTH - MARGIN["right"]) / 2}" y="{HEIGHT - 10}" '
        f'text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="15" y="{HEIGHT / 2}" text-anchor="middle" '
        f'transform="rotate(-90 15 {HEIGHT / 2})">{escape(ylabel)}</text>',
    ]


def _y_axis(out: list[str], ax: _Axis) -> None:
    x0 = MARGIN["left"]
    x1 = WIDTH - MARGIN["right"]
    out.append(f'<line x1="{x0}" y1="{MARGIN["top"]}" x2="{x0}" y2="{HEIGHT - MARGIN["bottom"]}" stroke="black"/>')
    for t in ax.ticks():
        y = ax(t)
        out.append(f'<line x1="{x0 - 4}" y1="{_f(y)}" x2="{x1}" y2="{_f(y)}" stroke="#ddd"/>')
        out.append(f'<text x="{x0 - 6}" y="{_f(y + 4)}" text-anchor="end">{t:.4g}</text>')


def _legend(out: list[str], names: Sequence[str]) -> None:
    x = WIDTH - MARGIN["right"] + 12
    for k, name in enumerate(names):
        y = MARGIN["top"] + 16 * k
        out.append(f'<rect x="{x}" y="{y}" width="10" height="10" fill="{PALETTE[k % len(PALETTE)]}"/>')
        out.append(f'<text x="{x + 14}" y="{y + 9}">{escape(str(name))}</text>')


def bar_chart(categories: Sequence[str], series: Sequence[Series], *, title: str = "",
              xlabel: str = "", ylabel: str = "") -> str:
    """Grouped bars: one group per category, one bar per series.

    ``Series.y`` holds one value per category; ``low``/``high`` the error-bar
    ends.
    """
    if not categories or not series:
        raise ChartError("bar chart needs at least one category and one series")
    values = []
    for s in series:
        if len(s.y) != len(categories):
            raise ChartError(f"series {s.name!r} has {len(s.y)} values for {len(categories)} categories")
        values += list(s.y) + list(s.low or []) + list(s.high or [])
    lo, hi = _bounds(values, pad=0.1)
    ax = _Axis(lo, hi, HEIGHT - MARGIN["bottom"], MARGIN["top"])
    out = _frame(title, xlabel, ylabel)
    _y_axis(out, ax)
    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    group_w = (x1 - x0) / len(categories)
    bar_w = 0.8 * group_w / len(series)
    base = ax(lo)
    for c, cat in enumerate(categories):
        gx = x0 + c * group_w + 0.1 * group_w
        out.append(f'<text x="{_f(x0 + (c + 0.5) * group_w)}" y="{HEIGHT - MARGIN["bottom"] + 15}" '
                   f'text-anchor="middle">{escape(str(cat))}</text>')
        for k, s in enumerate(series):
            v = float(s.y[c])
            bx = gx + k * bar_w
            top = ax(v)
            out.append(f'<rect x="{_f(bx)}" y="{_f(min(top, base))}" width="{_f(bar_w)}" '
                       f'height="{_f(abs(base - top))}" fill="{PALETTE[k % len(PALETTE)]}"/>')
            if s.low is not None and s.high is not None and math.isfinite(s.low[c]) and math.isfinite(s.high[c]):
                cx = bx + bar_w / 2
                ylo, yhi = ax(float(s.low[c])), ax(float(s.high[c]))
                out.append(f'<line x1="{_f(cx)}" y1="{_f(ylo)}" x2="{_f(cx)}" y2="{_f(yhi)}" stroke="black"/>')
                for yy in (ylo, yhi):
                    out.append(f'<line x1="{_f(cx - 3)}" y1="{_f(yy)}" x2="{_f(cx + 3)}" y2="{_f(yy)}" stroke="black"/>')
    _legend(out, [s.name for s in series])
    out.append("</svg>")
    return "\n".join(out) + "\n"


def line_chart(series: Sequence[Series], *, title: str = "", xlabel: str = "", ylabel: str = "",
               log_y: bool = False) -> str:
    """Lines with markers; ``low``/``high`` are drawn as a shaded band."""
    if not series or not any(len(s.x) for s in series):
        raise ChartError("line chart needs at least one point")
    xs = [float(v) for s in series for v in s.x]
    ys = [float(v) for s in series for v in list(s.y) + list(s.low or []) + list(s.high or [])]
    if log_y:
        ys = [v for v in ys if math.isfinite(v) and v > 0]
        if not ys:
            raise ChartError("log axis needs positive values")
        lo, hi = min(ys) / 1.2, max(ys) * 1.2
    else:
        lo, hi = _bounds(ys)
    xlo, xhi = _bounds(xs, pad=0.03)
    ay = _Axis(lo, hi, HEIGHT - MARGIN["bottom"], MARGIN["top"], log=log_y)
    ax = _Axis(xlo, xhi, MARGIN["left"], WIDTH - MARGIN["right"])
    out = _frame(title, xlabel, ylabel)
    _y_axis(out, ay)
    ybase = HEIGHT - MARGIN["bottom"]
    out.append(f'<line x1="{MARGIN["left"]}" y1="{ybase}" x2="{WIDTH - MARGIN["right"]}" y2="{ybase}" stroke="black"/>')
    for t in sorted(set(xs)):
        out.append(f'<text x="{_f(ax(t))}" y="{ybase + 15}" text-anchor="middle">{t:.4g}</text>')

    def clamp(v: float) -> float:
        return max(v, lo) if log_y else v

    for k, s in enumerate(series):
        colour = PALETTE[k % len(PALETTE)]
        pts = [(ax(float(x)), ay(clamp(float(y)))) for x, y in zip(s.x, s.y) if math.isfinite(float(y))]
        if s.low is not None and s.high is not None:
            band = [(float(x), float(a), float(b)) for x, a, b in zip(s.x, s.low, s.high)
                    if math.isfinite(float(a)) and math.isfinite(float(b))]
            if band:
                upper = " ".join(f"{_f(ax(x))},{_f(ay(clamp(b)))}" for x, _, b in band)
                lower = " ".join(f"{_f(ax(x))},{_f(ay(clamp(a)))}" for x, a, _ in reversed(band))
                out.append(f'<polygon points="{upper} {lower}" fill="{colour}" fill-opacity="0.2" stroke="none"/>')
        if pts:
            out.append(f'<polyline points="{" ".join(f"{_f(px)},{_f(py)}" for px, py in pts)}" '
                       f'fill="none" stroke="{colour}" stroke-width="1.5"/>')
            for px, py in pts:
                out.append(f'<circle cx="{_f(px)}" cy="{_f(py)}" r="2.5" fill="{colour}"/>')
    _legend(out, [s.name for s in series])
    out.append("</svg>")
    return "\n".join(out) + "\n"
