"""Tiny deterministic SVG plotter.

Hand-rolled on purpose: the output must be byte-identical across runs, so all
coordinates are formatted with fixed precision and nothing depends on fonts,
clocks or library versions. Supports the three plot kinds the harness needs:
line series with optional error bars, scatter, and 2-D path overlays.
"""
from __future__ import annotations

import math

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")

_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 58, 16, 30, 42


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def _nice_ticks(lo: float, hi: float, target: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / target
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        if raw <= mult * mag:
            step = mult * mag
            break
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-12:
        ticks.append(round(t, 12))
        t += step
    return ticks


class Figure:
    def __init__(self, width: int = 640, height: int = 420, title: str = "",
                 xlabel: str = "", ylabel: str = ""):
        self.width, self.height = width, height
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.series: list[dict] = []
        self._xr: tuple[float, float] | None = None
        self._yr: tuple[float, float] | None = None

    def add_line(self, label: str, xs, ys, yerr=None, markers: bool = True) -> None:
        self.series.append({"kind": "line", "label": label, "xs": list(xs),
                            "ys": list(ys), "yerr": None if yerr is None else list(yerr),
                            "markers": markers})

    def add_scatter(self, label: str, xs, ys, radius: float = 2.0) -> None:
        self.series.append({"kind": "scatter", "label": label, "xs": list(xs),
                            "ys": list(ys), "r": radius})

    def set_limits(self, xr=None, yr=None) -> None:
        self._xr, self._yr = xr, yr

    # -- rendering ----------------------------------------------------------

    def _ranges(self):
        xs = [x for s in self.series for x in s["xs"]]
        ys = [y for s in self.series for y in s["ys"]]
        for s in self.series:
            if s.get("yerr"):
                ys.extend(y + e for y, e in zip(s["ys"], s["yerr"]))
                ys.extend(y - e for y, e in zip(s["ys"], s["yerr"]))
        if not xs:
            xs, ys = [0.0, 1.0], [0.0, 1.0]
        xr = self._xr or (min(xs), max(xs))
        yr = self._yr or (min(ys), max(ys))
        if xr[0] == xr[1]:
            xr = (xr[0] - 0.5, xr[1] + 0.5)
        if yr[0] == yr[1]:
            yr = (yr[0] - 0.5, yr[1] + 0.5)
        pad_x = 0.04 * (xr[1] - xr[0])
        pad_y = 0.06 * (yr[1] - yr[0])
        return (xr[0] - pad_x, xr[1] + pad_x), (yr[0] - pad_y, yr[1] + pad_y)

    def render(self) -> str:
        xr, yr = self._ranges()
        px0, px1 = _MARGIN_L, self.width - _MARGIN_R
        py0, py1 = self.height - _MARGIN_B, _MARGIN_T

        def sx(x):
            return px0 + (x - xr[0]) / (xr[1] - xr[0]) * (px1 - px0)

        def sy(y):
            return py0 + (y - yr[0]) / (yr[1] - yr[0]) * (py1 - py0)

        out = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" '
            f'height="{self.height}" viewBox="0 0 {self.width} {self.height}">',
            f'<rect width="{self.width}" height="{self.height}" fill="white"/>',
            f'<text x="{self.width // 2}" y="18" text-anchor="middle" '
            f'font-family="sans-serif" font-size="13">{self.title}</text>',
        ]
        for tx in _nice_ticks(*xr):
            if xr[0] <= tx <= xr[1]:
                out.append(f'<line x1="{_fmt(sx(tx))}" y1="{py0}" x2="{_fmt(sx(tx))}" '
                           f'y2="{py0 + 4}" stroke="black"/>')
                out.append(f'<text x="{_fmt(sx(tx))}" y="{py0 + 16}" text-anchor="middle" '
                           f'font-family="sans-serif" font-size="10">{tx:g}</text>')
        for ty in _nice_ticks(*yr):
            if yr[0] <= ty <= yr[1]:
                out.append(f'<line x1="{px0 - 4}" y1="{_fmt(sy(ty))}" x2="{px0}" '
                           f'y2="{_fmt(sy(ty))}" stroke="black"/>')
                out.append(f'<text x="{px0 - 7}" y="{_fmt(sy(ty) + 3)}" text-anchor="end" '
                           f'font-family="sans-serif" font-size="10">{ty:g}</text>')
        out.append(f'<rect x="{px0}" y="{py1}" width="{px1 - px0}" height="{py0 - py1}" '
                   f'fill="none" stroke="black"/>')
        out.append(f'<text x="{(px0 + px1) // 2}" y="{self.height - 8}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="11">{self.xlabel}</text>')
        out.append(f'<text x="14" y="{(py0 + py1) // 2}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="11" '
                   f'transform="rotate(-90 14 {(py0 + py1) // 2})">{self.ylabel}</text>')

        for i, s in enumerate(self.series):
            color = PALETTE[i % len(PALETTE)]
            if s["kind"] == "line":
                pts = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(s["xs"], s["ys"]))
                out.append(f'<polyline class="series" fill="none" stroke="{color}" '
                           f'stroke-width="1.5" points="{pts}"/>')
                if s.get("yerr"):
                    for x, y, e in zip(s["xs"], s["ys"], s["yerr"]):
                        out.append(f'<line x1="{_fmt(sx(x))}" y1="{_fmt(sy(y - e))}" '
                                   f'x2="{_fmt(sx(x))}" y2="{_fmt(sy(y + e))}" '
                                   f'stroke="{color}" stroke-width="1"/>')
                if s.get("markers"):
                    for x, y in zip(s["xs"], s["ys"]):
                        out.append(f'<circle cx="{_fmt(sx(x))}" cy="{_fmt(sy(y))}" r="2.5" '
                                   f'fill="{color}"/>')
            else:
                for x, y in zip(s["xs"], s["ys"]):
                    out.append(f'<circle class="pt" cx="{_fmt(sx(x))}" cy="{_fmt(sy(y))}" '
                               f'r="{s["r"]}" fill="{color}" fill-opacity="0.6"/>')
            ly = _MARGIN_T + 14 * i + 4
            out.append(f'<line x1="{px1 - 96}" y1="{ly}" x2="{px1 - 80}" y2="{ly}" '
                       f'stroke="{color}" stroke-width="2"/>')
            out.append(f'<text x="{px1 - 76}" y="{ly + 3}" font-family="sans-serif" '
                       f'font-size="10">{s["label"]}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.render())
