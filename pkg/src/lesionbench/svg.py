"""Minimal deterministic SVG writer.

Coordinates are formatted to two decimals and attributes are emitted in a
fixed order, so identical inputs give byte-identical files. Source data is
embedded as JSON inside ``<metadata>``.
"""

from __future__ import annotations

import json
from xml.sax.saxutils import escape, quoteattr

FONT = "DejaVu Sans, Arial, sans-serif"


def _num(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


class SvgDoc:
    def __init__(self, width: float, height: float, title: str = ""):
        self.width = width
        self.height = height
        self.title = title
        self.parts: list[str] = []
        self.metadata: dict | None = None

    def _attrs(self, attrs: dict) -> str:
        out = []
        for k, v in attrs.items():
            if v is None:
                continue
            if isinstance(v, float):
                v = _num(v)
            out.append(f"{k.replace('_', '-')}={quoteattr(str(v))}")
        return " ".join(out)

    def line(self, x1: float, y1: float, x2: float, y2: float, stroke: str = "#000", width: float = 1.0, **kw) -> None:
        a = {"x1": float(x1), "y1": float(y1), "x2": float(x2), "y2": float(y2), "stroke": stroke, "stroke_width": float(width)}
        a.update(kw)
        self.parts.append(f"<line {self._attrs(a)}/>")

    def polyline(self, points: list[tuple[float, float]], stroke: str = "#000", width: float = 1.0) -> None:
        pts = " ".join(f"{_num(x)},{_num(y)}" for x, y in points)
        self.parts.append(f"<polyline {self._attrs({'points': pts, 'fill': 'none', 'stroke': stroke, 'stroke_width': float(width)})}/>")

    def circle(self, cx: float, cy: float, r: float, fill: str, **kw) -> None:
        a = {"cx": float(cx), "cy": float(cy), "r": float(r), "fill": fill}
        a.update(kw)
        self.parts.append(f"<circle {self._attrs(a)}/>")

    def text(self, x: float, y: float, s: str, size: float = 12.0, anchor: str = "start", **kw) -> None:
        a = {"x": float(x), "y": float(y), "font_family": FONT, "font_size": float(size), "text_anchor": anchor}
        a.update(kw)
        self.parts.append(f"<text {self._attrs(a)}>{escape(s)}</text>")

    def render(self) -> str:
        head = (
            '<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{_num(self.width)}" height="{_num(self.height)}" '
            f'viewBox="0 0 {_num(self.width)} {_num(self.height)}">\n'
        )
        body = []
        if self.title:
            body.append(f"<title>{escape(self.title)}</title>")
        if self.metadata is not None:
            body.append("<metadata>" + escape(json.dumps(self.metadata, sort_keys=True)) + "</metadata>")
        body.append(f'<rect x="0" y="0" width="{_num(self.width)}" height="{_num(self.height)}" fill="#ffffff"/>')
        body.extend(self.parts)
        return head + "\n".join(body) + "\n</svg>\n"
