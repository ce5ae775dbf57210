"""Small, dependency-free SVG renderer for the pipeline's figures.

Every figure is drawn from the same plot data that is written to CSV, so
the SVG is never the only record. Output is deterministic: coordinates are
printed at fixed precision and beeswarm jitter comes from per-point seeds.
"""

from __future__ import annotations

import math
from html import escape
from typing import Mapping, Sequence

import numpy as np

KINDS = ("importance-bar", "beeswarm", "pdp-curve", "local-profile", "paired-importance")

WIDTH = 720
MARGIN_LEFT = 230
MARGIN_RIGHT = 40
MARGIN_TOP = 50
ROW_HEIGHT = 22
BLUE, RED, GREY = "#1f77b4", "#d62728", "#888888"


def _f(x: float) -> str:
    return f"{x:.2f}"


def _header(height: int, title: str) -> list[str]:
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" '
        f'viewBox="0 0 {WIDTH} {height}" font-family="Helvetica, Arial, sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{height}" fill="white"/>',
        f'<text x="{WIDTH // 2}" y="24" text-anchor="middle" font-size="15">{escape(title)}</text>',
    ]


def _text(x, y, s, anchor="start", size=None, fill="black") -> str:
    extra = f' font-size="{size}"' if size else ""
    return f'<text x="{_f(x)}" y="{_f(y)}" text-anchor="{anchor}" fill="{fill}"{extra}>{escape(str(s))}</text>'


def _line(x1, y1, x2, y2, stroke="black", width=1.0, dash=None) -> str:
    d = f' stroke-dasharray="{dash}"' if dash else ""
    return (f'<line x1="{_f(x1)}" y1="{_f(y1)}" x2="{_f(x2)}" y2="{_f(y2)}" stroke="{stroke}" '
            f'stroke-width="{width}"{d}/>')


def _no_data(title: str) -> str:
    out = _header(160, title)
    out.append(_text(WIDTH / 2, 95, "no data", "middle", 16, GREY))
    out.append("</svg>")
    return "\n".join(out) + "\n"


class _Scale:
    def __init__(self, lo, hi, a, b):
        if not hi > lo:
            lo, hi = lo - 0.5, hi + 0.5
        self.lo, self.hi, self.a, self.b = lo, hi, a, b

    def __call__(self, v):
        return self.a + (v - self.lo) / (self.hi - self.lo) * (self.b - self.a)

    def ticks(self, n=5):
        return np.linspace(self.lo, self.hi, n)


def _x_axis(scale: _Scale, y: float, label: str) -> list[str]:
    out = [_line(scale.a, y, scale.b, y)]
    for t in scale.ticks():
        x = scale(t)
        out.append(_line(x, y, x, y + 4))
        out.append(_text(x, y + 16, f"{t:.3g}", "middle", 10))
    out.append(_text((scale.a + scale.b) / 2, y + 34, label, "middle"))
    return out


def _require(data: Mapping, keys: Sequence[str], kind: str) -> None:
    missing = [k for k in keys if k not in data]
    if missing:
        raise ValueError(f"plot data for {kind!r} lacks {missing}")


def _importance_bar(data, title):
    names, vals = list(data["features"]), [float(v) for v in data["values"]]
    if len(names) != len(vals):
        raise ValueError("features and values differ in length")
    if not names:
        return _no_data(title)
    height = MARGIN_TOP + ROW_HEIGHT * len(names) + 60
    sx = _Scale(0.0, max(max(vals), 1e-12), MARGIN_LEFT, WIDTH - MARGIN_RIGHT)
    out = _header(height, title)
    for i, (n, v) in enumerate(zip(names, vals)):
        y = MARGIN_TOP + i * ROW_HEIGHT
        out.append(f'<rect class="bar" x="{_f(sx.a)}" y="{_f(y + 3)}" width="{_f(sx(v) - sx.a)}" '
                   f'height="{ROW_HEIGHT - 6}" fill="{BLUE}"/>')
        out.append(_text(MARGIN_LEFT - 6, y + ROW_HEIGHT / 2 + 4, n, "end"))
    out += _x_axis(sx, MARGIN_TOP + ROW_HEIGHT * len(names) + 4, data.get("unit", "mean |SHAP| (log-odds)"))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _colour(c: float) -> str:
    if math.isnan(c):
        return GREY
    r = int(round(31 + (214 - 31) * c))
    g = int(round(119 + (39 - 119) * c))
    b = int(round(180 + (40 - 180) * c))
    return f"#{r:02x}{g:02x}{b:02x}"


def _beeswarm(data, title):
    recs = list(data["records"])
    if not recs:
        return _no_data(title)
    get = (lambda r, k: r[k]) if isinstance(recs[0], Mapping) else getattr
    features = []
    for r in recs:
        if get(r, "feature") not in features:
            features.append(get(r, "feature"))
    shap = np.array([float(get(r, "shap")) for r in recs])
    height = MARGIN_TOP + ROW_HEIGHT * 2 * len(features) + 60
    sx = _Scale(float(shap.min()), float(shap.max()), MARGIN_LEFT, WIDTH - MARGIN_RIGHT)
    out = _header(height, title)
    row_of = {f: i for i, f in enumerate(features)}
    for f, i in row_of.items():
        out.append(_text(MARGIN_LEFT - 6, MARGIN_TOP + (2 * i + 1) * ROW_HEIGHT + 4, f, "end"))
    if sx.lo < 0 < sx.hi:
        out.append(_line(sx(0), MARGIN_TOP, sx(0), height - 56, GREY, 1, "3,3"))
    for r, s in zip(recs, shap):
        cy = MARGIN_TOP + (2 * row_of[get(r, "feature")] + 1) * ROW_HEIGHT
        jitter = np.random.default_rng(int(get(r, "jitter_seed"))).uniform(-0.8, 0.8) * ROW_HEIGHT
        out.append(f'<circle cx="{_f(sx(s))}" cy="{_f(cy + jitter)}" r="2.5" '
                   f'fill="{_colour(float(get(r, "color")))}" fill-opacity="0.7"/>')
    out += _x_axis(sx, height - 56, data.get("unit", "SHAP value (log-odds)"))
    out.append(_text(WIDTH - MARGIN_RIGHT, 40, "colour: feature value low (blue) to high (red)", "end", 10))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _pdp_curve(data, title):
    grid, vals = [float(v) for v in data["grid"]], [float(v) for v in data["values"]]
    if len(grid) != len(vals):
        raise ValueError("grid and values differ in length")
    finite = [(g, v) for g, v in zip(grid, vals) if math.isfinite(v)]
    if not finite:
        return _no_data(title)
    height = 420
    gs, vs = zip(*finite)
    ref = data.get("reference")
    lo, hi = min(vs), max(vs)
    if ref is not None:
        lo, hi = min(lo, ref), max(hi, ref)
    sx = _Scale(min(gs), max(gs), 90, WIDTH - MARGIN_RIGHT)
    sy = _Scale(lo, hi, height - 70, MARGIN_TOP)
    out = _header(height, title)
    out += _x_axis(sx, height - 70, data.get("feature", "feature value"))
    out.append(_line(sx.a, sy.a, sx.a, sy.b))
    for t in sy.ticks():
        out.append(_line(sx.a - 4, sy(t), sx.a, sy(t)))
        out.append(_text(sx.a - 8, sy(t) + 4, f"{t:.3g}", "end", 10))
    out.append(f'<text x="20" y="{_f((sy.a + sy.b) / 2)}" text-anchor="middle" '
               f'transform="rotate(-90 20 {_f((sy.a + sy.b) / 2)})">{escape(data.get("unit", "odds ratio"))}</text>')
    if ref is not None:
        out.append(_line(sx.a, sy(ref), sx.b, sy(ref), GREY, 1, "4,3"))
        out.append(_text(sx.b, sy(ref) - 4, f"reference {ref:.3g}", "end", 10, GREY))
    pts = " ".join(f"{_f(sx(g))},{_f(sy(v))}" for g, v in finite)
    out.append(f'<polyline points="{pts}" fill="none" stroke="{BLUE}" stroke-width="2"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _local_profile(data, title):
    profiles = list(data["profiles"])
    rows = [(p["label"], c) for p in profiles for c in p["contributions"]]
    if not rows:
        return _no_data(title)
    vals = [float(c[1]) for _, c in rows]
    height = MARGIN_TOP + ROW_HEIGHT * (len(rows) + len(profiles)) + 60
    span = max(abs(v) for v in vals) or 1.0
    sx = _Scale(-span, span, MARGIN_LEFT, WIDTH - MARGIN_RIGHT)
    out = _header(height, title)
    y = MARGIN_TOP
    for p in profiles:
        out.append(_text(10, y + 14, f"{p['label']} profile: row {p.get('row_key', '')}, "
                                     f"sum of SHAP = {float(p['total']):+.2f}", "start", 12))
        y += ROW_HEIGHT
        for name, phi, raw in p["contributions"]:
            x0, x1 = sx(0.0), sx(float(phi))
            out.append(f'<rect x="{_f(min(x0, x1))}" y="{_f(y + 3)}" width="{_f(abs(x1 - x0))}" '
                       f'height="{ROW_HEIGHT - 6}" fill="{RED if phi > 0 else BLUE}"/>')
            label = f"{name} = {float(raw):.3g}" if math.isfinite(float(raw)) else f"{name} = missing"
            out.append(_text(MARGIN_LEFT - 6, y + ROW_HEIGHT / 2 + 4, label, "end"))
            y += ROW_HEIGHT
    out.append(_line(sx(0), MARGIN_TOP, sx(0), y, GREY, 1, "3,3"))
    out += _x_axis(sx, y + 4, data.get("unit", "SHAP value (log-odds)"))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _paired_importance(data, title):
    names = list(data["features"])
    a, b = [float(v) for v in data["a"]], [float(v) for v in data["b"]]
    if not len(names) == len(a) == len(b):
        raise ValueError("features, a and b differ in length")
    if not names:
        return _no_data(title)
    la, lb = data.get("labels", ("A", "B"))
    height = MARGIN_TOP + ROW_HEIGHT * len(names) + 70
    sx = _Scale(0.0, max(max(a), max(b), 1e-12), MARGIN_LEFT, WIDTH - MARGIN_RIGHT)
    out = _header(height, title)
    half = (ROW_HEIGHT - 6) / 2
    for i, n in enumerate(names):
        y = MARGIN_TOP + i * ROW_HEIGHT
        out.append(f'<rect x="{_f(sx.a)}" y="{_f(y + 3)}" width="{_f(sx(a[i]) - sx.a)}" height="{_f(half)}" '
                   f'fill="{BLUE}"/>')
        out.append(f'<rect x="{_f(sx.a)}" y="{_f(y + 3 + half)}" width="{_f(sx(b[i]) - sx.a)}" '
                   f'height="{_f(half)}" fill="{RED}"/>')
        out.append(_text(MARGIN_LEFT - 6, y + ROW_HEIGHT / 2 + 4, n, "end"))
    out += _x_axis(sx, MARGIN_TOP + ROW_HEIGHT * len(names) + 4, data.get("unit", "mean |SHAP| (log-odds)"))
    rho = data.get("rho")
    legend = f"{la} (blue) vs {lb} (red)" + (f", Spearman rho = {rho:.4f}" if rho is not None else "")
    out.append(_text(WIDTH - MARGIN_RIGHT, 40, legend, "end", 10))
    out.append("</svg>")
    return "\n".join(out) + "\n"


_RENDERERS = {
    "importance-bar": (("features", "values"), _importance_bar),
    "beeswarm": (("records",), _beeswarm),
    "pdp-curve": (("grid", "values"), _pdp_curve),
    "local-profile": (("profiles",), _local_profile),
    "paired-importance": (("features", "a", "b"), _paired_importance),
}


def render_svg(data: Mapping, kind: str, title: str = "") -> str:
    """Render plot data of the given kind into a self-contained SVG document."""
    if kind not in _RENDERERS:
        raise ValueError(f"unknown plot kind {kind!r}; expected one of {KINDS}")
    keys, fn = _RENDERERS[kind]
    if not isinstance(data, Mapping):
        raise ValueError("plot data must be a mapping")
    _require(data, keys, kind)
    return fn(data, title or kind)
