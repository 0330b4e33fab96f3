"""SVG charts for benchmark and ablation outputs, rendered from Jinja2 templates."""

import logging
import math
import os
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence

from jinja2 import Environment, FileSystemLoader, select_autoescape

from fnsf.errors import DataIOError

logger = logging.getLogger(__name__)

templates_path = os.path.join(os.path.dirname(__file__), "templates")
templates = Environment(loader=FileSystemLoader(templates_path), autoescape=select_autoescape(["j2"]))

WIDTH, HEIGHT = 640, 380
LEFT, RIGHT, TOP, BOTTOM = 64, 620, 32, 320
PALETTE = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3"]

PHASES = [
    ("pre_ms", "pre-compute"),
    ("query_ms_total", "loss query"),
    ("network_ms_total", "network"),
]


def _nice_ticks(high: float, count: int = 5) -> List[float]:
    if not high > 0:
        return [0.0, 1.0]
    raw = high / count
    step = 10 ** math.floor(math.log10(raw))
    for mult in (1, 2, 5, 10):
        if mult * step >= raw:
            step *= mult
            break
    return [i * step for i in range(int(math.ceil(high / step)) + 1)]


def _fmt(value: float) -> str:
    return f"{value:.3g}"


def _legend(names: Sequence[str], colors: Sequence[str]) -> List[Dict[str, Any]]:
    return [{"name": n, "color": c, "x": LEFT + 110 * i} for i, (n, c) in enumerate(zip(names, colors))]


def bar_chart(summary: Sequence[Mapping[str, Any]], title: str = "Total solve time per method", y_label: str = "ms") -> str:
    """Stacked bars of the per-phase means; the remainder up to total_ms is "other"."""
    names = [label for _, label in PHASES] + ["other"]
    colors = PALETTE[: len(names)]
    stacks = []
    for row in summary:
        parts = [max(0.0, float(row.get(key) or 0.0)) for key, _ in PHASES]
        total = float(row.get("total_ms") or 0.0)
        parts.append(max(0.0, total - sum(parts)))
        stacks.append((str(row["method"]), parts))

    ticks = _nice_ticks(max((sum(p) for _, p in stacks), default=0.0))
    scale = (BOTTOM - TOP) / ticks[-1]
    slot = (RIGHT - LEFT) / max(1, len(stacks))
    bars = []
    for i, (label, parts) in enumerate(stacks):
        y = BOTTOM
        segments = []
        for name, color, value in zip(names, colors, parts):
            h = value * scale
            y -= h
            segments.append({"name": name, "color": color, "value": _fmt(value), "y": y, "height": h})
        bars.append({"label": label, "x": LEFT + i * slot + 0.2 * slot, "width": 0.6 * slot, "segments": segments})

    return templates.get_template("bars.svg.j2").render(
        title=title,
        y_label=y_label,
        width=WIDTH,
        height=HEIGHT,
        left=LEFT,
        right=RIGHT,
        top=TOP,
        bottom=BOTTOM,
        ticks=[{"y": BOTTOM - t * scale, "label": _fmt(t)} for t in ticks],
        bars=bars,
        legend=_legend(names, colors),
    )


def line_chart(
    xs: Sequence[float],
    series: Mapping[str, Sequence[float]],
    title: str,
    x_label: str,
    y_label: str,
    log_x: bool = False,
) -> str:
    """Polyline per series; missing or non-finite values are skipped."""
    def fx(x: float) -> float:
        return math.log10(x) if log_x else x

    px = [fx(x) for x in xs]
    lo, hi = (min(px), max(px)) if px else (0.0, 1.0)
    span = (hi - lo) or 1.0
    values = [v for ys in series.values() for v in ys if v is not None and math.isfinite(v)]
    y_ticks = _nice_ticks(max(values, default=0.0))
    scale = (BOTTOM - TOP) / y_ticks[-1]

    def sx(x: float) -> float:
        return LEFT + (fx(x) - lo) / span * (RIGHT - LEFT)

    colors = PALETTE[: len(series)]
    lines = []
    for (name, ys), color in zip(series.items(), colors):
        markers = [
            {"x": sx(x), "y": BOTTOM - y * scale, "label": f"{_fmt(x)} -> {_fmt(y)}"}
            for x, y in zip(xs, ys)
            if y is not None and math.isfinite(y)
        ]
        lines.append({"name": name, "color": color, "markers": markers, "points": " ".join(f"{m['x']:.1f},{m['y']:.1f}" for m in markers)})

    return templates.get_template("lines.svg.j2").render(
        title=title,
        x_label=x_label,
        y_label=y_label,
        width=WIDTH,
        height=HEIGHT,
        left=LEFT,
        right=RIGHT,
        top=TOP,
        bottom=BOTTOM,
        y_ticks=[{"y": BOTTOM - t * scale, "label": _fmt(t)} for t in y_ticks],
        x_ticks=[{"x": sx(x), "label": _fmt(x)} for x in xs],
        lines=lines,
        legend=_legend(list(series), colors),
    )


def write_svg(svg: str, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(svg, encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc
    logger.info(f"✅ wrote chart {path}")
    return path
