"""CSV and minimal SVG output, written atomically."""

from __future__ import annotations

import os
import tempfile
from html import escape
from pathlib import Path

import numpy as np


def atomic_write(path, data: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def format_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    s = str(v)
    if any(c in s for c in ',"\n'):
        s = '"' + s.replace('"', '""') + '"'
    return s


def csv_text(rows, schema) -> str:
    lines = [",".join(schema)]
    for row in rows:
        missing = set(schema) - set(row)
        if missing:
            raise KeyError(f"row lacks columns {sorted(missing)}")
        lines.append(",".join(format_cell(row[c]) for c in schema))
    return "\n".join(lines) + "\n"


def emit_csv(path, rows, schema) -> Path:
    """Header from ``schema``, floats at 17 significant digits, UTF-8, LF."""
    return atomic_write(path, csv_text(rows, schema))


def line_chart(series: dict, *, title: str = "", xlabel: str = "", ylabel: str = "",
               width: int = 480, height: int = 320, logy: bool = False) -> str:
    """Polyline chart with axes and labels; ``series`` maps name -> (xs, ys)."""
    pad_l, pad_r, pad_t, pad_b = 60, 110, 30, 40
    pts = {k: (np.asarray(x, float), np.asarray(y, float)) for k, (x, y) in series.items()}
    if logy:
        pts = {k: (x, np.log10(np.maximum(y, 1e-300))) for k, (x, y) in pts.items()}
    xs = np.concatenate([x for x, _ in pts.values()]) if pts else np.zeros(1)
    ys = np.concatenate([y for _, y in pts.values()]) if pts else np.zeros(1)
    ys = ys[np.isfinite(ys)] if np.isfinite(ys).any() else np.zeros(1)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def sx(v):
        return pad_l + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return pad_t + ph - (v - y0) / (y1 - y0) * ph

    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad_l}" y1="{pad_t + ph}" x2="{pad_l + pw}" y2="{pad_t + ph}" stroke="black"/>',
        f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{pad_t + ph}" stroke="black"/>',
        f'<text x="{pad_l + pw / 2}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="14" y="{pad_t + ph / 2}" text-anchor="middle" transform="rotate(-90 14 {pad_t + ph / 2})">'
        f'{escape(ylabel + (" (log10)" if logy else ""))}</text>',
        f'<text x="{pad_l + pw / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
    ]
    for v, anchor in ((x0, "start"), (x1, "end")):
        out.append(f'<text x="{sx(v):.2f}" y="{pad_t + ph + 14}" text-anchor="{anchor}">{v:.4g}</text>')
    for v in (y0, y1):
        out.append(f'<text x="{pad_l - 4}" y="{sy(v) + 4:.2f}" text-anchor="end">{v:.4g}</text>')
    for i, (name, (x, y)) in enumerate(pts.items()):
        c = colors[i % len(colors)]
        ok = np.isfinite(y)
        coords = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x[ok], y[ok]))
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{coords}"/>')
        ly = pad_t + 14 * i + 6
        out.append(f'<line x1="{pad_l + pw + 10}" y1="{ly}" x2="{pad_l + pw + 28}" y2="{ly}" stroke="{c}" stroke-width="2"/>')
        out.append(f'<text x="{pad_l + pw + 32}" y="{ly + 4}">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
