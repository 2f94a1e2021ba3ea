"""Self-contained SVG figures for a fidelity report.

Only the standard library is used, and every number is printed with a fixed
precision, so the output is byte-reproducible.
"""

from __future__ import annotations

import re
from pathlib import Path

from .fidelity import AssociationMatrix, FidelityReport

REAL_COLOR = "#4e79a7"
SYNTH_COLOR = "#e15759"
HATCH_ID = "undefined-hatch"


def _esc(text: str) -> str:
    return (str(text).replace("&", "&amp;").replace("<", "&lt;")
            .replace(">", "&gt;").replace('"', "&quot;"))


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_").lower() or "feature"


def _open(width: int, height: int, title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" role="img" aria-label="{_esc(title)}">',
        f"<title>{_esc(title)}</title>",
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-family="sans-serif" '
        f'font-size="14">{_esc(title)}</text>',
    ]


def _step_path(shares: list[float], x0: float, width: float, y0: float, height: float, top: float) -> str:
    """Outline of a histogram as one path; bins share the x range evenly."""
    n = len(shares)
    step = width / n
    parts = [f"M{x0:.2f},{y0:.2f}"]
    for i, s in enumerate(shares):
        y = y0 - (height * s / top if top > 0 else 0.0)
        parts.append(f"L{x0 + i * step:.2f},{y:.2f}")
        parts.append(f"L{x0 + (i + 1) * step:.2f},{y:.2f}")
    parts.append(f"L{x0 + width:.2f},{y0:.2f}")
    return " ".join(parts)


def histogram_svg(name: str, hist: dict, width: int = 480, height: int = 300) -> str:
    """Real vs synthetic marginal as two overlaid outlines (shares, not counts)."""
    pad_l, pad_r, pad_t, pad_b = 50, 20, 40, 50
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b
    y0 = pad_t + ph

    def shares(counts):
        total = sum(counts)
        return [c / total if total else 0.0 for c in counts]

    real, synth = shares(hist["real"]), shares(hist["synthetic"])
    top = max(real + synth + [0.0]) * 1.1
    lines = _open(width, height, f"{name}: real vs synthetic")
    lines.append(f'<line x1="{pad_l}" y1="{y0}" x2="{pad_l + pw}" y2="{y0}" stroke="#333"/>')
    lines.append(f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{y0}" stroke="#333"/>')
    for label, series, color in (("real", real, REAL_COLOR), ("synthetic", synth, SYNTH_COLOR)):
        d = _step_path(series, pad_l, pw, y0, ph, top)
        lines.append(f'<path class="{label}" d="{d}" fill="none" stroke="{color}" stroke-width="2"/>')
    if hist["kind"] == "numeric":
        edges = hist["edges"]
        scale = " (log)" if hist.get("scale") == "log" else ""
        lines.append(f'<text x="{pad_l}" y="{y0 + 18}" font-family="sans-serif" font-size="10">'
                     f'{edges[0]:.3g}</text>')
        lines.append(f'<text x="{pad_l + pw}" y="{y0 + 18}" text-anchor="end" font-family="sans-serif" '
                     f'font-size="10">{edges[-1]:.3g}{scale}</text>')
    else:
        step = pw / len(hist["levels"])
        for i, lev in enumerate(hist["levels"]):
            lines.append(f'<text x="{pad_l + (i + 0.5) * step:.2f}" y="{y0 + 14}" text-anchor="middle" '
                         f'font-family="sans-serif" font-size="9">{_esc(lev)}</text>')
    lines.append(f'<text x="{pad_l + pw - 120}" y="{pad_t + 12}" font-family="sans-serif" font-size="11" '
                 f'fill="{REAL_COLOR}">real</text>')
    lines.append(f'<text x="{pad_l + pw - 60}" y="{pad_t + 12}" font-family="sans-serif" font-size="11" '
                 f'fill="{SYNTH_COLOR}">synthetic</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def _tile_color(value: float) -> str:
    """White at 0, blue for positive, red for negative."""
    v = max(-1.0, min(1.0, value))
    fade = int(round(255 * (1 - abs(v))))
    return f"rgb({fade},{fade},255)" if v >= 0 else f"rgb(255,{fade},{fade})"


def heatmap_svg(matrix: AssociationMatrix, title: str, cell: int = 60) -> str:
    n = len(matrix.features)
    left, top = 130, 40
    width = left + n * cell + 20
    height = top + n * cell + 110
    lines = _open(width, height, title)
    lines.append("<defs>")
    lines.append(f'<pattern id="{HATCH_ID}" patternUnits="userSpaceOnUse" width="8" height="8" '
                 f'patternTransform="rotate(45)"><rect width="8" height="8" fill="white"/>'
                 f'<line x1="0" y1="0" x2="0" y2="8" stroke="#999" stroke-width="2"/></pattern>')
    lines.append("</defs>")
    for i in range(n):
        y = top + i * cell
        lines.append(f'<text x="{left - 6}" y="{y + cell / 2 + 4:.1f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11">{_esc(matrix.features[i])}</text>')
        for j in range(n):
            x = left + j * cell
            if not matrix.is_defined(i, j):
                lines.append(f'<rect class="undefined" x="{x}" y="{y}" width="{cell}" height="{cell}" '
                             f'fill="url(#{HATCH_ID})" stroke="#ccc"/>')
                continue
            v = matrix.get(i, j)
            lines.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                         f'fill="{_tile_color(v)}" stroke="#ccc"/>')
            lines.append(f'<text x="{x + cell / 2:.1f}" y="{y + cell / 2 + 4:.1f}" text-anchor="middle" '
                         f'font-family="sans-serif" font-size="11">{v:.2f}</text>')
    for j in range(n):
        x = left + j * cell + cell / 2
        y = top + n * cell + 10
        lines.append(f'<text x="{x:.1f}" y="{y}" text-anchor="end" font-family="sans-serif" font-size="11" '
                     f'transform="rotate(-45 {x:.1f} {y})">{_esc(matrix.features[j])}</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def emit_plots(report: FidelityReport, out_dir) -> list[Path]:
    """Write one histogram per feature and the two association heatmaps."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, hist in report.histograms.items():
        path = out / f"hist_{_slug(name)}.svg"
        path.write_text(histogram_svg(name, hist), encoding="utf-8")
        written.append(path)
    label = f"{report.dataset_id} / {report.model_id} / G_max={report.g_max}"
    for tag, matrix in (("real", report.real), ("synthetic", report.synthetic)):
        path = out / f"heatmap_{tag}.svg"
        path.write_text(heatmap_svg(matrix, f"Associations ({tag}) {label}"), encoding="utf-8")
        written.append(path)
    return written
