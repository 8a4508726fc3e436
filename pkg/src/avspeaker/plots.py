"""Minimal deterministic SVG charts for experiment tables."""

from __future__ import annotations

from xml.sax.saxutils import escape

PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c")


def _fmt(x):
    return f"{x:.2f}".rstrip("0").rstrip(".")


def bar_chart(groups, series, title="", ylabel="EER", width=720, height=360):
    """Grouped bars. ``groups`` labels the x axis; ``series`` maps a legend
    label to one value per group (``None`` leaves a gap)."""
    names = list(series)
    values = [v for s in series.values() for v in s if v is not None]
    top = max(values + [1e-9])
    top = max(0.05, top * 1.1)
    ml, mr, mt, mb = 60, 160, 40, 60
    pw, ph = width - ml - mr, height - mt - mb
    gw = pw / max(1, len(groups))
    bw = gw * 0.8 / max(1, len(names))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]
    for i in range(6):
        v = top * i / 5
        y = mt + ph - ph * v / top
        out.append(f'<line x1="{ml}" y1="{y:.1f}" x2="{ml + pw}" y2="{y:.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{ml - 6}" y="{y + 4:.1f}" text-anchor="end">{_fmt(v)}</text>')
    out.append(f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>')
    out.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>')
    out.append(f'<text x="16" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {mt + ph / 2:.1f})">{escape(ylabel)}</text>')

    for g, label in enumerate(groups):
        x0 = ml + g * gw + gw * 0.1
        for s, name in enumerate(names):
            v = series[name][g]
            if v is None:
                continue
            h = ph * v / top
            out.append(f'<rect x="{x0 + s * bw:.1f}" y="{mt + ph - h:.1f}" width="{bw * 0.95:.1f}" '
                       f'height="{h:.1f}" fill="{PALETTE[s % len(PALETTE)]}"><title>{escape(name)}: '
                       f'{v:.4f}</title></rect>')
        out.append(f'<text x="{ml + (g + 0.5) * gw:.1f}" y="{mt + ph + 16}" text-anchor="middle">'
                   f'{escape(str(label))}</text>')

    for s, name in enumerate(names):
        y = mt + 10 + 18 * s
        out.append(f'<rect x="{ml + pw + 16}" y="{y - 9}" width="12" height="12" '
                   f'fill="{PALETTE[s % len(PALETTE)]}"/>')
        out.append(f'<text x="{ml + pw + 34}" y="{y + 1}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def experiment_chart(result):
    """Bar chart for an :class:`~avspeaker.experiments.ExperimentResult`:
    metrics on the x axis, one series per cell."""
    groups = result.metrics
    series = {}
    for cell in result.cells:
        name = ", ".join(f"{k}={v}" for k, v in cell["factors"].items())
        series[name] = [cell["median"][m] for m in groups]
    return bar_chart(groups, series, title=f"{result.design} (seed median)")
