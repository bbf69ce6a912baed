"""Native SVG polyline charts. The CSV artifacts are the contract; these
renderings exist so results can be eyeballed without extra tooling."""

from __future__ import annotations

WIDTH, HEIGHT = 640, 420
MARGIN = 56
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#8c564b", "#17becf", "#7f7f7f")


def _scale(values, lo, hi, out_lo, out_hi):
    span = hi - lo if hi > lo else 1.0
    return [out_lo + (v - lo) / span * (out_hi - out_lo) for v in values]


def polyline_chart(series, title="", x_label="", y_label="",
                   x_range=None, y_range=None, shaded=None):
    """series: list of (label, xs, ys). shaded: list of (x0, x1) bands.
    Returns the SVG document as a string with one <polyline> per series."""
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    x_lo, x_hi = x_range if x_range else (min(xs_all), max(xs_all))
    y_lo, y_hi = y_range if y_range else (min(ys_all), max(ys_all))
    if y_lo == y_hi:
        y_lo, y_hi = y_lo - 1.0, y_hi + 1.0
    left, right = MARGIN, WIDTH - MARGIN
    top, bottom = MARGIN, HEIGHT - MARGIN

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
        f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="24" text-anchor="middle" '
        f'font-size="16">{title}</text>',
    ]
    if shaded:
        for x0, x1 in shaded:
            px = _scale([x0, x1], x_lo, x_hi, left, right)
            parts.append(
                f'<rect x="{px[0]:.2f}" y="{top}" '
                f'width="{px[1] - px[0]:.2f}" height="{bottom - top}" '
                f'fill="#fdd" stroke="none"/>'
            )
    # axes
    parts.append(
        f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" '
        f'stroke="black"/>'
    )
    parts.append(
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" '
        f'stroke="black"/>'
    )
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        x_val = x_lo + frac * (x_hi - x_lo)
        y_val = y_lo + frac * (y_hi - y_lo)
        px = left + frac * (right - left)
        py = bottom - frac * (bottom - top)
        parts.append(
            f'<text x="{px:.1f}" y="{bottom + 18}" text-anchor="middle" '
            f'font-size="11">{x_val:.3g}</text>'
        )
        parts.append(
            f'<text x="{left - 6}" y="{py + 4:.1f}" text-anchor="end" '
            f'font-size="11">{y_val:.3g}</text>'
        )
    parts.append(
        f'<text x="{(left + right) / 2}" y="{HEIGHT - 10}" '
        f'text-anchor="middle" font-size="13">{x_label}</text>'
    )
    parts.append(
        f'<text x="16" y="{(top + bottom) / 2}" text-anchor="middle" '
        f'font-size="13" transform="rotate(-90 16 {(top + bottom) / 2})">'
        f"{y_label}</text>"
    )
    for i, (label, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        px = _scale(xs, x_lo, x_hi, left, right)
        py = _scale(ys, y_lo, y_hi, bottom, top)
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(px, py))
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
            f'points="{pts}"/>'
        )
        ly = top + 16 * i
        parts.append(
            f'<line x1="{right - 120}" y1="{ly}" x2="{right - 100}" '
            f'y2="{ly}" stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{right - 94}" y="{ly + 4}" font-size="11">'
            f"{label}</text>"
        )
    parts.append("</svg>")
    return "\n".join(parts)
