"""Minimal deterministic SVG renderings: score heatmaps and 2-D scatters.

Hand-rolled on purpose: report bundles must be byte-identical across runs,
so no plotting library with environment-dependent output is involved.
"""

import numpy as np

# five-stop white -> deep blue ramp; interpolated linearly
_RAMP = ((255, 255, 255), (198, 219, 239), (107, 174, 214),
         (33, 113, 181), (8, 48, 107))

_PALETTE = ("#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e",
            "#e6ab02", "#a6761d", "#666666")

LOG_FLOOR = 1e-4


def _ramp_color(t):
    t = min(max(float(t), 0.0), 1.0)
    pos = t * (len(_RAMP) - 1)
    i = min(int(pos), len(_RAMP) - 2)
    frac = pos - i
    rgb = [round(_RAMP[i][c] + frac * (_RAMP[i + 1][c] - _RAMP[i][c]))
           for c in range(3)]
    return f"rgb({rgb[0]},{rgb[1]},{rgb[2]})"


def log_color_value(score, floor=LOG_FLOOR):
    """Map a [0, 1] score to a log-scaled color position; 0 sits at the floor."""
    score = max(float(score), floor)
    return (np.log10(score) - np.log10(floor)) / (-np.log10(floor))


def heatmap_svg(matrix, row_labels, col_labels, title="", log_scale=True,
                cell=22, label_width=150):
    """Render a weeks x features style heatmap as an SVG string."""
    matrix = np.asarray(matrix, dtype=float)
    rows, cols = matrix.shape
    width = label_width + cols * cell + 20
    height = 40 + rows * cell + label_width
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="monospace" font-size="11">',
        f'<text x="10" y="20" font-size="14">{title}</text>',
    ]
    for r in range(rows):
        y = 40 + r * cell
        parts.append(
            f'<text x="{label_width - 6}" y="{y + cell - 7}" text-anchor="end">'
            f"{row_labels[r]}</text>")
        for c in range(cols):
            v = log_color_value(matrix[r, c]) if log_scale else matrix[r, c]
            parts.append(
                f'<rect x="{label_width + c * cell}" y="{y}" width="{cell - 1}" '
                f'height="{cell - 1}" fill="{_ramp_color(v)}">'
                f"<title>{row_labels[r]} / {col_labels[c]}: "
                f"{matrix[r, c]:.4f}</title></rect>")
    for c in range(cols):
        x = label_width + c * cell + cell // 2
        y = 40 + rows * cell + 8
        parts.append(
            f'<text x="{x}" y="{y}" transform="rotate(65 {x} {y})">'
            f"{col_labels[c]}</text>")
    parts.append("</svg>")
    return "\n".join(parts)


def scatter_svg(points, title="", size=420):
    """Render labelled 2-D points; ``points`` is (x, y, marker_label, color_group)."""
    xs = np.array([p[0] for p in points], dtype=float)
    ys = np.array([p[1] for p in points], dtype=float)
    pad_x = (xs.max() - xs.min()) * 0.15 + 1e-9
    pad_y = (ys.max() - ys.min()) * 0.15 + 1e-9
    x0, x1 = xs.min() - pad_x, xs.max() + pad_x
    y0, y1 = ys.min() - pad_y, ys.max() + pad_y
    groups = []
    for p in points:
        if p[3] not in groups:
            groups.append(p[3])
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 160}" '
        f'height="{size + 40}" font-family="monospace" font-size="11">',
        f'<text x="10" y="20" font-size="14">{title}</text>',
        f'<rect x="10" y="30" width="{size}" height="{size}" fill="none" '
        f'stroke="#999"/>',
    ]
    for x, y, label, group in points:
        px = 10 + (x - x0) / (x1 - x0) * size
        py = 30 + (1 - (y - y0) / (y1 - y0)) * size
        color = _PALETTE[groups.index(group) % len(_PALETTE)]
        parts.append(f'<circle cx="{px:.1f}" cy="{py:.1f}" r="5" fill="{color}">'
                     f"<title>{group} / {label}</title></circle>")
        parts.append(f'<text x="{px + 7:.1f}" y="{py + 4:.1f}">{label}</text>')
    for i, group in enumerate(groups):
        gy = 40 + i * 18
        color = _PALETTE[i % len(_PALETTE)]
        parts.append(f'<circle cx="{size + 30}" cy="{gy}" r="5" fill="{color}"/>')
        parts.append(f'<text x="{size + 40}" y="{gy + 4}">{group}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
