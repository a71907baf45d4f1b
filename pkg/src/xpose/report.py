"""CSV tables, SVG sweep plots and PNG feature-map grids."""

import csv
import io
import math

import numpy as np

from .bench import SweepCurve, TransferReport, TransferRow

__all__ = ["emit_csv", "parse_csv", "emit_sweep_csv", "parse_sweep_csv", "emit_svg", "emit_grid"]

_FIXED = ["attack", "white_box", "transform", "dataset", "seed", "n_images"]
_PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#17becf"]


def emit_csv(reports):
    """Wide table: one line per attack, a transformed/baseline pair per black box.

    All reports must cover the same black boxes in the same order.
    """
    black = reports[0].black_boxes if reports else []
    for rep in reports:
        if rep.black_boxes != black:
            raise ValueError("all reports in one table must share the black-box columns")
    header = list(_FIXED)
    for name in black:
        header += [f"{name}:transformed", f"{name}:baseline"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for rep in reports:
        line = [rep.attack, rep.white_box, rep.transform, rep.dataset, rep.seed, rep.n_images]
        for row in rep.rows:
            line += [repr(float(row.transformed_rate)), repr(float(row.baseline_rate))]
        writer.writerow(line)
    return buf.getvalue()


def parse_csv(text):
    """Inverse of :func:`emit_csv` (per-image predictions are not stored)."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header[: len(_FIXED)] != _FIXED:
        raise ValueError("not a transfer-report CSV")
    names = [h.rsplit(":", 1)[0] for h in header[len(_FIXED) :: 2]]
    reports = []
    for line in reader:
        attack, white, transform, dataset, seed, n = line[: len(_FIXED)]
        vals = [float(v) for v in line[len(_FIXED) :]]
        rows = [TransferRow(name, vals[2 * i + 1], vals[2 * i]) for i, name in enumerate(names)]
        reports.append(TransferReport(white, attack, transform, rows, dataset, int(seed), int(n)))
    return reports


def emit_sweep_csv(curves):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["black_box", "angle_deg", "success_rate", "is_argmax"])
    for curve in curves:
        best = curve.argmax
        for angle, rate in curve.points:
            writer.writerow([curve.black_box, repr(float(angle)), repr(float(rate)), int((angle, rate) == best)])
    return buf.getvalue()


def parse_sweep_csv(text):
    reader = csv.DictReader(io.StringIO(text))
    curves = {}
    for rec in reader:
        curves.setdefault(rec["black_box"], []).append((float(rec["angle_deg"]), float(rec["success_rate"])))
    return [SweepCurve(name, pts) for name, pts in curves.items()]


def emit_svg(curves, title="", width=640, height=400):
    """Line plot of success rate against rotation angle, one polyline per curve."""
    left, right, top, bottom = 60, 150, 30, 50
    pw, ph = width - left - right, height - top - bottom

    def px(angle):
        return left + pw * angle / 360.0

    def py(rate):
        return top + ph * (1 - rate / 100.0)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for tick in range(0, 361, 60):
        out.append(f'<text x="{px(tick):.2f}" y="{top + ph + 15}" text-anchor="middle">{tick}</text>')
    for tick in range(0, 101, 20):
        out.append(f'<text x="{left - 6}" y="{py(tick) + 4:.2f}" text-anchor="end">{tick}</text>')
    out.append(
        f'<text x="{left + pw / 2:.2f}" y="{height - 12}" text-anchor="middle">rotation angle (deg)</text>'
    )
    out.append(
        f'<text x="15" y="{top + ph / 2:.2f}" text-anchor="middle" '
        f'transform="rotate(-90 15 {top + ph / 2:.2f})">success rate (%)</text>'
    )
    if title:
        out.append(f'<text x="{left + pw / 2:.2f}" y="18" text-anchor="middle">{_escape(title)}</text>')
    for i, curve in enumerate(curves):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{px(a):.2f},{py(r):.2f}" for a, r in curve.points)
        if len(curve.points) > 1:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        if curve.points:
            a, r = curve.argmax
            out.append(f'<circle cx="{px(a):.2f}" cy="{py(r):.2f}" r="4" fill="red" stroke="{color}"/>')
        ly = top + 14 * i + 10
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 35}" y="{ly + 4}">{_escape(curve.black_box)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(text):
    return str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _tile(maps, lo, hi, scale):
    """Arrange ``(k, h, w)`` maps in a near-square grid of grey tiles."""
    k, h, w = maps.shape
    cols = math.ceil(math.sqrt(k))
    rows = math.ceil(k / cols)
    canvas = np.full((rows * (h + 1) - 1, cols * (w + 1) - 1), 255, dtype=np.uint8)
    span = hi - lo if hi > lo else 1.0
    for i in range(k):
        r, c = divmod(i, cols)
        tile = np.clip((maps[i] - lo) / span, 0, 1)
        canvas[r * (h + 1) : r * (h + 1) + h, c * (w + 1) : c * (w + 1) + w] = np.rint(tile * 255)
    return np.kron(canvas, np.ones((scale, scale), dtype=np.uint8))


def emit_grid(report, scale=4):
    """PNG bytes with five panels: input, rotated input, maps without, maps with, |diff|.

    Panels (3) and (4) share one intensity scale; the difference panel is
    stretched to its own maximum.
    """
    from PIL import Image

    def rgb(img):
        arr = np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8)
        if arr.shape[-1] == 1:
            arr = np.repeat(arr, 3, axis=-1)
        return np.kron(arr, np.ones((scale, scale, 1), dtype=np.uint8))

    def grey(arr):
        return np.repeat(arr[..., None], 3, axis=-1)

    lo = float(min(report.maps_without.min(), report.maps_with.min()))
    hi = float(max(report.maps_without.max(), report.maps_with.max()))
    panels = [
        rgb(report.input_without),
        rgb(report.input_with),
        grey(_tile(report.maps_without, lo, hi, scale)),
        grey(_tile(report.maps_with, lo, hi, scale)),
        grey(_tile(report.abs_diff, 0.0, float(report.abs_diff.max()), scale)),
    ]
    height = max(p.shape[0] for p in panels)
    gap = 2 * scale
    width = sum(p.shape[1] for p in panels) + gap * (len(panels) - 1)
    canvas = np.full((height, width, 3), 255, dtype=np.uint8)
    x = 0
    for p in panels:
        canvas[: p.shape[0], x : x + p.shape[1]] = p
        x += p.shape[1] + gap
    buf = io.BytesIO()
    Image.fromarray(canvas, "RGB").save(buf, format="PNG")
    return buf.getvalue()
