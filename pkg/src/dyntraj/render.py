"""Static outputs: trajectory SVG/HTML, metric figures, and exports.

SVG and HTML are assembled as strings so that identical inputs give
byte-identical files. Data coordinates map to the canvas with one uniform
scale (aspect preserved, letterboxed) and a 5% margin.
"""

from __future__ import annotations

import html
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analytics import MetricReport
from .errors import ValidationError
from .trajectory import TrajectorySet

PALETTE = (
    "#1F77B4", "#FF7F0E", "#2CA02C", "#D62728", "#9467BD", "#8C564B",
    "#E377C2", "#7F7F7F", "#BCBD22", "#17BECF", "#393B79", "#AD494A",
)  # fmt: skip
MAX_POINTS = 1_000_000
_HEX = re.compile(r"^#[0-9A-Fa-f]{6}$")


@dataclass
class PlotSpec:
    width: int = 800
    height: int = 600
    highlight: list[str] = field(default_factory=list)
    colors: dict[str, str] = field(default_factory=dict)
    background_color: str = "#B0B0B0"
    background_opacity: float = 0.4
    anchor_radius: float = 3.0
    show_timestamps: bool = False
    stride: int = 1

    def validate(self) -> None:
        if self.width < 100 or self.height < 100:
            raise ValidationError("canvas width and height must be >= 100")
        if self.stride < 1:
            raise ValidationError("stride must be >= 1")
        for c in [self.background_color, *self.colors.values()]:
            if not _HEX.match(c):
                raise ValidationError(f"invalid colour {c!r}; expected #RRGGBB")

    def color_of(self, label: str, idx: int) -> str:
        return self.colors.get(label, PALETTE[idx % len(PALETTE)])


@dataclass(frozen=True)
class CanvasTransform:
    """Uniform data-to-canvas map; the y axis is flipped."""

    scale: float
    cx: float
    cy: float
    width: float
    height: float

    @classmethod
    def fit(cls, xs, ys, width: float, height: float, margin: float = 0.05) -> "CanvasTransform":
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        x0, x1, y0, y1 = xs.min(), xs.max(), ys.min(), ys.max()
        spans = [s for s in (x1 - x0, y1 - y0)]
        avail_w, avail_h = width * (1 - 2 * margin), height * (1 - 2 * margin)
        scales = [a / s for a, s in zip((avail_w, avail_h), spans) if s > 0]
        # all points coincide: fall back to a unit box around them
        scale = min(scales) if scales else min(avail_w, avail_h)
        return cls(float(scale), float((x0 + x1) / 2), float((y0 + y1) / 2), float(width), float(height))

    def __call__(self, x, y):
        return (
            self.width / 2 + self.scale * (x - self.cx),
            self.height / 2 - self.scale * (y - self.cy),
        )


def _fmt(v: float) -> str:
    s = f"{v:.3f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def _decimate(points, stride):
    if stride == 1 or len(points) <= 2:
        return points
    kept = points[::stride]
    if kept[-1] is not points[-1]:
        kept = kept + [points[-1]]
    return kept


def _resolve_highlight(traj: TrajectorySet, spec: PlotSpec) -> list[int]:
    index = {lab: i for i, lab in enumerate(traj.labels)}
    out = []
    for lab in spec.highlight:
        if lab not in index or not traj.points(index[lab]):
            raise ValidationError(f"unknown highlighted label {lab!r}")
        out.append(index[lab])
    return out


def _svg_body(traj: TrajectorySet, spec: PlotSpec, upto: int | None, xmlns: bool, title: str | None) -> str:
    highlight = _resolve_highlight(traj, spec)
    series = {n: _decimate(traj.points(n), spec.stride) for n in highlight}
    if upto is not None:
        series = {n: [p for p in pts if p[0] <= upto] for n, pts in series.items()}
    xs = [z[0] for z in traj.anchor_Z] + [p[1] for pts in series.values() for p in pts]
    ys = [z[1] for z in traj.anchor_Z] + [p[2] for pts in series.values() for p in pts]
    if not xs:
        # nothing highlighted and no anchors: frame every position
        xs = [x for x, _ in traj.positions.values()]
        ys = [y for _, y in traj.positions.values()]
    tf = CanvasTransform.fit(xs, ys, spec.width, spec.height)

    W, H = spec.width, spec.height
    ns = ' xmlns="http://www.w3.org/2000/svg"' if xmlns else ""
    out = [f'<svg{ns} version="1.1" width="{W}" height="{H}" viewBox="0 0 {W} {H}">']
    if title:
        out.append(f"<title>{html.escape(title)}</title>")
    out.append("<defs>")
    for i, n in enumerate(highlight):
        col = spec.color_of(traj.labels[n], i)
        out.append(
            f'<marker id="arrow{i}" viewBox="0 0 10 10" refX="9" refY="5" markerWidth="6" markerHeight="6" '
            f'orient="auto"><path d="M0,0 L10,5 L0,10 z" fill="{col}"/></marker>'
        )
    out.append("</defs>")
    out.append(f'<rect x="0" y="0" width="{W}" height="{H}" fill="#FFFFFF"/>')
    out.append(f'<g id="anchors" fill="{spec.background_color}" fill-opacity="{spec.background_opacity}">')
    for x, y in traj.anchor_Z:
        px, py = tf(x, y)
        out.append(f'<circle cx="{_fmt(px)}" cy="{_fmt(py)}" r="{_fmt(spec.anchor_radius)}"/>')
    out.append("</g>")
    out.append('<g id="trajectories" fill="none" stroke-width="2">')
    for i, n in enumerate(highlight):
        pts = series[n]
        if not pts:
            continue
        col = spec.color_of(traj.labels[n], i)
        canvas = [tf(x, y) for _, x, y in pts]
        coords = " ".join(f"{_fmt(px)},{_fmt(py)}" for px, py in canvas)
        label = html.escape(traj.labels[n])
        out.append(
            f'<polyline points="{coords}" stroke="{col}" marker-mid="url(#arrow{i})" '
            f'marker-end="url(#arrow{i})"><title>{label}</title></polyline>'
        )
        lx, ly = canvas[-1]
        out.append(
            f'<text x="{_fmt(lx + 6)}" y="{_fmt(ly - 6)}" fill="{col}" font-family="sans-serif" '
            f'font-size="12">{label}</text>'
        )
        if spec.show_timestamps:
            for (t, _, _), (px, py) in zip(pts, canvas):
                tl = html.escape(str(traj.timestamp_labels[t]))
                out.append(
                    f'<text x="{_fmt(px + 3)}" y="{_fmt(py + 12)}" fill="#444444" font-family="sans-serif" '
                    f'font-size="9">{tl}</text>'
                )
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out)


def _check_input(traj: TrajectorySet, spec: PlotSpec) -> int:
    spec.validate()
    if not traj.positions:
        raise ValidationError("trajectory set has zero positions")
    n_points = sum(len(_decimate(traj.points(n), spec.stride)) for n in traj.nodes())
    if n_points > MAX_POINTS:
        raise ValidationError(f"{n_points} points exceed {MAX_POINTS}; decimate first (raise stride)")
    return n_points


def emit_svg(traj: TrajectorySet, spec: PlotSpec, out) -> dict:
    """Write the trajectory plot as a standalone SVG 1.1 file."""
    n_points = _check_input(traj, spec)
    body = '<?xml version="1.0" encoding="UTF-8"?>\n' + _svg_body(traj, spec, None, True, None) + "\n"
    Path(out).write_text(body, encoding="utf-8")
    return {"path": str(out), "points": n_points, "highlighted": len(spec.highlight), "anchors": len(traj.anchor_Z)}


def emit_html(traj: TrajectorySet, spec: PlotSpec, out) -> dict:
    """Write a self-contained HTML page: one inline SVG per timestamp plus the data as JSON."""
    n_points = _check_input(traj, spec)
    meta_rows = "\n".join(
        f"<tr><th>{html.escape(str(k))}</th><td>{html.escape(json.dumps(v, sort_keys=True))}</td></tr>"
        for k, v in sorted(traj.meta.items())
    )
    frames = []
    for t, tl in enumerate(traj.timestamp_labels):
        svg = _svg_body(traj, spec, t, False, f"t={tl}")
        frames.append(f'<section id="t{t}"><h2>{html.escape(str(tl))}</h2>\n{svg}\n</section>')
    data = traj.dumps().replace("</", "<\\/")
    page = "\n".join(
        [
            "<!DOCTYPE html>",
            '<html lang="en">',
            '<head><meta charset="utf-8"><title>Embedding trajectories</title>',
            "<style>body{font-family:sans-serif;margin:1em}section{display:inline-block;margin:0.5em}"
            "table{border-collapse:collapse}th,td{border:1px solid #ccc;padding:2px 6px;text-align:left}</style>",
            "</head>",
            "<body>",
            "<h1>Embedding trajectories</h1>",
            f"<table>\n{meta_rows}\n</table>",
            *frames,
            f'<script type="application/json" id="trajectory-data">{data}</script>',
            "</body>",
            "</html>",
        ]
    )
    Path(out).write_text(page + "\n", encoding="utf-8")
    return {"path": str(out), "points": n_points, "frames": len(frames)}


def read_html_data(path) -> TrajectorySet:
    """Recover the trajectory set embedded by :func:`emit_html`."""
    text = Path(path).read_text(encoding="utf-8")
    m = re.search(r'<script type="application/json" id="trajectory-data">(.*?)</script>', text, re.S)
    if not m:
        raise ValidationError(f"{path}: no embedded trajectory data")
    return TrajectorySet.from_dict(json.loads(m.group(1)))


def export_json(traj: TrajectorySet, out) -> None:
    traj.save(out)


def export_csv(report: MetricReport, out) -> None:
    report.export_csv(out)


def plot_metrics(report: MetricReport, out, timestamp_labels=None) -> None:
    """Per-transition means of the metrics as a two-panel matplotlib figure."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    per = report.per_transition()
    ts = sorted(per)
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6.4, 5.6), sharex=True)
    if ts:
        for key, lab in (("jaccard_n", f"Jaccard@{report.config.n}"), ("rbo_norm", "RBO (normalised)")):
            ax1.plot(ts, [per[t][key] for t in ts], marker="o", label=lab)
        ax1.set_ylim(-0.05, 1.05)
        ax1.legend(frameon=False, fontsize=8)
        ax2.plot(ts, [per[t]["l2"] for t in ts], marker="s", label="L2 movement")
        ax2.plot(ts, [per[t]["arc"] / max(1, len(report.labels)) for t in ts], marker="^", label="ARC / |V|")
        ax2.legend(frameon=False, fontsize=8)
    ax1.set_ylabel("neighbour overlap")
    ax2.set_ylabel("change")
    ax2.set_xlabel("transition")
    if timestamp_labels is not None and ts:
        ax2.set_xticks(ts)
        ax2.set_xticklabels([f"{timestamp_labels[t - 1]}→{timestamp_labels[t]}" for t in ts], rotation=30, fontsize=7)
    fig.tight_layout()
    fig.savefig(out, dpi=100, metadata={"Software": None})
    plt.close(fig)
