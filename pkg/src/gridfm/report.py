"""Campaign summaries and static SVG figures."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .hpo import TrialRecord, warm_start_from_csv
from .train import read_epoch_csv


class ReportInputError(ValueError):
    pass


@dataclass(frozen=True)
class BoxStats:
    count: int
    best: float
    mean: float
    median: float
    q1: float
    q3: float
    whisker_lo: float
    whisker_hi: float
    outliers: tuple = ()

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1


def box_stats(values: Sequence[float]) -> BoxStats:
    """Quartiles by linear interpolation; whiskers reach the furthest points within 1.5 IQR."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("no values")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    outliers = tuple(float(x) for x in v[(v < lo_fence) | (v > hi_fence)])
    return BoxStats(int(v.size), float(v[0]), float(v.mean()), float(med), float(q1), float(q3),
                    float(inside.min()), float(inside.max()), outliers)


def load_results(paths: Iterable) -> tuple[list[TrialRecord], list[str]]:
    records, problems = [], []
    for p in paths:
        try:
            records.extend(warm_start_from_csv(p, problems))
        except OSError as e:
            problems.append(f"{p}: {e}")
    return records, problems


def summarize(records: Sequence[TrialRecord]) -> list[dict]:
    rows = []
    for t in sorted({r.config.mpnn_type for r in records}):
        mine = [r for r in records if r.config.mpnn_type == t]
        vals = [r.objective for r in mine if r.valid]
        row = {"mpnn_type": t, "valid": len(vals), "dispatched": len(mine), "label": f"{len(vals)}/{len(mine)}"}
        if vals:
            s = box_stats(vals)
            row.update(best=s.best, mean=s.mean, median=s.median, q1=s.q1, q3=s.q3, iqr=s.iqr,
                       whisker_lo=s.whisker_lo, whisker_hi=s.whisker_hi)
        rows.append(row)
    return rows


SUMMARY_COLUMNS = ["mpnn_type", "valid", "dispatched", "label", "best", "mean", "median", "q1", "q3", "iqr", "whisker_lo", "whisker_hi"]


def _write_csv(path: Path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


# SVG ---------------------------------------------------------------------


class Svg:
    """Just enough SVG for axes, points, boxes and polylines."""

    def __init__(self, width=640, height=420, margin=(60, 20, 30, 60)):
        self.w, self.h = width, height
        self.ml, self.mr, self.mt, self.mb = margin
        self.items: list[str] = []

    @property
    def plot_box(self):
        return self.ml, self.mt, self.w - self.mr, self.h - self.mb

    def line(self, x1, y1, x2, y2, stroke="#333", width=1.0, dash=None):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.items.append(f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" stroke="{stroke}" stroke-width="{width}"{d}/>')

    def rect(self, x, y, w, h, fill="#9ecae1", stroke="#333"):
        self.items.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{w:.2f}" height="{h:.2f}" fill="{fill}" stroke="{stroke}"/>')

    def circle(self, x, y, r=3.0, fill="#3182bd"):
        self.items.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r}" fill="{fill}"/>')

    def polyline(self, pts, stroke="#3182bd", width=1.5):
        p = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
        self.items.append(f'<polyline points="{p}" fill="none" stroke="{stroke}" stroke-width="{width}"/>')

    def text(self, x, y, s, size=11, anchor="middle", rotate=None):
        tr = f' transform="rotate({rotate} {x:.2f} {y:.2f})"' if rotate else ""
        self.items.append(f'<text x="{x:.2f}" y="{y:.2f}" font-size="{size}" text-anchor="{anchor}" font-family="sans-serif"{tr}>{escape(str(s))}</text>')

    def render(self) -> str:
        body = "\n".join(self.items)
        return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.w}" height="{self.h}" '
                f'viewBox="0 0 {self.w} {self.h}">\n<rect width="100%" height="100%" fill="white"/>\n{body}\n</svg>\n')


PALETTE = ["#3182bd", "#e6550d", "#31a354", "#756bb1", "#636363", "#d6616b", "#8c6d31"]


class Axis:
    def __init__(self, lo, hi, a, b, log=False):
        if log:
            lo, hi = math.log10(lo), math.log10(hi)
        if hi - lo < 1e-12:
            lo, hi = lo - 0.5, hi + 0.5
        pad = 0.05 * (hi - lo)
        self.lo, self.hi, self.a, self.b, self.log = lo - pad, hi + pad, a, b, log

    def __call__(self, v):
        v = math.log10(v) if self.log else v
        return self.a + (v - self.lo) / (self.hi - self.lo) * (self.b - self.a)

    def ticks(self, n=5):
        vals = np.linspace(self.lo, self.hi, n)
        return [(self.a + (v - self.lo) / (self.hi - self.lo) * (self.b - self.a), 10 ** v if self.log else v) for v in vals]


def _frame(svg: Svg, xlabel: str, ylabel: str, title: str, yaxis: Axis, xaxis: Axis | None = None):
    x0, y0, x1, y1 = svg.plot_box
    svg.line(x0, y1, x1, y1)
    svg.line(x0, y0, x0, y1)
    for py, v in yaxis.ticks():
        svg.line(x0 - 4, py, x0, py)
        svg.text(x0 - 6, py + 4, f"{v:.3g}", size=9, anchor="end")
    if xaxis is not None:
        for px, v in xaxis.ticks():
            svg.line(px, y1, px, y1 + 4)
            svg.text(px, y1 + 15, f"{v:.3g}", size=9)
    svg.text((x0 + x1) / 2, svg.h - 8, xlabel)
    svg.text(14, (y0 + y1) / 2, ylabel, rotate=-90)
    svg.text((x0 + x1) / 2, 18, title, size=13)


def _positive(vals) -> bool:
    return len(vals) > 0 and min(vals) > 0


def box_plot_svg(records: Sequence[TrialRecord], title="Best validation loss per trial") -> str:
    rows = summarize(records)
    svg = Svg()
    x0, y0, x1, y1 = svg.plot_box
    vals = [r.objective for r in records if r.valid]
    log = _positive(vals)
    ya = Axis(min(vals, default=0.0), max(vals, default=1.0), y1, y0, log=log)
    _frame(svg, "architecture (valid/dispatched)", "best validation loss", title, ya)
    n = max(len(rows), 1)
    slot = (x1 - x0) / n
    for i, row in enumerate(rows):
        cx = x0 + slot * (i + 0.5)
        svg.text(cx, y1 + 15, f"{row['mpnn_type']} ({row['label']})", size=10)
        if not row["valid"]:
            continue
        mine = [r.objective for r in records if r.valid and r.config.mpnn_type == row["mpnn_type"]]
        s = box_stats(mine)
        half = slot * 0.25
        svg.line(cx, ya(s.whisker_lo), cx, ya(s.q1))
        svg.line(cx, ya(s.q3), cx, ya(s.whisker_hi))
        svg.line(cx - half / 2, ya(s.whisker_lo), cx + half / 2, ya(s.whisker_lo))
        svg.line(cx - half / 2, ya(s.whisker_hi), cx + half / 2, ya(s.whisker_hi))
        svg.rect(cx - half, ya(s.q3), 2 * half, max(ya(s.q1) - ya(s.q3), 0.5), fill=PALETTE[i % len(PALETTE)] + "55")
        svg.line(cx - half, ya(s.median), cx + half, ya(s.median), stroke="#000", width=2)
        for o in s.outliers:
            svg.circle(cx, ya(o), 2.5, fill="#555")
    return svg.render()


def scatter_svg(records: Sequence[TrialRecord], title="Validation loss vs trainable parameters") -> str:
    pts = [(r.num_params, r.objective, r.config.mpnn_type) for r in records if r.valid and r.num_params > 0]
    svg = Svg()
    x0, y0, x1, y1 = svg.plot_box
    xs = [p[0] for p in pts] or [1, 10]
    ys = [p[1] for p in pts] or [0.0, 1.0]
    xa = Axis(min(xs), max(xs), x0, x1, log=_positive(xs))
    ya = Axis(min(ys), max(ys), y1, y0, log=_positive(ys))
    _frame(svg, "trainable parameters", "best validation loss", title, ya, xa)
    types = sorted({p[2] for p in pts})
    for x, y, t in pts:
        svg.circle(xa(x), ya(y), 3, fill=PALETTE[types.index(t) % len(PALETTE)])
    for i, t in enumerate(types):
        svg.circle(x1 - 90, y0 + 12 + 14 * i, 4, fill=PALETTE[i % len(PALETTE)])
        svg.text(x1 - 82, y0 + 16 + 14 * i, t, size=10, anchor="start")
    return svg.render()


def curves_svg(curves: dict[str, Sequence[tuple[int, float]]], title="Validation loss vs epoch") -> str:
    svg = Svg()
    x0, y0, x1, y1 = svg.plot_box
    allx = [e for c in curves.values() for e, _ in c] or [1, 2]
    ally = [v for c in curves.values() for _, v in c if math.isfinite(v)] or [0.0, 1.0]
    xa = Axis(min(allx), max(allx), x0, x1)
    ya = Axis(min(ally), max(ally), y1, y0, log=_positive(ally))
    _frame(svg, "epoch", "validation loss", title, ya, xa)
    for i, (name, c) in enumerate(sorted(curves.items())):
        pts = [(xa(e), ya(v)) for e, v in c if math.isfinite(v)]
        colour = PALETTE[i % len(PALETTE)]
        if pts:
            svg.polyline(pts, stroke=colour)
        svg.line(x1 - 110, y0 + 12 + 14 * i, x1 - 95, y0 + 12 + 14 * i, stroke=colour, width=2)
        svg.text(x1 - 90, y0 + 16 + 14 * i, name, size=10, anchor="start")
    return svg.render()


# entry point --------------------------------------------------------------


@dataclass
class Report:
    files: dict[str, Path] = field(default_factory=dict)
    problems: list[str] = field(default_factory=list)
    summary: list[dict] = field(default_factory=list)


def emit_report(results: Sequence = (), out_dir=".", epoch_logs: Sequence = ()) -> Report:
    """Write summary.csv, loss_vs_params.csv and SVG figures into ``out_dir``.

    ``results`` are campaign CSVs; ``epoch_logs`` are per-run epoch CSVs or
    directories containing them.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rep = Report()
    records, rep.problems = load_results(results)
    if results and not records and rep.problems:
        raise ReportInputError("no parseable trial rows: " + "; ".join(rep.problems[:5]))
    if records:
        rep.summary = summarize(records)
        _write_csv(out / "summary.csv", SUMMARY_COLUMNS, rep.summary)
        lvp = [
            {"trial_id": r.trial_id, "mpnn_type": r.config.mpnn_type, "num_params": r.num_params, "objective": r.objective,
             "hidden_dim": r.config.hidden_dim, "num_conv_layers": r.config.num_conv_layers, "learning_rate": r.config.learning_rate}
            for r in records if r.valid
        ]
        _write_csv(out / "loss_vs_params.csv", ["trial_id", "mpnn_type", "num_params", "objective", "hidden_dim", "num_conv_layers", "learning_rate"], lvp)
        (out / "objectives_box.svg").write_text(box_plot_svg(records))
        (out / "loss_vs_params.svg").write_text(scatter_svg(records))
        rep.files.update(summary=out / "summary.csv", loss_vs_params=out / "loss_vs_params.csv",
                         box=out / "objectives_box.svg", scatter=out / "loss_vs_params.svg")
    logs = []
    for p in epoch_logs:
        p = Path(p)
        logs.extend(sorted(p.glob("*.csv")) if p.is_dir() else [p])
    curves = {}
    for p in logs:
        try:
            curves[p.stem] = [(l.epoch, l.val_loss) for l in read_epoch_csv(p)]
        except (OSError, KeyError, ValueError) as e:
            rep.problems.append(f"{p}: {e}")
    if curves:
        (out / "curves.svg").write_text(curves_svg(curves))
        rep.files["curves"] = out / "curves.svg"
    return rep
