"""CSV reports and the SVG scatter of labeled user-days."""

from __future__ import annotations

import csv
import math
from datetime import date, timedelta
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

from .anomaly import ANOMALOUS, REGULAR, DayStats, LabeledUserDay

ANOMALIES_FILE = "anomalies.csv"
DAY_STATS_FILE = "day_stats.csv"
SCATTER_FILE = "scatter.svg"

ANOMALY_COLUMNS = ["day", "did", "block_count", "zscore", "label"]
DAY_STATS_COLUMNS = ["day", "n_users", "mean", "std", "threshold_z"]

RED = "#d62728"
BLUE = "#1f77b4"


class ReportFormatError(ValueError):
    def __init__(self, path: Path, line: int, message: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


def _num(value: float | None, places: int = 6) -> str:
    if value is None:
        return ""
    text = f"{value:.{places}f}"
    return "0.000000" if text == "-0.000000" else text


def _count(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def emit_report(
    labels: Iterable[LabeledUserDay],
    stats: Iterable[DayStats],
    out_dir: str | Path,
) -> list[Path]:
    """Write ``anomalies.csv`` and ``day_stats.csv``; returns the two paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    anomalies = out / ANOMALIES_FILE
    with open(anomalies, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ANOMALY_COLUMNS)
        for item in sorted(labels, key=lambda x: (x.day, x.did)):
            writer.writerow([item.day.isoformat(), item.did, _count(item.count), _num(item.z), item.label])
    day_stats = out / DAY_STATS_FILE
    with open(day_stats, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(DAY_STATS_COLUMNS)
        for s in sorted(stats, key=lambda x: x.day):
            writer.writerow([s.day.isoformat(), s.n_users, _num(s.mean), _num(s.std), _num(s.threshold_z)])
    return [anomalies, day_stats]


def load_anomalies(path: str | Path) -> list[LabeledUserDay]:
    """Read an ``anomalies.csv`` back, rejecting any malformed line."""
    path = Path(path)
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, strict=True)
        try:
            for index, cells in enumerate(reader):
                line = reader.line_num
                if index == 0:
                    if cells != ANOMALY_COLUMNS:
                        raise ReportFormatError(path, line, f"unexpected header {cells!r}")
                    continue
                if len(cells) != len(ANOMALY_COLUMNS):
                    raise ReportFormatError(path, line, f"expected 5 fields, got {len(cells)}")
                day_s, did, count_s, z_s, label = cells
                try:
                    day = date.fromisoformat(day_s)
                    count = float(count_s)
                    z = float(z_s) if z_s else None
                except ValueError as exc:
                    raise ReportFormatError(path, line, str(exc)) from exc
                if not did or label not in (ANOMALOUS, REGULAR) or not math.isfinite(count):
                    raise ReportFormatError(path, line, "bad did, count or label")
                if label == ANOMALOUS and z is None:
                    raise ReportFormatError(path, line, "anomalous row without a z-score")
                out.append(LabeledUserDay(day, did, int(count) if count.is_integer() else count, z, label))
        except csv.Error as exc:
            raise ReportFormatError(path, reader.line_num, str(exc)) from exc
    if not out and path.stat().st_size == 0:
        raise ReportFormatError(path, 1, "empty file, header missing")
    return out


# -- SVG ---------------------------------------------------------------------

WIDTH, HEIGHT = 960, 540
LEFT, RIGHT, TOP, BOTTOM = 70, 170, 50, 60


def _nice_step(span: float, target: int = 6) -> float:
    if span <= 0:
        return 1.0
    raw = span / target
    mag = 10 ** math.floor(math.log10(raw))
    for m in (1, 2, 5, 10):
        if raw <= m * mag:
            return m * mag
    return 10 * mag


def _f(x: float) -> str:
    return f"{x:.2f}"


def render_scatter(labels: Sequence[LabeledUserDay], out_path: str | Path, title: str | None = None) -> Path:
    """Write a self-contained SVG: one circle per user-day, red if anomalous.

    Each marker is a ``<circle class="marker anomalous|regular">``; legend
    swatches are rects, so markers can be counted by class.
    """
    items = sorted(labels, key=lambda x: (x.anomalous, x.day, x.did))
    title = title or "Daily block counts per user (anomalous vs regular)"
    if items:
        first = min(i.day for i in items)
        last = max(i.day for i in items)
        ymax = max(float(i.count) for i in items)
    else:
        first = last = None
        ymax = 1.0
    n_days = (last - first).days if first is not None else 0
    ystep = _nice_step(ymax)
    ytop = max(ystep, math.ceil(ymax / ystep) * ystep)
    plot_w = WIDTH - LEFT - RIGHT
    plot_h = HEIGHT - TOP - BOTTOM

    def x_of(day: date) -> float:
        if first is None or n_days == 0:
            return LEFT + plot_w / 2
        return LEFT + plot_w * (day - first).days / n_days

    def y_of(value: float) -> float:
        return TOP + plot_h * (1 - value / ytop)

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>',
        f'<text x="{WIDTH / 2:.0f}" y="28" text-anchor="middle" font-size="15">{escape(title)}</text>',
        '<g class="axes" stroke="#333333" stroke-width="1">',
        f'<line x1="{LEFT}" y1="{TOP + plot_h}" x2="{LEFT + plot_w}" y2="{TOP + plot_h}"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + plot_h}"/>',
        "</g>",
        '<g class="ticks" fill="#333333">',
    ]
    y = 0.0
    while y <= ytop + 1e-9:
        py = _f(y_of(y))
        parts.append(f'<line x1="{LEFT - 4}" y1="{py}" x2="{LEFT}" y2="{py}" stroke="#333333"/>')
        label = str(int(y)) if float(y).is_integer() else f"{y:g}"
        parts.append(f'<text x="{LEFT - 8}" y="{py}" text-anchor="end" dominant-baseline="middle">{label}</text>')
        y += ystep
    if first is not None:
        every = max(1, math.ceil((n_days + 1) / 10))
        for k in range(0, n_days + 1, every):
            day = first + timedelta(days=k)
            px = _f(x_of(day))
            parts.append(f'<line x1="{px}" y1="{TOP + plot_h}" x2="{px}" y2="{TOP + plot_h + 4}" stroke="#333333"/>')
            parts.append(f'<text x="{px}" y="{TOP + plot_h + 18}" text-anchor="middle">{day.isoformat()}</text>')
    parts.append("</g>")
    parts.append(f'<text x="{LEFT + plot_w / 2:.0f}" y="{HEIGHT - 15}" text-anchor="middle">day (UTC)</text>')
    parts.append(
        f'<text x="18" y="{TOP + plot_h / 2:.0f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {TOP + plot_h / 2:.0f})">blocks per user</text>'
    )
    parts.append('<g class="markers">')
    for item in items:
        colour = RED if item.anomalous else BLUE
        parts.append(
            f'<circle class="marker {item.label}" cx="{_f(x_of(item.day))}" cy="{_f(y_of(float(item.count)))}" '
            f'r="3" fill="{colour}" fill-opacity="0.7"/>'
        )
    parts.append("</g>")
    lx = WIDTH - RIGHT + 20
    parts += [
        '<g class="legend">',
        f'<rect class="legend-swatch anomalous" x="{lx}" y="{TOP}" width="10" height="10" fill="{RED}"/>',
        f'<text x="{lx + 16}" y="{TOP + 9}">{ANOMALOUS}</text>',
        f'<rect class="legend-swatch regular" x="{lx}" y="{TOP + 20}" width="10" height="10" fill="{BLUE}"/>',
        f'<text x="{lx + 16}" y="{TOP + 29}">{REGULAR}</text>',
        "</g>",
        "</svg>",
    ]
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(parts) + "\n", encoding="utf-8")
    return out
