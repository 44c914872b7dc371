"""Report generation over result CSVs: aligned summary tables and SVG
line plots (accuracy vs event, Omega_all vs lambda2, Omega_all vs buffer
capacity). SVG is written directly so the report path stays
dependency-free and byte-deterministic.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


class ReportError(ValueError):
    pass


def parse_results_csv(path):
    """Read one results file into (config dict, list of row dicts)."""
    lines = Path(path).read_text().splitlines()
    config = None
    header = None
    rows = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            if line.startswith("# config: "):
                try:
                    config = json.loads(line[len("# config: "):])
                except json.JSONDecodeError as exc:
                    raise ReportError(f"{path}:{lineno}: bad config header: {exc}")
            continue
        fields = line.split(",")
        if header is None:
            header = fields
            continue
        if len(fields) != len(header):
            raise ReportError(
                f"{path}:{lineno}: expected {len(header)} fields, got {len(fields)}")
        row = dict(zip(header, fields))
        try:
            for k in ("seed", "event_index"):
                row[k] = int(row[k])
            for k in ("alpha", "alpha_offline", "omega_all_running"):
                row[k] = float(row[k])
        except (KeyError, ValueError) as exc:
            raise ReportError(f"{path}:{lineno}: malformed row: {exc}")
        rows.append(row)
    if config is None or header is None:
        raise ReportError(f"{path}: missing config header or column row")
    return config, rows


def load_all_results(result_dir):
    """All (config, rows) pairs from results_*.csv under a directory, sorted."""
    paths = sorted(Path(result_dir).glob("results_*.csv"))
    if not paths:
        raise ReportError(f"no runs found under {result_dir}")
    return [parse_results_csv(p) for p in paths]


def _final_omegas(rows):
    """Final omega_all_running per seed (last event row of each seed)."""
    per_seed: dict = {}
    for r in rows:
        per_seed[r["seed"]] = r  # rows are event-ordered within a seed
    return [per_seed[s]["omega_all_running"] for s in sorted(per_seed)]


def summary_table(results) -> tuple:
    """(aligned text table, CSV text) summarizing each run file."""
    header = ["run_id", "mode", "ordering", "seeds", "omega_mean", "omega_std"]
    body = []
    for config, rows in results:
        omegas = _final_omegas(rows)
        body.append([
            config["run_id"], config["trainer"]["mode"], config["ordering"],
            str(len(omegas)),
            f"{np.mean(omegas):.4f}", f"{np.std(omegas):.4f}",
        ])
    widths = [max(len(h), *(len(r[i]) for r in body)) for i, h in enumerate(header)]
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    text = "\n".join([fmt(header)] + [fmt(r) for r in body]) + "\n"
    csv = "\n".join([",".join(header)] + [",".join(r) for r in body]) + "\n"
    return text, csv


# ---------------------------------------------------------------------------
# Minimal SVG line plots

_W, _H = 640, 400
_ML, _MR, _MT, _MB = 70, 20, 40, 60
_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def svg_line_plot(series, xlabel: str, ylabel: str, title: str) -> str:
    """Plot named (x, y) series as polylines; series is [(name, xs, ys), ...]."""
    if not series:
        raise ReportError("nothing to plot")
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    x0, x1 = min(xs_all), max(xs_all)
    y0, y1 = min(ys_all), max(ys_all)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    pw, ph = _W - _ML - _MR, _H - _MT - _MB

    def px(x):
        return _ML + (x - x0) / (x1 - x0) * pw

    def py(y):
        return _MT + (y1 - y) / (y1 - y0) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="monospace" font-size="12">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<rect x="{_ML}" y="{_MT}" width="{pw}" height="{ph}" '
        f'fill="none" stroke="black"/>',
        f'<text x="{_W / 2:.1f}" y="{_H - 10}" text-anchor="middle">{xlabel}</text>',
        f'<text x="16" y="{_H / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {_H / 2:.1f})">{ylabel}</text>',
    ]
    for i in range(5):
        xv = x0 + (x1 - x0) * i / 4
        yv = y0 + (y1 - y0) * i / 4
        parts.append(f'<text x="{px(xv):.1f}" y="{_H - _MB + 16}" '
                     f'text-anchor="middle">{xv:.3g}</text>')
        parts.append(f'<text x="{_ML - 6}" y="{py(yv) + 4:.1f}" '
                     f'text-anchor="end">{yv:.3g}</text>')
    for ci, (name, xs, ys) in enumerate(series):
        color = _COLORS[ci % len(_COLORS)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        for x, y in zip(xs, ys):
            parts.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="2.5" '
                         f'fill="{color}"/>')
        ly = _MT + 14 + 16 * ci
        parts.append(f'<line x1="{_ML + pw - 130}" y1="{ly - 4}" x2="{_ML + pw - 110}" '
                     f'y2="{ly - 4}" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{_ML + pw - 105}" y="{ly}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def accuracy_vs_event_series(results):
    """One series per run: mean streaming accuracy across seeds per event."""
    series = []
    for config, rows in results:
        per_event: dict = {}
        for r in rows:
            per_event.setdefault(r["event_index"], []).append(r["alpha"])
        events = sorted(per_event)
        series.append((config["run_id"], events,
                       [float(np.mean(per_event[e])) for e in events]))
    return series


def _sweep_series(results, key_fn, sweep_name):
    """Mean final omega as a function of a swept config value.

    Runs are grouped by everything except the swept value; each group with
    at least two distinct sweep points becomes one series.
    """
    groups: dict = {}
    for config, rows in results:
        value = key_fn(config)
        ident = (config["trainer"]["mode"], config["ordering"])
        omega = float(np.mean(_final_omegas(rows)))
        groups.setdefault(ident, {})[value] = omega
    series = []
    for ident in sorted(groups):
        pts = groups[ident]
        if len(pts) < 2:
            continue
        xs = sorted(pts)
        series.append((f"{ident[0]}/{ident[1]}", xs, [pts[x] for x in xs]))
    return series


def generate_report(result_dir, out_dir) -> list:
    """Write summary table, CSV, and available SVG plots; return paths."""
    results = load_all_results(result_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text, csv = summary_table(results)
    written = []

    def emit(name, content):
        path = out / name
        path.write_text(content)
        written.append(path)

    emit("summary.txt", text)
    emit("summary.csv", csv)
    emit("accuracy_vs_event.svg", svg_line_plot(
        accuracy_vs_event_series(results), "testing event", "accuracy",
        "Streaming accuracy per testing event"))
    lam = _sweep_series(results, lambda c: c["trainer"]["lambda2"], "lambda2")
    if lam:
        emit("omega_vs_lambda2.svg", svg_line_plot(
            lam, "lambda2", "omega_all", "Omega_all vs distillation weight"))
    cap = _sweep_series(results, lambda c: c["trainer"]["buffer_capacity"], "buffer")
    if cap:
        emit("omega_vs_buffer.svg", svg_line_plot(
            cap, "buffer capacity", "omega_all", "Omega_all vs buffer capacity"))
    return written
