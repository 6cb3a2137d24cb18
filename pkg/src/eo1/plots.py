"""Figure emission. Every plot writes a sibling CSV with the exact numbers.

All figures render through the Agg backend so the stage works headless.
"""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ValidationError
from .metrics import MetricReport


def _write_csv(path: str, header: list[str], rows: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _sibling_csv(png_path: str) -> str:
    if png_path.endswith(".png"):
        return png_path[: -len(".png")] + ".csv"
    return png_path + ".csv"


def plot_loss_trace(rows: list, columns: list[str], out_png: str, title: str = "") -> list[str]:
    """Line plot of loss columns against step; rows are (step, *losses)."""
    if not rows:
        raise ValidationError("loss trace is empty")
    arr = np.asarray(rows, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 4))
    for j, name in enumerate(columns[1:], start=1):
        ax.plot(arr[:, 0], arr[:, j], label=name)
    ax.set_xlabel(columns[0])
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)
    out_csv = _sibling_csv(out_png)
    _write_csv(out_csv, columns, [[float(v) for v in row] for row in rows])
    return [out_png, out_csv]


def plot_scaling(points: list, fit: dict | None, out_png: str, xlabel: str) -> list[str]:
    """Log-log scatter of (size, loss) plus the fitted power law."""
    if not points:
        raise ValidationError("scaling point list is empty")
    xs = np.array([p[0] for p in points], dtype=np.float64)
    ys = np.array([p[1] for p in points], dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog(xs, ys, "o", label="measured")
    if fit is not None:
        grid = np.geomspace(xs.min(), xs.max(), 64)
        ax.loglog(grid, fit["coef"] * grid ** fit["exponent"], "-",
                  label=f"fit b={fit['exponent']:.3f}")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("best validation loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)
    out_csv = _sibling_csv(out_png)
    _write_csv(out_csv, [xlabel, "val_loss"], [[float(x), float(y)] for x, y in points])
    return [out_png, out_csv]


def plot_station_report(report: MetricReport, out_png: str) -> list[str]:
    """Bar chart of per-channel station MAE."""
    per = report.station.get("per_channel")
    if not per:
        raise ValidationError("report has no station MAE section")
    vals = [v if v is not None else np.nan for v in per]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar(range(len(vals)), vals)
    ax.set_xlabel("variable")
    ax.set_ylabel("MAE")
    ax.set_xticks(range(len(vals)))
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)
    out_csv = _sibling_csv(out_png)
    _write_csv(out_csv, ["variable", "mae"],
               [[i, float(v) if v is not None else float("nan")] for i, v in enumerate(per)])
    return [out_png, out_csv]


def plot_elevation(report: MetricReport, out_png: str) -> list[str]:
    """Bin MAE against bin center elevation with the fitted line."""
    elev = report.elevation
    if not elev or "bin_centers" not in elev:
        raise ValidationError("report has no elevation section")
    xs = np.asarray(elev["bin_centers"], dtype=np.float64)
    ys = np.asarray(elev["bin_maes"], dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(xs, ys, "o-", label="bin MAE")
    if "slope" in elev and "intercept" in elev:
        ax.plot(xs, elev["slope"] * xs + elev["intercept"], "--",
                label=f"slope {elev['slope']:.2e}/m")
    ax.set_xlabel("elevation (m)")
    ax.set_ylabel("MAE")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)
    out_csv = _sibling_csv(out_png)
    _write_csv(out_csv, ["elevation_m", "mae"],
               [[float(x), float(y)] for x, y in zip(xs, ys)])
    return [out_png, out_csv]


def plot_skill(report: MetricReport, out_png: str) -> list[str]:
    """Miss and false-alarm rates against lead time, one pair per percentile."""
    if not report.skill:
        raise ValidationError("report has no skill section")
    percentiles = sorted({row["percentile"] for row in report.skill})
    fig, ax = plt.subplots(figsize=(6, 4))
    for p in percentiles:
        rows = [r for r in report.skill if r["percentile"] == p]
        rows.sort(key=lambda r: r["lead_hours"])
        leads = [r["lead_hours"] for r in rows]
        ax.plot(leads, [r["miss"] for r in rows], "o-", label=f"miss p{p:g}")
        ax.plot(leads, [r["false_alarm"] for r in rows], "s--", label=f"false alarm p{p:g}")
    ax.set_xlabel("lead time (h)")
    ax.set_ylabel("rate")
    ax.set_ylim(-0.05, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)
    out_csv = _sibling_csv(out_png)
    _write_csv(
        out_csv,
        ["lead_hours", "percentile", "miss", "false_alarm"],
        [[float(r["lead_hours"]), float(r["percentile"]), float(r["miss"]),
          float(r["false_alarm"])] for r in report.skill],
    )
    return [out_png, out_csv]


def _read_trace(path: str) -> tuple[list, list[str]]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    return rows, header


def emit_plots(run_dir: str, out_dir: str | None = None) -> list[str]:
    """Render every known artifact in a run directory into figures.

    Looks for trace CSVs under traces/, metrics.json, and scaling.json.
    Raises ValidationError when nothing plottable is found.
    """
    out_dir = out_dir or os.path.join(run_dir, "plots")
    os.makedirs(out_dir, exist_ok=True)
    written: list[str] = []

    trace_dir = os.path.join(run_dir, "traces")
    if os.path.isdir(trace_dir):
        for name in sorted(os.listdir(trace_dir)):
            if not name.endswith(".csv"):
                continue
            rows, header = _read_trace(os.path.join(trace_dir, name))
            if not rows:
                continue
            stem = name[: -len(".csv")]
            written += plot_loss_trace(
                rows, header, os.path.join(out_dir, f"{stem}_trace.png"), title=stem
            )

    metrics_path = os.path.join(run_dir, "metrics.json")
    if os.path.isfile(metrics_path):
        report = MetricReport.read(metrics_path)
        if report.station.get("per_channel"):
            written += plot_station_report(report, os.path.join(out_dir, "station_mae.png"))
        if report.elevation.get("bin_centers"):
            written += plot_elevation(report, os.path.join(out_dir, "elevation_mae.png"))
        if report.skill:
            written += plot_skill(report, os.path.join(out_dir, "threshold_skill.png"))

    scaling_path = os.path.join(run_dir, "scaling.json")
    if os.path.isfile(scaling_path):
        with open(scaling_path, encoding="utf-8") as f:
            sc = json.load(f)
        if sc.get("data_points"):
            written += plot_scaling(sc["data_points"], sc.get("data_fit"),
                                    os.path.join(out_dir, "scaling_data.png"),
                                    xlabel="training windows")
        if sc.get("param_points"):
            written += plot_scaling(sc["param_points"], sc.get("param_fit"),
                                    os.path.join(out_dir, "scaling_params.png"),
                                    xlabel="parameters")

    if not written:
        raise ValidationError(f"nothing plottable found under {run_dir}")
    return written
