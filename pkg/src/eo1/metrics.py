"""Evaluation metrics: station errors, elevation dependence, event skill.

Everything here is plain float64 numpy so the tiny-instance oracle tests
can reproduce each number from its definition.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ValidationError


def station_mae(pred: np.ndarray, truth: np.ndarray, present: np.ndarray) -> dict:
    """Mean absolute error over present entries, per channel and overall.

    Channels with no present entries report None rather than a number.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    present = np.asarray(present, dtype=bool)
    if pred.shape != truth.shape or pred.shape != present.shape:
        raise ValidationError(
            f"shape mismatch: pred {pred.shape}, truth {truth.shape}, present {present.shape}"
        )
    err = np.abs(pred - truth)
    per_channel = []
    for c in range(pred.shape[1]):
        m = present[:, c]
        per_channel.append(float(err[m, c].mean()) if m.any() else None)
    overall = float(err[present].mean()) if present.any() else None
    return {"per_channel": per_channel, "overall": overall}


@dataclass
class ElevationRegression:
    slope: float
    intercept: float
    bin_centers: list[float]
    bin_maes: list[float]
    bin_counts: list[int]


def elevation_regression(
    errors: np.ndarray, elevations: np.ndarray, bin_edges: np.ndarray
) -> ElevationRegression:
    """Per-elevation-bin MAE and the OLS slope of MAE against bin center.

    Stations outside the outer edges are dropped; empty bins are skipped.
    At least two non-empty bins are required, otherwise a slope is not
    defined and a ValidationError is raised.
    """
    errors = np.asarray(errors, dtype=np.float64)
    elevations = np.asarray(elevations, dtype=np.float64)
    bin_edges = np.asarray(bin_edges, dtype=np.float64)
    if errors.shape != elevations.shape:
        raise ValidationError("errors and elevations must have the same shape")
    if bin_edges.ndim != 1 or len(bin_edges) < 2:
        raise ValidationError("need at least two bin edges")
    if not np.all(np.diff(bin_edges) > 0):
        raise ValidationError("bin edges must be strictly increasing")
    centers = []
    maes = []
    counts = []
    for i in range(len(bin_edges) - 1):
        lo, hi = bin_edges[i], bin_edges[i + 1]
        if i == len(bin_edges) - 2:
            m = (elevations >= lo) & (elevations <= hi)
        else:
            m = (elevations >= lo) & (elevations < hi)
        if not m.any():
            continue
        centers.append(float((lo + hi) / 2.0))
        maes.append(float(np.abs(errors[m]).mean()))
        counts.append(int(m.sum()))
    if len(centers) < 2:
        raise ValidationError(
            f"need at least two non-empty elevation bins, got {len(centers)}"
        )
    x = np.array(centers)
    y = np.array(maes)
    xm = x.mean()
    ym = y.mean()
    slope = float(((x - xm) * (y - ym)).sum() / ((x - xm) ** 2).sum())
    intercept = float(ym - slope * xm)
    return ElevationRegression(slope, intercept, centers, maes, counts)


def threshold_skill(
    pred: np.ndarray, truth: np.ndarray, percentile: float, smooth_window: int = 1
) -> tuple[float, float]:
    """(miss rate, false alarm rate) for threshold events.

    Both fields are smoothed with a truncated square box mean of the given
    window (1 = identity); the event threshold is the requested percentile
    of the smoothed truth, and a cell is an event when it is >= threshold.
    miss = FN / (FN + TP), false alarm = FP / (FP + TN); a rate whose
    denominator is empty is reported as 0.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise ValidationError(f"need matching 2-d fields, got {pred.shape} and {truth.shape}")
    if not (0.0 <= percentile <= 100.0):
        raise ValidationError(f"percentile must lie in [0, 100], got {percentile}")
    if smooth_window < 1 or smooth_window % 2 == 0:
        raise ValidationError(f"smooth_window must be odd and >= 1, got {smooth_window}")
    ps = kernels.box_mean(pred, smooth_window)
    ts = kernels.box_mean(truth, smooth_window)
    thresh = np.percentile(ts, percentile)
    ep = ps >= thresh
    et = ts >= thresh
    tp = int(np.sum(ep & et))
    fn = int(np.sum(~ep & et))
    fp = int(np.sum(ep & ~et))
    tn = int(np.sum(~ep & ~et))
    miss = fn / (fn + tp) if (fn + tp) > 0 else 0.0
    false_alarm = fp / (fp + tn) if (fp + tn) > 0 else 0.0
    return float(miss), float(false_alarm)


@dataclass
class MetricReport:
    """Serializable bundle of evaluation numbers for one run."""

    station: dict = field(default_factory=dict)
    elevation: dict = field(default_factory=dict)
    skill: list = field(default_factory=list)
    forecast: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "station": self.station,
            "elevation": self.elevation,
            "skill": self.skill,
            "forecast": self.forecast,
            "extra": self.extra,
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        return cls(
            station=d.get("station", {}),
            elevation=d.get("elevation", {}),
            skill=d.get("skill", []),
            forecast=d.get("forecast", {}),
            extra=d.get("extra", {}),
        )

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())
            f.write("\n")

    @classmethod
    def read(cls, path: str) -> "MetricReport":
        with open(path, encoding="utf-8") as f:
            return cls.from_json(f.read())
