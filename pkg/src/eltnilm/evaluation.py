"""NILM metrics: MAE in watts, and F1 / MCC on thresholded on-off status."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from eltnilm.data import NormStats
from eltnilm.errors import ConfigError, DataError

# On-thresholds in watts.
APPLIANCE_THRESHOLDS = {
    "dishwasher": 10.0,
    "fridge": 50.0,
    "kettle": 2000.0,
    "microwave": 200.0,
    "washer": 20.0,
}


def denormalize(pred_norm, stats: NormStats) -> np.ndarray:
    """Back to watts, clamping negative power to 0 W."""
    return np.maximum(stats.denormalize(pred_norm), 0.0)


def mae(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValueError("mae of empty input")
    return float(np.abs(pred - truth).mean())


def threshold_for(appliance: str, thresholds: Optional[dict] = None) -> float:
    table = {**APPLIANCE_THRESHOLDS, **(thresholds or {})}
    try:
        return float(table[appliance])
    except KeyError:
        raise ConfigError(f"unknown appliance {appliance!r}; known: {', '.join(sorted(table))}") from None


def statusize(power, appliance: str, thresholds: Optional[dict] = None) -> np.ndarray:
    """On/off status: on when power >= the appliance's on-threshold."""
    return np.asarray(power, dtype=np.float64) >= threshold_for(appliance, thresholds)


@dataclass(frozen=True)
class Confusion:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion(pred_status, truth_status) -> Confusion:
    p = np.asarray(pred_status, dtype=bool)
    t = np.asarray(truth_status, dtype=bool)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    return Confusion(int((p & t).sum()), int((~p & ~t).sum()), int((p & ~t).sum()), int((~p & t).sum()))


def f1_from_counts(c: Confusion) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    return 2 * c.tp / denom if denom else 0.0


def mcc_from_counts(c: Confusion) -> float:
    # float products: the integer product can exceed 2**63 on long traces
    denom = math.sqrt(float(c.tp + c.fp) * float(c.tp + c.fn) * float(c.tn + c.fp) * float(c.tn + c.fn))
    return (float(c.tp) * c.tn - float(c.fp) * c.fn) / denom if denom else 0.0


def f1_mcc(pred_status, truth_status) -> tuple:
    """``(F1, MCC, Confusion)``; a zero denominator scores 0."""
    c = confusion(pred_status, truth_status)
    return f1_from_counts(c), mcc_from_counts(c), c


@dataclass
class EvalReport:
    appliance: str
    mae: float
    f1: float
    mcc: float
    tp: int
    tn: int
    fp: int
    fn: int
    samples: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_predictions(pred_watts, truth_watts, appliance: str, thresholds: Optional[dict] = None) -> EvalReport:
    pred_watts = np.asarray(pred_watts, dtype=np.float64)
    truth_watts = np.asarray(truth_watts, dtype=np.float64)
    if truth_watts.size == 0:
        raise DataError("empty test set")
    f1, mcc, c = f1_mcc(statusize(pred_watts, appliance, thresholds), statusize(truth_watts, appliance, thresholds))
    return EvalReport(appliance, mae(pred_watts, truth_watts), f1, mcc, c.tp, c.tn, c.fp, c.fn, c.total)


def report(model, windows, appliance: str, stats: Optional[NormStats] = None,
           thresholds: Optional[dict] = None, batch_size: int = 256) -> tuple:
    """Score ``model`` on every window; returns ``(EvalReport, pred_watts)``.

    ``model`` is anything with ``predict_windows(windows, batch_size)``
    returning normalised predictions. ``stats`` defaults to the appliance
    statistics carried by ``windows`` (fitted on training data).
    """
    if len(windows) == 0:
        raise DataError("empty test set")
    threshold_for(appliance, thresholds)
    stats = stats or windows.appliance_stats
    pred = denormalize(model.predict_windows(windows, batch_size=batch_size), stats)
    return evaluate_predictions(pred, windows.truth_watts(), appliance, thresholds), pred


def macro_average(reports: list) -> EvalReport:
    """Unweighted mean of MAE, F1 and MCC; counts are summed."""
    if not reports:
        raise ValueError("no reports to average")
    return EvalReport(
        "average",
        float(np.mean([r.mae for r in reports])),
        float(np.mean([r.f1 for r in reports])),
        float(np.mean([r.mcc for r in reports])),
        sum(r.tp for r in reports),
        sum(r.tn for r in reports),
        sum(r.fp for r in reports),
        sum(r.fn for r in reports),
        sum(r.samples for r in reports),
    )


_FIELDS = ["appliance", "mae", "f1", "mcc", "tp", "tn", "fp", "fn", "samples"]


def write_reports(out_dir, reports: list) -> None:
    """``report.json`` and ``report.csv``; several appliances add an average row."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = list(reports)
    if len(rows) > 1:
        rows.append(macro_average(rows))
    payload = rows[0].to_dict() if len(rows) == 1 else [r.to_dict() for r in rows]
    (out / "report.json").write_text(json.dumps(payload, indent=2) + "\n")
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow(r.to_dict())


def write_trace(path, timestamps, pred_watts, truth_watts=None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if truth_watts is None:
            writer.writerow(["timestamp", "pred_watts"])
            for row in zip(timestamps, pred_watts):
                writer.writerow([int(row[0]), repr(float(row[1]))])
        else:
            writer.writerow(["timestamp", "pred_watts", "truth_watts"])
            for t, p, y in zip(timestamps, pred_watts, truth_watts):
                writer.writerow([int(t), repr(float(p)), repr(float(y))])
