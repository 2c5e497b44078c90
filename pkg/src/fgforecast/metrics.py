"""Pooled point-forecast metrics and multi-seed aggregation."""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field

import numpy as np

METRICS = ("mae", "rmse", "wmape")


def _pair(y_true, y_pred) -> tuple[np.ndarray, np.ndarray]:
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"shape mismatch: {y_true.shape} vs {y_pred.shape}")
    if y_true.size == 0:
        raise ValueError("metrics need at least one cell")
    return y_true, y_pred


def mae(y_true, y_pred) -> float:
    y_true, y_pred = _pair(y_true, y_pred)
    return float(np.mean(np.abs(y_true - y_pred)))


def rmse(y_true, y_pred) -> float:
    y_true, y_pred = _pair(y_true, y_pred)
    return float(np.sqrt(np.mean((y_true - y_pred) ** 2)))


def wmape(y_true, y_pred) -> float:
    """``sum|e| / sum|y|`` over all cells."""
    y_true, y_pred = _pair(y_true, y_pred)
    denom = np.sum(np.abs(y_true))
    if denom == 0:
        raise ValueError("WMAPE is undefined when every true value is zero")
    return float(np.sum(np.abs(y_true - y_pred)) / denom)


def compute_metrics(y_true, y_pred) -> dict[str, float]:
    return {"mae": mae(y_true, y_pred), "rmse": rmse(y_true, y_pred), "wmape": wmape(y_true, y_pred)}


@dataclass
class MetricReport:
    per_seed: list[dict[str, float]]
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float | None] = field(default_factory=dict)

    def format(self, metric: str, digits: int = 3) -> str:
        s = self.std[metric]
        if s is None:
            return f"{self.mean[metric]:.{digits}f}"
        return f"{self.mean[metric]:.{digits}f} ± {s:.{digits}f}"


def aggregate_seeds(reports) -> MetricReport:
    """Mean and sample (n-1) standard deviation per metric; std is None for one seed."""
    reports = [dict(r) for r in reports]
    if not reports:
        raise ValueError("no per-seed metrics to aggregate")
    mean, std = {}, {}
    for m in METRICS:
        values = [r[m] for r in reports]
        mean[m] = statistics.fmean(values)
        std[m] = statistics.stdev(values) if len(values) > 1 else None
    return MetricReport(reports, mean, std)
