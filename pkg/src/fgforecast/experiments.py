"""Single runs, multi-seed runs, ablations and sweeps, with their on-disk outputs."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .baselines import ar_forecast, build_lstm_baseline, fit_ar_communities
from .ingest import Dataset, Prepared, prepare
from .metrics import METRICS, MetricReport, aggregate_seeds, compute_metrics
from .model import VARIANTS, FgcConfig, TrainState, build_variant, forecast, train
from .numerics import save_checkpoint

log = logging.getLogger(__name__)

BASELINES = ("ar", "lstm")
DEFAULT_AR_ORDER = 7


@dataclass
class RunResult:
    model: str
    seed: int
    metrics: dict[str, float]
    y_true: np.ndarray
    y_pred: np.ndarray
    target_dates: list
    communities: tuple[str, ...]
    history: list[tuple[int, float, float]] = field(default_factory=list)
    state: dict[str, np.ndarray] = field(default_factory=dict)


def _test_truth(prepared: Prepared) -> np.ndarray:
    days = [s.target_day for s in prepared.test]
    return prepared.dataset.infections.values[days]


def run_model(dataset: Dataset, model_name: str, config: FgcConfig, seed: int,
              ar_order: int = DEFAULT_AR_ORDER) -> RunResult:
    """Train (or fit) one model for one seed and score it on the test split."""
    config = config.replace(seed=seed)
    state: TrainState | None = None
    if model_name == "ar":
        prepared = prepare(dataset, config.window, config.horizon, config.split,
                           per_unit_scaling=config.per_unit_scaling)
        models = fit_ar_communities(dataset.infections.values, prepared.train_range, ar_order)
        y_pred = ar_forecast(models, dataset.infections.values, prepared.test)
        params = {f"coef.{j}": m.coef for j, m in enumerate(models)}
    else:
        if model_name == "lstm":
            model = build_lstm_baseline(dataset, config.window, config.horizon, config.split,
                                        config.lstm_hidden, seed, config.per_unit_scaling)
        elif model_name in VARIANTS:
            model = build_variant(model_name, config, dataset)
        else:
            raise ValueError(f"unknown model {model_name!r}")
        prepared = model.prepared
        state = train(model, prepared.train, prepared.val, config)
        y_pred = forecast(model, prepared.test)
        params = model.state_dict()
    y_true = _test_truth(prepared)
    return RunResult(
        model=model_name,
        seed=seed,
        metrics=compute_metrics(y_true, y_pred),
        y_true=y_true,
        y_pred=y_pred,
        target_dates=[s.target_date for s in prepared.test],
        communities=dataset.registry.communities,
        history=state.history if state else [],
        state=params,
    )


def _run_job(args):
    return run_model(*args)


def run_many(dataset: Dataset, jobs: Sequence[tuple[str, FgcConfig, int]], workers: int = 1,
             ar_order: int = DEFAULT_AR_ORDER) -> list[RunResult]:
    """Run (model, config, seed) jobs, in parallel when ``workers > 1``; order is preserved."""
    args = [(dataset, name, cfg, seed, ar_order) for name, cfg, seed in jobs]
    if workers <= 1:
        return [_run_job(a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, args))


# ---------------------------------------------------------------- outputs

def write_run_dir(result: RunResult, run_dir: Path, config_text: str, clip_nonneg: bool = False) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.used").write_text(config_text, encoding="utf-8")
    with (run_dir / "loss_history.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, tr, va in result.history:
            w.writerow([epoch, repr(tr), repr(va)])
    save_checkpoint(run_dir / "checkpoint.bin", result.state)
    write_predictions(run_dir / "predictions.csv", result, clip_nonneg)


def write_predictions(path: Path, result: RunResult, clip_nonneg: bool = False) -> None:
    pred = np.maximum(result.y_pred, 0.0) if clip_nonneg else result.y_pred
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target_date", "community_id", "y_true", "y_pred"])
        for k, date in enumerate(result.target_dates):
            for j, com in enumerate(result.communities):
                w.writerow([date.isoformat(), com, repr(float(result.y_true[k, j])), repr(float(pred[k, j]))])


def read_predictions(path: Path) -> tuple[np.ndarray, np.ndarray]:
    """``(y_true, y_pred)`` as flat arrays in file order."""
    y_true, y_pred = [], []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            y_true.append(float(row["y_true"]))
            y_pred.append(float(row["y_pred"]))
    return np.array(y_true), np.array(y_pred)


def write_metrics(path: Path, results: Sequence[RunResult]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "seed", *METRICS])
        for r in results:
            w.writerow([r.model, r.seed, *(repr(r.metrics[m]) for m in METRICS)])


def _fmt_std(v):
    return "" if v is None else repr(v)


def summarize(results: Sequence[RunResult]) -> dict[str, MetricReport]:
    grouped: dict[str, list[dict[str, float]]] = {}
    for r in results:
        grouped.setdefault(r.model, []).append(r.metrics)
    return {name: aggregate_seeds(ms) for name, ms in grouped.items()}


def write_summary(path: Path, reports: dict[str, MetricReport], key: str = "model") -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([key, *(f"{m}_{s}" for m in METRICS for s in ("mean", "std"))])
        for name, rep in reports.items():
            w.writerow([name, *(x for m in METRICS for x in (repr(rep.mean[m]), _fmt_std(rep.std[m])))])
