"""Command-line front end: synth, train, eval, ablate, sweep, moran, plot.

Exit codes: 0 success, 1 usage, 2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import experiments as ex
from .ingest import DataError, load_dataset, prepare
from .metrics import METRICS, compute_metrics
from .model import VARIANTS, FgcConfig, TrainingDivergence
from .spatial_stats import moran_aggregation_weights
from .synthgen import SynthConfig, emit_dataset, generate_world

log = logging.getLogger("fgforecast")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
MODELS = VARIANTS + ex.BASELINES
SWEEP_AXES = {"T": "window", "hid1": "hid1", "hid2": "hid2"}
SWEEP_DEFAULTS = {"T": (7, 14, 21, 28), "hid1": (2, 4, 8, 12), "hid2": (12, 24, 36, 48)}
BAND = 0.4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- run config

@dataclass
class RunConfig:
    data: str = "data"
    out: str = "runs"
    variant: str = "full"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    baselines: tuple[str, ...] = ()
    workers: int = 1
    ar_order: int = ex.DEFAULT_AR_ORDER
    clip_nonneg: bool = False
    model: FgcConfig = field(default_factory=FgcConfig)

    def to_text(self) -> str:
        """Flat ``key=value`` echo with every default materialized."""
        lines = []
        for f in fields(self):
            if f.name != "model":
                lines.append(f"{f.name}={_format_value(getattr(self, f.name))}")
        for f in fields(FgcConfig):
            lines.append(f"{f.name}={_format_value(getattr(self.model, f.name))}")
        return "\n".join(lines) + "\n"


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _field_types(cls) -> dict[str, object]:
    return typing.get_type_hints(cls)


def _parse_value(key: str, text: str, hint):
    text = text.strip()
    origin = typing.get_origin(hint)
    try:
        if origin is tuple:
            args = typing.get_args(hint)
            item = args[0]
            parts = [p for p in text.split(",") if p.strip()]
            return tuple(_parse_value(key, p, item) for p in parts)
        if hint is bool:
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        return text
    except ValueError:
        raise UsageError(f"bad value for {key}: {text!r}") from None


def parse_config_text(text: str) -> dict[str, object]:
    run_types = {k: v for k, v in _field_types(RunConfig).items() if k != "model"}
    model_types = _field_types(FgcConfig)
    out: dict[str, object] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        hint = run_types.get(key, model_types.get(key))
        if hint is None:
            raise UsageError(f"config line {n}: unknown key {key!r}")
        out[key] = _parse_value(key, value, hint)
    return out


def build_run_config(values: dict[str, object]) -> RunConfig:
    run_keys = {f.name for f in fields(RunConfig)} - {"model"}
    model_kw = {k: v for k, v in values.items() if k not in run_keys}
    run_kw = {k: v for k, v in values.items() if k in run_keys}
    try:
        return RunConfig(model=FgcConfig(**model_kw), **run_kw)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


def parse_seeds(text: str) -> tuple[int, ...]:
    """``"5"`` means seeds 0..4; ``"3,7"`` is an explicit list."""
    try:
        if "," in text:
            return tuple(int(s) for s in text.split(",") if s.strip())
        n = int(text)
    except ValueError:
        raise UsageError(f"bad --seeds value {text!r}") from None
    if n < 1:
        raise UsageError("--seeds needs at least one seed")
    return tuple(range(n))


def resolve(args) -> RunConfig:
    values: dict[str, object] = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text(encoding="utf-8")))
    for key in ("data", "out", "variant", "workers", "window"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if getattr(args, "seeds", None) is not None:
        values["seeds"] = parse_seeds(args.seeds)
    if getattr(args, "seed", None) is not None:
        values["seeds"] = (args.seed,)
    if getattr(args, "baselines", None) is not None:
        values["baselines"] = tuple(b for b in args.baselines.split(",") if b)
    if getattr(args, "clip_nonneg", False):
        values["clip_nonneg"] = True
    for item in getattr(args, "set", None) or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        values.update(parse_config_text(item))
    cfg = build_run_config(values)
    if cfg.variant not in MODELS:
        raise UsageError(f"unknown variant {cfg.variant!r}; choose from {', '.join(MODELS)}")
    for b in cfg.baselines:
        if b not in ex.BASELINES:
            raise UsageError(f"unknown baseline {b!r}; choose from {', '.join(ex.BASELINES)}")
    return cfg


# ---------------------------------------------------------------- commands

def _load(cfg: RunConfig):
    path = Path(cfg.data)
    if not path.is_dir():
        raise DataError(f"data directory not found: {path}")
    return load_dataset(path)


def _seed_config_text(cfg: RunConfig, model: str, seed: int) -> str:
    one = RunConfig(**{f.name: getattr(cfg, f.name) for f in fields(RunConfig)})
    one.variant, one.seeds, one.baselines = model, (seed,), ()
    return one.to_text()


def _run_and_write(cfg: RunConfig, models, out: Path, dataset=None):
    dataset = _load(cfg) if dataset is None else dataset
    jobs = [(m, cfg.model, s) for m in models for s in cfg.seeds]
    results = ex.run_many(dataset, jobs, cfg.workers, cfg.ar_order)
    for r in results:
        run_dir = out / r.model / f"seed_{r.seed}"
        ex.write_run_dir(r, run_dir, _seed_config_text(cfg, r.model, r.seed), cfg.clip_nonneg)
        log.info("%s seed %d: mae %.4f rmse %.4f wmape %.4f", r.model, r.seed,
                 r.metrics["mae"], r.metrics["rmse"], r.metrics["wmape"])
    ex.write_metrics(out / "metrics.csv", results)
    reports = ex.summarize(results)
    ex.write_summary(out / "summary.csv", reports)
    return results, reports


def cmd_synth(args) -> int:
    kw = {"n_cbg": args.n_cbg, "n_com": args.n_com, "n_days": args.days, "seed": args.seed,
          "beta": args.beta, "gamma": args.gamma, "hetero": args.hetero}
    try:
        config = SynthConfig(**{k: v for k, v in kw.items() if v is not None})
    except ValueError as e:
        raise UsageError(str(e)) from None
    world = generate_world(config)
    out = Path(args.out or "data")
    for p in emit_dataset(world, out):
        log.info("wrote %s", p)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve(args)
    out = Path(cfg.out)
    _, reports = _run_and_write(cfg, (cfg.variant, *cfg.baselines), out)
    for name, rep in reports.items():
        print(f"{name}: " + "  ".join(f"{m} {rep.format(m)}" for m in METRICS))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve(args)
    out = Path(cfg.out)
    _, reports = _run_and_write(cfg, (*VARIANTS, *cfg.baselines), out)
    ex.write_summary(out / "ablation.csv", reports, key="variant")
    for name, rep in reports.items():
        print(f"{name:8s} " + "  ".join(f"{m} {rep.format(m)}" for m in METRICS))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = resolve(args)
    if args.axis not in SWEEP_AXES:
        raise UsageError(f"unknown sweep axis {args.axis!r}; choose from {', '.join(SWEEP_AXES)}")
    try:
        values = (tuple(int(v) for v in args.values.split(",") if v.strip())
                  if args.values else SWEEP_DEFAULTS[args.axis])
    except ValueError:
        raise UsageError(f"bad --values {args.values!r}") from None
    dataset = _load(cfg)
    out = Path(cfg.out)
    reports = {}
    for v in values:
        try:
            model_cfg = cfg.model.replace(**{SWEEP_AXES[args.axis]: v})
        except ValueError as e:
            raise UsageError(f"{args.axis}={v}: {e}") from None
        point = RunConfig(**{f.name: getattr(cfg, f.name) for f in fields(RunConfig)})
        point.model = model_cfg
        _, rep = _run_and_write(point, (cfg.variant,), out / f"{args.axis}_{v}", dataset)
        reports[str(v)] = rep[cfg.variant]
    ex.write_summary(out / "sweep.csv", reports, key=args.axis)
    for v, rep in reports.items():
        print(f"{args.axis}={v}: " + "  ".join(f"{m} {rep.format(m)}" for m in METRICS))
    return EXIT_OK


def cmd_moran(args) -> int:
    cfg = resolve(args)
    dataset = _load(cfg)
    prepared = prepare(dataset, cfg.model.window, cfg.model.horizon, cfg.model.split)
    moran, weights = moran_aggregation_weights(dataset.registry, dataset.visits.values,
                                               prepared.train_range, cfg.model.distance_floor_km,
                                               cfg.model.moran_knn)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "moran.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cbg_id", "x", "lmi", "aw"])
        for i, cid in enumerate(dataset.registry.cbg_ids):
            w.writerow([cid, repr(float(moran.x[i])), repr(float(moran.lmi[i])), repr(float(weights.aw[i]))])
    print(f"wrote {out / 'moran.csv'}")
    return EXIT_OK


def _predictions_path(args) -> Path:
    path = Path(args.predictions) if args.predictions else Path(args.run or ".") / "predictions.csv"
    if not path.is_file():
        raise DataError(f"predictions file not found: {path}")
    return path


def read_prediction_rows(path: Path) -> list[dict[str, str]]:
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{path}: no predictions")
    return rows


def band_mask(y_true: np.ndarray, y_pred: np.ndarray, band: float = BAND) -> np.ndarray:
    """Cells whose prediction lies within ``band`` relative error of the truth.

    A zero truth counts as inside only when the prediction is zero too.
    """
    return np.abs(y_pred - y_true) <= band * np.abs(y_true)


def cmd_eval(args) -> int:
    path = _predictions_path(args)
    y_true, y_pred = ex.read_predictions(path)
    metrics = compute_metrics(y_true, y_pred)
    out = Path(args.out) if args.out else path.parent
    out.mkdir(parents=True, exist_ok=True)
    with (out / "eval.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(METRICS))
        w.writerow([repr(metrics[m]) for m in METRICS])
    print("  ".join(f"{m} {metrics[m]:.6g}" for m in METRICS))
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = _predictions_path(args)
    rows = read_prediction_rows(path)
    y_true = np.array([float(r["y_true"]) for r in rows])
    y_pred = np.array([float(r["y_pred"]) for r in rows])
    inside = band_mask(y_true, y_pred)
    out = Path(args.out) if args.out else path.parent
    out.mkdir(parents=True, exist_ok=True)

    with (out / "scatter.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target_date", "community_id", "y_true", "y_pred", "in_band"])
        for r, ok in zip(rows, inside):
            w.writerow([r["target_date"], r["community_id"], r["y_true"], r["y_pred"], int(ok)])
    frac = float(inside.mean())
    metrics = compute_metrics(y_true, y_pred)
    (out / "scatter.txt").write_text(
        f"cells={len(rows)}\nin_band={int(inside.sum())}\nband_fraction={frac!r}\nband={BAND!r}\n"
        + "".join(f"{m}={metrics[m]!r}\n" for m in METRICS), encoding="utf-8")

    meta = {"Software": None}
    fig, ax = plt.subplots(figsize=(5, 5))
    top = max(float(np.max(y_true)), float(np.max(y_pred)), 1.0) * 1.05
    grid = np.array([0.0, top])
    ax.fill_between(grid, (1 - BAND) * grid, (1 + BAND) * grid, color="tab:blue", alpha=0.12,
                    label=f"±{BAND:.0%} band")
    ax.plot(grid, grid, color="k", lw=0.8)
    ax.scatter(y_true, y_pred, s=8, c=np.where(inside, "tab:blue", "tab:red"))
    ax.set(xlim=(0, top), ylim=(min(0.0, float(np.min(y_pred))), top), xlabel="true cases",
           ylabel="predicted cases", title=f"{frac:.1%} within band")
    ax.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(out / "scatter.png", dpi=100, metadata=meta)
    plt.close(fig)

    coms = sorted({r["community_id"] for r in rows})
    dates = sorted({r["target_date"] for r in rows})
    pos = {d: k for k, d in enumerate(dates)}
    ncol = min(3, len(coms))
    nrow = -(-len(coms) // ncol)
    fig, axes = plt.subplots(nrow, ncol, figsize=(4 * ncol, 2.4 * nrow), squeeze=False, sharex=True)
    for ax, com in zip(axes.flat, coms):
        sel = [r for r in rows if r["community_id"] == com]
        x = [pos[r["target_date"]] for r in sel]
        ax.plot(x, [float(r["y_true"]) for r in sel], color="k", lw=1, label="true")
        ax.plot(x, [float(r["y_pred"]) for r in sel], color="tab:orange", lw=1, label="predicted")
        ax.set_title(com, fontsize=9)
    for ax in list(axes.flat)[len(coms):]:
        ax.set_visible(False)
    axes.flat[0].legend(fontsize=8)
    fig.supxlabel(f"test day (from {dates[0]})")
    fig.tight_layout()
    fig.savefig(out / "timeseries.png", dpi=100, metadata=meta)
    plt.close(fig)
    print(f"{frac:.1%} of {len(rows)} cells within ±{BAND:.0%}; figures in {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--data", help="dataset directory with the four CSVs")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="run a single seed")
    common.add_argument("--seeds", help="seed count (N -> 0..N-1) or comma list")
    common.add_argument("--config", help="flat key=value config file (e.g. a config.used echo)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--workers", type=int, help="parallel runs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="fgforecast", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--n-cbg", type=int)
    s.add_argument("--n-com", type=int)
    s.add_argument("--days", type=int)
    s.add_argument("--beta", type=float)
    s.add_argument("--gamma", type=float)
    s.add_argument("--hetero", type=float)
    s.set_defaults(func=cmd_synth)

    for name, func, helptext in (("train", cmd_train, "train one model over seeds"),
                                 ("ablate", cmd_ablate, "run all variants with paired seeds"),
                                 ("sweep", cmd_sweep, "sensitivity sweep over T, hid1 or hid2"),
                                 ("moran", cmd_moran, "write Local Moran's I and aggregation weights")):
        t = sub.add_parser(name, parents=[common], help=helptext)
        t.add_argument("--variant", help=f"one of {', '.join(MODELS)}")
        t.add_argument("--baselines", help="comma list of baselines to run alongside (ar,lstm)")
        t.add_argument("--window", type=int, help="window length T")
        t.add_argument("--clip-nonneg", action="store_true", help="clip negative predictions in outputs")
        if name == "sweep":
            t.add_argument("--axis", required=True, help="T, hid1 or hid2")
            t.add_argument("--values", help="comma list of grid values")
        t.set_defaults(func=func)

    for name, func, helptext in (("eval", cmd_eval, "recompute metrics from predictions.csv"),
                                 ("plot", cmd_plot, "scatter and time-series figures")):
        e = sub.add_parser(name, parents=[common], help=helptext)
        e.add_argument("--run", help="run directory holding predictions.csv")
        e.add_argument("--predictions", help="explicit predictions.csv path")
        e.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"fgforecast: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as e:
        print(f"fgforecast: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as e:
        print(f"fgforecast: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
