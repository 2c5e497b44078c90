"""Load, validate, impute, scale and window the four input tables.

File schemas (UTF-8 CSV, ISO dates):

    cbgs.csv        cbg_id,community_id,lat,lon,population,svi
    visits.csv      date,cbg_id,visit_value
    mobility.csv    date,origin_cbg,dest_cbg,count
    infections.csv  date,community_id,new_cases

Dates become integer day offsets from the first infection date.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

CBG_HEADER = ["cbg_id", "community_id", "lat", "lon", "population", "svi"]
VISITS_HEADER = ["date", "cbg_id", "visit_value"]
MOBILITY_HEADER = ["date", "origin_cbg", "dest_cbg", "count"]
INFECTIONS_HEADER = ["date", "community_id", "new_cases"]


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class CbgRecord:
    cbg_id: str
    community_id: str
    centroid: tuple[float, float]
    population: float
    vulnerability: float


@dataclass(frozen=True)
class GeoRegistry:
    cbgs: tuple[CbgRecord, ...]
    communities: tuple[str, ...]
    membership: dict[str, tuple[int, ...]]

    def __post_init__(self):
        if not self.cbgs or not self.communities:
            raise DataError("registry needs at least one CBG and one community")
        if len(self.cbgs) < len(self.communities):
            raise DataError("registry has more communities than CBGs")
        ids = [c.cbg_id for c in self.cbgs]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate cbg_id in registry")
        check_partition(self.membership, len(self.cbgs))
        object.__setattr__(self, "_cbg_index", {c: i for i, c in enumerate(ids)})
        object.__setattr__(self, "_com_index", {c: i for i, c in enumerate(self.communities)})

    @classmethod
    def from_records(cls, records: Sequence[CbgRecord]) -> "GeoRegistry":
        records = tuple(sorted(records, key=lambda r: r.cbg_id))
        communities = tuple(sorted({r.community_id for r in records}))
        membership: dict[str, list[int]] = {c: [] for c in communities}
        for i, r in enumerate(records):
            membership[r.community_id].append(i)
        return cls(records, communities, {c: tuple(v) for c, v in membership.items()})

    @property
    def n_cbg(self) -> int:
        return len(self.cbgs)

    @property
    def n_com(self) -> int:
        return len(self.communities)

    @property
    def cbg_ids(self) -> list[str]:
        return [c.cbg_id for c in self.cbgs]

    def cbg_index(self, cbg_id: str) -> int:
        return self._cbg_index[cbg_id]

    def com_index(self, community_id: str) -> int:
        return self._com_index[community_id]

    def has_cbg(self, cbg_id: str) -> bool:
        return cbg_id in self._cbg_index

    def has_community(self, community_id: str) -> bool:
        return community_id in self._com_index

    def centroids(self) -> np.ndarray:
        return np.array([c.centroid for c in self.cbgs], dtype=float)

    def populations(self) -> np.ndarray:
        return np.array([c.population for c in self.cbgs], dtype=float)

    def vulnerabilities(self) -> np.ndarray:
        return np.array([c.vulnerability for c in self.cbgs], dtype=float)

    def community_of(self) -> np.ndarray:
        """Community index of every CBG."""
        out = np.empty(self.n_cbg, dtype=int)
        for j, com in enumerate(self.communities):
            out[list(self.membership[com])] = j
        return out

    def membership_matrix(self) -> np.ndarray:
        """0/1 matrix ``[N_com, N_cbg]``."""
        m = np.zeros((self.n_com, self.n_cbg))
        m[self.community_of(), np.arange(self.n_cbg)] = 1.0
        return m


def check_partition(membership: dict, n: int) -> None:
    seen = [i for idx in membership.values() for i in idx]
    if sorted(seen) != list(range(n)):
        raise DataError("membership is not a partition of the CBG index set")


@dataclass(frozen=True)
class DailySeries:
    """Values ``[num_days, num_units]`` on a contiguous daily axis from ``start``."""

    start: dt.date
    values: np.ndarray
    units: tuple[str, ...]

    @property
    def num_days(self) -> int:
        return self.values.shape[0]

    @property
    def dates(self) -> list[dt.date]:
        return [self.start + dt.timedelta(days=k) for k in range(self.num_days)]

    def replace_values(self, values: np.ndarray) -> "DailySeries":
        return DailySeries(self.start, values, self.units)


@dataclass(frozen=True)
class MobilityLog:
    """Origin-destination counts; ``day`` holds offsets from the dataset start."""

    day: np.ndarray
    origin: np.ndarray
    dest: np.ndarray
    count: np.ndarray

    def __post_init__(self):
        if np.any(self.count < 0):
            raise DataError("negative mobility count")

    def __len__(self) -> int:
        return len(self.day)


@dataclass(frozen=True)
class Dataset:
    registry: GeoRegistry
    visits: DailySeries
    infections: DailySeries
    mobility: MobilityLog

    @property
    def num_days(self) -> int:
        return self.infections.num_days

    @property
    def start(self) -> dt.date:
        return self.infections.start


# ---------------------------------------------------------------- CSV loading

def _rows(path, header: list[str]):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if [h.strip() for h in first] != header:
            raise DataError(f"{path}: expected header {','.join(header)}, got {','.join(first)}")
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{reader.line_num}: expected {len(header)} fields, got {len(row)}")
            yield reader.line_num, row


def _float(path, line: int, field_name: str, text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"{path}:{line}: {field_name} is not a number: {text!r}") from None
    if not math.isfinite(value):
        raise DataError(f"{path}:{line}: {field_name} is not finite")
    return value


def _date(path, line: int, text: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise DataError(f"{path}:{line}: bad ISO date {text!r}") from None


def load_geo_registry(path) -> GeoRegistry:
    records = []
    seen: dict[str, int] = {}
    for line, row in _rows(path, CBG_HEADER):
        cbg_id, com_id = row[0].strip(), row[1].strip()
        if not cbg_id or not com_id:
            raise DataError(f"{path}:{line}: empty identifier")
        if cbg_id in seen:
            raise DataError(f"{path}:{line}: duplicate cbg_id {cbg_id!r} (first on line {seen[cbg_id]})")
        seen[cbg_id] = line
        lat = _float(path, line, "lat", row[2])
        lon = _float(path, line, "lon", row[3])
        if abs(lat) > 90 or abs(lon) > 180:
            raise DataError(f"{path}:{line}: centroid out of range ({lat}, {lon})")
        pop = _float(path, line, "population", row[4])
        svi = _float(path, line, "svi", row[5])
        if pop < 0:
            raise DataError(f"{path}:{line}: negative population")
        if not 0.0 <= svi <= 1.0:
            raise DataError(f"{path}:{line}: svi {svi} outside [0, 1]")
        records.append(CbgRecord(cbg_id, com_id, (lat, lon), pop, svi))
    if not records:
        raise DataError(f"{path}: no CBG rows")
    return GeoRegistry.from_records(records)


def _load_long_table(path, header, units: Sequence[str], lookup, start: dt.date | None,
                     num_days: int | None, integer: bool = False):
    cells = []
    for line, row in _rows(path, header):
        day = _date(path, line, row[0])
        unit = row[1].strip()
        if unit not in lookup:
            raise DataError(f"{path}:{line}: unknown {header[1]} {unit!r}")
        value = _float(path, line, header[2], row[2])
        if value < 0:
            raise DataError(f"{path}:{line}: negative {header[2]}")
        if integer and value != int(value):
            raise DataError(f"{path}:{line}: {header[2]} must be an integer")
        cells.append((day, lookup[unit], value, line))
    if not cells:
        raise DataError(f"{path}: no data rows")
    if start is None:
        start = min(c[0] for c in cells)
        num_days = (max(c[0] for c in cells) - start).days + 1
    values = np.full((num_days, len(units)), np.nan)
    for day, j, value, line in cells:
        k = (day - start).days
        if not 0 <= k < num_days:
            raise DataError(f"{path}:{line}: date {day} outside the infection date span")
        if not np.isnan(values[k, j]):
            raise DataError(f"{path}:{line}: duplicate entry for {day} / {units[j]}")
        values[k, j] = value
    return DailySeries(start, values, tuple(units))


def load_infections(path, registry: GeoRegistry) -> DailySeries:
    lookup = {c: i for i, c in enumerate(registry.communities)}
    series = _load_long_table(path, INFECTIONS_HEADER, registry.communities, lookup, None, None, integer=True)
    missing = np.argwhere(np.isnan(series.values))
    if len(missing):
        k, j = missing[0]
        raise DataError(f"{path}: no infection count for {series.dates[k]} / {registry.communities[j]}")
    return series


def load_visits(path, registry: GeoRegistry, start: dt.date, num_days: int) -> DailySeries:
    """Visits with missing days left as NaN; see :func:`impute_missing_days`."""
    lookup = {c: i for i, c in enumerate(registry.cbg_ids)}
    return _load_long_table(path, VISITS_HEADER, registry.cbg_ids, lookup, start, num_days)


def load_mobility(path, registry: GeoRegistry, start: dt.date) -> MobilityLog:
    days, origins, dests, counts = [], [], [], []
    for line, row in _rows(path, MOBILITY_HEADER):
        day = _date(path, line, row[0])
        o, d = row[1].strip(), row[2].strip()
        for cid in (o, d):
            if not registry.has_cbg(cid):
                raise DataError(f"{path}:{line}: unknown CBG {cid!r}")
        count = _float(path, line, "count", row[3])
        if count < 0:
            raise DataError(f"{path}:{line}: negative count")
        days.append((day - start).days)
        origins.append(registry.cbg_index(o))
        dests.append(registry.cbg_index(d))
        counts.append(count)
    return MobilityLog(np.array(days, dtype=int), np.array(origins, dtype=int),
                       np.array(dests, dtype=int), np.array(counts, dtype=float))


def load_dataset(data_dir) -> Dataset:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataError(f"{data_dir}: data directory not found")
    registry = load_geo_registry(data_dir / "cbgs.csv")
    infections = load_infections(data_dir / "infections.csv", registry)
    visits = load_visits(data_dir / "visits.csv", registry, infections.start, infections.num_days)
    visits = impute_missing_days(visits)
    mobility = load_mobility(data_dir / "mobility.csv", registry, infections.start)
    return Dataset(registry, visits, infections, mobility)


# ---------------------------------------------------------------- imputation

def impute_missing_week(series: DailySeries, missing_range: range) -> DailySeries:
    """Fill each day ``d`` in ``missing_range`` with the mean of days ``d-7`` and ``d+7``."""
    days = list(missing_range)
    if not days:
        return series
    lo, hi = days[0] - 7, days[-1] + 7
    if lo < 0 or hi >= series.num_days:
        raise DataError(f"missing days {days[0]}..{days[-1]} are not bracketed by a week of data on both sides")
    missing = set(days)
    for d in days:
        if d - 7 in missing or d + 7 in missing:
            raise DataError("missing range longer than one week cannot be bracketed")
    values = series.values.copy()
    for d in days:
        before, after = series.values[d - 7], series.values[d + 7]
        if np.isnan(before).any() or np.isnan(after).any():
            raise DataError(f"day {d}: bracketing weeks contain missing values")
        values[d] = (before + after) / 2.0
    return series.replace_values(values)


def missing_day_runs(series: DailySeries) -> list[range]:
    """Contiguous runs of days with any missing cell."""
    bad = np.isnan(series.values).any(axis=1)
    runs, k = [], 0
    while k < len(bad):
        if bad[k]:
            j = k
            while j < len(bad) and bad[j]:
                j += 1
            runs.append(range(k, j))
            k = j
        else:
            k += 1
    return runs


def impute_missing_days(series: DailySeries) -> DailySeries:
    for run in missing_day_runs(series):
        series = impute_missing_week(series, run)
    return series


# ---------------------------------------------------------------- scaling

@dataclass
class MinMaxScaler:
    """Per-column min-max map; constant columns transform to zero."""

    min: np.ndarray = field(default_factory=lambda: np.zeros(0))
    max: np.ndarray = field(default_factory=lambda: np.zeros(0))
    fitted: bool = False

    @property
    def degenerate(self) -> np.ndarray:
        return self.max == self.min

    def _span(self) -> np.ndarray:
        return np.where(self.degenerate, 1.0, self.max - self.min)

    def transform(self, x: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise RuntimeError("scaler is not fitted")
        out = (np.asarray(x, dtype=float) - self.min) / self._span()
        return np.where(self.degenerate, 0.0, out)

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise RuntimeError("scaler is not fitted")
        return np.asarray(z, dtype=float) * self._span() + self.min


def fit_scaler(values: np.ndarray, fit_rows: range | slice | None = None) -> MinMaxScaler:
    values = np.asarray(values, dtype=float)
    rows = values if fit_rows is None else values[fit_rows if isinstance(fit_rows, slice) else list(fit_rows)]
    if rows.shape[0] == 0:
        raise ValueError("cannot fit a scaler on an empty row range")
    return MinMaxScaler(rows.min(axis=0), rows.max(axis=0), True)


# ---------------------------------------------------------------- windows

def build_window_adjacency(log: MobilityLog, window: range, n_cbg: int) -> sp.csr_matrix:
    """Sum of counts per (origin, dest) over the days in ``window``."""
    mask = (log.day >= window.start) & (log.day < window.stop)
    return sp.csr_matrix(
        (log.count[mask], (log.origin[mask], log.dest[mask])), shape=(n_cbg, n_cbg)
    )


@dataclass(frozen=True)
class WindowSample:
    features: np.ndarray            # [N, T, 3] scaled visits, population, vulnerability
    adjacency: sp.csr_matrix        # [N, N]
    infections_history: np.ndarray  # [N_com, T] scaled
    target: np.ndarray              # [N_com] scaled
    target_day: int
    target_date: dt.date


def num_windows(n_days: int, window: int, horizon: int) -> int:
    return n_days - window - horizon + 1


@dataclass(frozen=True)
class Scalers:
    visits: MinMaxScaler
    population: MinMaxScaler
    vulnerability: MinMaxScaler
    infections: MinMaxScaler


def build_windows(registry: GeoRegistry, visits: DailySeries, infections: DailySeries,
                  mobility: MobilityLog, window: int, horizon: int, scalers: Scalers,
                  static_adjacency: sp.csr_matrix | None = None) -> list[WindowSample]:
    """Slide a ``window``-day frame with step 1; target is ``horizon`` days after its end.

    With ``static_adjacency`` every sample shares that matrix instead of its
    own per-window mobility sum.
    """
    n_days = infections.num_days
    if visits.num_days != n_days or visits.start != infections.start:
        raise DataError("visits and infections are not on the same date axis")
    if window < 1 or horizon < 1:
        raise ValueError("window and horizon must be positive")
    count = num_windows(n_days, window, horizon)
    if count < 1:
        raise DataError(f"{n_days} days is too short for window {window} + horizon {horizon}")
    if np.isnan(visits.values).any():
        raise DataError("visits contain unimputed missing values")
    vst = scalers.visits.transform(visits.values)                             # [D, N]
    pop = scalers.population.transform(registry.populations()[:, None])[:, 0]  # [N]
    vul = scalers.vulnerability.transform(registry.vulnerabilities()[:, None])[:, 0]
    inf = scalers.infections.transform(infections.values)                     # [D, C]
    n = registry.n_cbg
    samples = []
    for k in range(count):
        days = range(k, k + window)
        target_day = k + window + horizon - 1
        feats = np.empty((n, window, 3))
        feats[:, :, 0] = vst[k : k + window].T
        feats[:, :, 1] = pop[:, None]
        feats[:, :, 2] = vul[:, None]
        adj = static_adjacency if static_adjacency is not None else build_window_adjacency(mobility, days, n)
        samples.append(WindowSample(
            features=feats,
            adjacency=adj,
            infections_history=inf[k : k + window].T.copy(),
            target=inf[target_day].copy(),
            target_day=target_day,
            target_date=infections.start + dt.timedelta(days=target_day),
        ))
    return samples


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    n_train = int(math.floor(n * ratios[0] + 1e-9))
    n_val = int(math.floor(n * ratios[1] + 1e-9))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise DataError(f"split of {n} samples by {tuple(ratios)} leaves an empty part "
                        f"({n_train}/{n_val}/{n_test})")
    return n_train, n_val, n_test


def split_chronological(samples: Sequence, ratios: Sequence[float] = (0.5, 0.2, 0.3)):
    n_train, n_val, _ = split_sizes(len(samples), ratios)
    return (list(samples[:n_train]), list(samples[n_train : n_train + n_val]),
            list(samples[n_train + n_val :]))


def training_days(n_days: int, window: int, horizon: int, ratios: Sequence[float]) -> range:
    """Days touched by training samples: their windows and targets."""
    n_train, _, _ = split_sizes(num_windows(n_days, window, horizon), ratios)
    return range(0, n_train - 1 + window + horizon)


def _channel_scaler(values: np.ndarray, rows: range) -> MinMaxScaler:
    """One min/max over every unit's training rows, broadcast back to all columns."""
    col = np.asarray(values, dtype=float)[rows.start : rows.stop].reshape(-1, 1)
    s = fit_scaler(col)
    n = values.shape[1]
    return MinMaxScaler(np.repeat(s.min, n), np.repeat(s.max, n), True)


def fit_scalers(dataset: Dataset, train_range: range, per_unit: bool = False) -> Scalers:
    """Scalers for the four channels, fitted on the training days.

    By default visits and infections each get a single min/max shared by all
    units; ``per_unit`` fits every CBG / community column separately.
    """
    reg = dataset.registry
    fit = (lambda v: fit_scaler(v, train_range)) if per_unit else (lambda v: _channel_scaler(v, train_range))
    return Scalers(
        visits=fit(dataset.visits.values),
        population=fit_scaler(reg.populations()[:, None]),
        vulnerability=fit_scaler(reg.vulnerabilities()[:, None]),
        infections=fit(dataset.infections.values),
    )


@dataclass
class Prepared:
    """Windowed, scaled, split view of a dataset."""

    dataset: Dataset
    window: int
    horizon: int
    ratios: tuple[float, float, float]
    scalers: Scalers
    train_range: range
    samples: list[WindowSample]
    train: list[WindowSample]
    val: list[WindowSample]
    test: list[WindowSample]


def prepare(dataset: Dataset, window: int, horizon: int = 1,
            ratios: Sequence[float] = (0.5, 0.2, 0.3), static_adjacency: bool = False,
            per_unit_scaling: bool = False) -> Prepared:
    """Scale on the training range, build windows and split them chronologically.

    ``static_adjacency`` replaces per-window graphs with the training-range
    mobility sum.
    """
    ratios = tuple(float(r) for r in ratios)
    train_range = training_days(dataset.num_days, window, horizon, ratios)
    scalers = fit_scalers(dataset, train_range, per_unit_scaling)
    static = None
    if static_adjacency:
        static = build_window_adjacency(dataset.mobility, train_range, dataset.registry.n_cbg)
    samples = build_windows(dataset.registry, dataset.visits, dataset.infections, dataset.mobility,
                            window, horizon, scalers, static)
    train, val, test = split_chronological(samples, ratios)
    return Prepared(dataset, window, horizon, ratios, scalers, train_range, samples, train, val, test)


def community_level(dataset: Dataset) -> Dataset:
    """Collapse a CBG-level dataset onto one node per community.

    Visits, population and vulnerability are summed over member CBGs, the
    centroid is the member mean, and mobility keeps only flows between two
    different communities.
    """
    reg = dataset.registry
    com_of = reg.community_of()
    records = []
    for j, com in enumerate(reg.communities):
        idx = list(reg.membership[com])
        cents = reg.centroids()[idx]
        records.append(CbgRecord(
            cbg_id=com,
            community_id=com,
            centroid=(float(cents[:, 0].mean()), float(cents[:, 1].mean())),
            population=float(reg.populations()[idx].sum()),
            vulnerability=float(reg.vulnerabilities()[idx].sum()),
        ))
    com_reg = GeoRegistry(tuple(records), reg.communities, {c: (j,) for j, c in enumerate(reg.communities)})
    visits = dataset.visits.values @ reg.membership_matrix().T
    mob = dataset.mobility
    o, d = com_of[mob.origin], com_of[mob.dest]
    keep = o != d
    mobility = MobilityLog(mob.day[keep], o[keep], d[keep], mob.count[keep])
    return Dataset(com_reg, DailySeries(dataset.visits.start, visits, reg.communities),
                   dataset.infections, mobility)
