"""Desk-scale synthetic worlds: geography, gravity mobility, metapopulation SIR.

Transmission in each CBG is driven by that CBG's daily activity level, which
is also what its visit counts measure, and by a per-CBG rate multiplier that
is larger in spatial clusters of populous CBGs.  Activity is a CBG-own daily
shock, optionally plus a community-wide one, and transmission grows with
activity raised to ``contact_exponent``.  Most cases are imported, at a rate
that follows the same activity and multiplier.  The ``hetero`` knob scales
both the within-community spread of the multipliers and the CBG-own shock;
at 0 every CBG of a community transmits alike on every day.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .ingest import (
    CBG_HEADER,
    INFECTIONS_HEADER,
    MOBILITY_HEADER,
    VISITS_HEADER,
    CbgRecord,
    DailySeries,
    Dataset,
    GeoRegistry,
    MobilityLog,
)
from .spatial_stats import (
    aggregation_weights,
    centroid_distances,
    haversine_matrix,
    inverse_distance_weights,
    local_morans_i,
)

KM_PER_DEG_LAT = 111.32


@dataclass
class SynthConfig:
    n_cbg: int = 100
    n_com: int = 10
    n_days: int = 120
    seed: int = 0
    start_date: str = "2020-06-15"
    # epidemic
    beta: float = 0.02
    gamma: float = 0.2
    import_rate: float = 5.0        # imported cases per CBG per day at unit activity and multiplier
    initial_infected: int = 3       # per CBG on day 0
    mobility_mixing: float = 1.0    # weight of visitor-borne exposure
    # mobility
    gravity_alpha: float = 2.0
    trips_per_capita: float = 0.02  # daily inter-CBG trips per resident
    # activity and visits
    activity_sigma: float = 0.4     # daily log-sd of the CBG-own activity shock at hetero 1
    common_sigma: float = 0.0       # daily log-sd of the community-wide shock
    contact_exponent: float = 1.0
    weekend_factor: float = 0.8
    visits_per_capita: float = 0.5
    dwell_hours: float = 1.5
    prevalence_visit_drop: float = 5.0
    # heterogeneity
    hetero: float = 1.0
    hetero_scale: float = 3.0       # log-rate range across hotspot scores at hetero 1
    # geography (degrees / km)
    lat_range: tuple[float, float] = (33.9, 34.2)
    lon_range: tuple[float, float] = (-118.5, -118.2)
    scatter_km: float = 1.0
    pop_log_mean: float = 9.0
    pop_log_sd: float = 0.2

    def __post_init__(self):
        self.lat_range = tuple(self.lat_range)
        self.lon_range = tuple(self.lon_range)
        if not self.n_cbg >= self.n_com >= 1:
            raise ValueError("need n_cbg >= n_com >= 1")
        if self.n_days < 12:
            raise ValueError("need at least 12 days (one-day window, horizon 1, ten spare days)")
        for name in ("beta", "gamma", "import_rate", "gravity_alpha", "trips_per_capita",
                     "activity_sigma", "common_sigma", "contact_exponent", "hetero", "scatter_km", "initial_infected"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class SynthWorld:
    config: SynthConfig
    dataset: Dataset
    prevalence: np.ndarray        # [D, N_cbg] latent I / N
    cbg_cases: np.ndarray         # [D, N_cbg] integer new cases
    rate_multiplier: np.ndarray   # [N_cbg]
    activity: np.ndarray          # [D, N_cbg]

    @property
    def registry(self) -> GeoRegistry:
        return self.dataset.registry


def _rng(config: SynthConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, stream])


def generate_geography(config: SynthConfig) -> tuple[GeoRegistry, np.ndarray]:
    """Registry plus the community centres ``[N_com, 2]`` (lat, lon)."""
    rng = _rng(config, 0)
    centres = np.column_stack([
        rng.uniform(*config.lat_range, size=config.n_com),
        rng.uniform(*config.lon_range, size=config.n_com),
    ])
    assign = np.concatenate([np.arange(config.n_com),
                             rng.integers(0, config.n_com, size=config.n_cbg - config.n_com)])
    rng.shuffle(assign)
    km_per_deg_lon = KM_PER_DEG_LAT * np.cos(np.radians(centres[assign, 0]))
    offsets = rng.normal(0.0, config.scatter_km, size=(config.n_cbg, 2))
    lat = centres[assign, 0] + offsets[:, 0] / KM_PER_DEG_LAT
    lon = centres[assign, 1] + offsets[:, 1] / km_per_deg_lon
    pop = np.round(rng.lognormal(config.pop_log_mean, config.pop_log_sd, size=config.n_cbg))
    pop = np.maximum(pop, 50.0)
    svi = np.round(rng.uniform(0.0, 1.0, size=config.n_cbg), 4)
    width = len(str(config.n_cbg - 1))
    cwidth = len(str(config.n_com - 1))
    records = [
        CbgRecord(f"cbg{i:0{width}d}", f"com{assign[i]:0{cwidth}d}",
                  (round(float(lat[i]), 6), round(float(lon[i]), 6)), float(pop[i]), float(svi[i]))
        for i in range(config.n_cbg)
    ]
    return GeoRegistry.from_records(records), centres


def day_of_week_factor(config: SynthConfig, n_days: int) -> np.ndarray:
    start = dt.date.fromisoformat(config.start_date)
    weekday = np.array([(start + dt.timedelta(days=k)).weekday() for k in range(n_days)])
    return np.where(weekday >= 5, config.weekend_factor, 1.0)


def daily_activity(config: SynthConfig, community_of: np.ndarray) -> np.ndarray:
    """Mean-one lognormal activity ``[D, N]`` times the weekly pattern.

    ``community_of[i]`` is the community index of CBG ``i``; CBGs of one
    community share the common shock.
    """
    rng = _rng(config, 1)
    community_of = np.asarray(community_of)
    n_com = int(community_of.max()) + 1 if community_of.size else 0
    common = rng.normal(0.0, 1.0, size=(config.n_days, n_com))
    own = rng.normal(0.0, 1.0, size=(config.n_days, community_of.size))
    sc, si = config.common_sigma, config.hetero * config.activity_sigma
    log_a = sc * common[:, community_of] + si * own - 0.5 * (sc * sc + si * si)
    return np.exp(log_a) * day_of_week_factor(config, config.n_days)[:, None]


def gravity_kernel(registry: GeoRegistry, config: SynthConfig) -> np.ndarray:
    """Expected daily trips ``[N, N]`` at unit activity: ``∝ pop_i pop_j / d_ij^alpha``."""
    pop = registry.populations()
    d = np.maximum(haversine_matrix(registry.centroids()), 0.1)
    k = np.outer(pop, pop) / d**config.gravity_alpha
    np.fill_diagonal(k, 0.0)
    total = config.trips_per_capita * pop.sum()
    return k * (total / k.sum()) if k.sum() > 0 else k


def generate_mobility(registry: GeoRegistry, config: SynthConfig,
                      activity: np.ndarray | None = None) -> MobilityLog:
    """Poisson origin-destination counts scaled by the origin's daily activity."""
    rng = _rng(config, 2)
    if activity is None:
        activity = daily_activity(config, registry.community_of())
    kernel = gravity_kernel(registry, config)
    days, origins, dests, counts = [], [], [], []
    for day in range(config.n_days):
        c = rng.poisson(kernel * activity[day][:, None])
        o, d = np.nonzero(c)
        days.append(np.full(len(o), day))
        origins.append(o)
        dests.append(d)
        counts.append(c[o, d].astype(float))
    return MobilityLog(np.concatenate(days), np.concatenate(origins), np.concatenate(dests),
                       np.concatenate(counts))


def rate_multipliers(registry: GeoRegistry, config: SynthConfig) -> np.ndarray:
    """Per-CBG transmission multiplier, geometric mean one within each community.

    The log-multiplier grows with the CBG's population hotspot score,
    ``sigmoid(LMi) - 0.5`` of its population under inverse-distance weights,
    so CBGs in clusters of large neighbours transmit more.
    """
    if config.n_cbg != registry.n_cbg:
        raise ValueError("registry size does not match config")
    if registry.n_cbg < 2:
        return np.ones(registry.n_cbg)
    w = inverse_distance_weights(centroid_distances(registry))
    score = aggregation_weights(local_morans_i(registry.populations(), w)).aw - 0.5
    log_m = config.hetero * config.hetero_scale * score
    com = registry.community_of()
    for j in range(registry.n_com):
        log_m[com == j] -= log_m[com == j].mean()
    return np.exp(log_m)


def simulate_epidemic(registry: GeoRegistry, mobility: MobilityLog, config: SynthConfig,
                      activity: np.ndarray | None = None):
    """Discrete-time stochastic SIR per CBG coupled through daily mobility.

    Exposure of CBG ``i`` on day ``d`` is its own prevalence plus
    ``mixing * sum_j flow(j -> i, d) * I_j / N_j / N_i``; infections on day
    ``d`` use the previous day's state and ``activity ** contact_exponent``.
    Imported cases are Poisson with mean ``import_rate * mult * activity``
    (previous day) times the susceptible fraction.  Returns community
    cases ``[D, N_com]``, CBG prevalence ``[D, N]``, CBG cases ``[D, N]`` and
    visits ``[D, N]``.
    """
    rng = _rng(config, 3)
    n, days = registry.n_cbg, config.n_days
    if activity is None:
        activity = daily_activity(config, registry.community_of())
    pop = registry.populations()
    mult = rate_multipliers(registry, config)
    flows = [sp.csr_matrix((n, n)) for _ in range(days)]
    if len(mobility):
        for day in range(days):
            m = mobility.day == day
            flows[day] = sp.csr_matrix((mobility.count[m], (mobility.origin[m], mobility.dest[m])), shape=(n, n))
    safe_pop = np.maximum(pop, 1.0)
    inf0 = np.minimum(np.full(n, float(config.initial_infected)), pop)
    s, i, r = pop - inf0, inf0.copy(), np.zeros(n)
    cases = np.zeros((days, n))
    prevalence = np.zeros((days, n))
    cases[0] = inf0
    prevalence[0] = i / safe_pop
    p_rec = 1.0 - np.exp(-config.gamma)
    for d in range(1, days):
        prev = i / safe_pop
        visitors = flows[d - 1].T @ prev  # sum_j flow(j -> i) * prev_j
        exposure = prev + config.mobility_mixing * visitors / safe_pop
        lam = config.beta * mult * activity[d - 1] ** config.contact_exponent * exposure
        new = rng.binomial(s.astype(np.int64), 1.0 - np.exp(-lam)).astype(float)
        s_left = s - new
        external = config.import_rate * mult * activity[d - 1] * s / safe_pop
        imports = np.minimum(rng.poisson(external).astype(float), s_left)
        recovered = rng.binomial(i.astype(np.int64), p_rec).astype(float)
        s = s_left - imports
        i = i + new + imports - recovered
        r = r + recovered
        if not (np.all(np.isfinite(i)) and np.all(s >= 0) and np.all(i >= 0)):
            raise FloatingPointError(f"epidemic state became invalid on day {d}")
        cases[d] = new + imports
        prevalence[d] = i / safe_pop
    assert np.allclose(s + i + r, pop)
    visits = pop * config.visits_per_capita * config.dwell_hours * activity
    visits = visits * np.clip(1.0 - config.prevalence_visit_drop * prevalence, 0.05, None)
    visits = np.round(visits, 3)
    community = cases @ registry.membership_matrix().T
    return community, prevalence, cases, visits


def generate_world(config: SynthConfig | None = None) -> SynthWorld:
    config = SynthConfig() if config is None else config
    registry, _ = generate_geography(config)
    activity = daily_activity(config, registry.community_of())
    mobility = generate_mobility(registry, config, activity)
    community, prevalence, cases, visits = simulate_epidemic(registry, mobility, config, activity)
    start = dt.date.fromisoformat(config.start_date)
    dataset = Dataset(
        registry,
        DailySeries(start, visits, tuple(registry.cbg_ids)),
        DailySeries(start, community, tuple(registry.communities)),
        mobility,
    )
    return SynthWorld(config, dataset, prevalence, cases, rate_multipliers(registry, config), activity)


def _fmt(x: float) -> str:
    return repr(float(x)) if x != int(x) else str(int(x))


def emit_dataset(world: SynthWorld, out_dir, drop_visit_days: range | None = None) -> list[Path]:
    """Write the four input CSVs plus ``world_meta.json``.

    ``drop_visit_days`` omits those days from visits.csv (to exercise
    imputation).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = world.dataset
    reg = ds.registry
    dates = [d.isoformat() for d in ds.infections.dates]
    paths = []

    def write(name, header, rows):
        path = out / name
        with path.open("w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(row) + "\n")
        paths.append(path)

    write("cbgs.csv", CBG_HEADER, (
        [c.cbg_id, c.community_id, repr(c.centroid[0]), repr(c.centroid[1]), _fmt(c.population),
         _fmt(c.vulnerability)] for c in reg.cbgs))
    drop = set(drop_visit_days or ())
    write("visits.csv", VISITS_HEADER, (
        [dates[k], cid, _fmt(ds.visits.values[k, i])]
        for k in range(ds.visits.num_days) if k not in drop
        for i, cid in enumerate(reg.cbg_ids)))
    mob = ds.mobility
    cbg_ids = reg.cbg_ids
    write("mobility.csv", MOBILITY_HEADER, (
        [dates[mob.day[e]], cbg_ids[mob.origin[e]], cbg_ids[mob.dest[e]], _fmt(mob.count[e])]
        for e in range(len(mob))))
    write("infections.csv", INFECTIONS_HEADER, (
        [dates[k], com, str(int(ds.infections.values[k, j]))]
        for k in range(ds.infections.num_days)
        for j, com in enumerate(reg.communities)))
    meta = asdict(world.config)
    meta["total_cases"] = int(ds.infections.values.sum())
    meta["mobility_entries"] = len(mob)
    meta_path = out / "world_meta.json"
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths.append(meta_path)
    return paths
