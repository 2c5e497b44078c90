"""Inverse-distance spatial weights, Local Moran's I and aggregation weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import GeoRegistry, check_partition
from .numerics.tensor import stable_sigmoid

EARTH_RADIUS_KM = 6371.0
DEFAULT_FLOOR_KM = 0.01


@dataclass(frozen=True)
class SpatialWeights:
    w: np.ndarray

    def __post_init__(self):
        w = self.w
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError("spatial weights must be a square matrix")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("spatial weights must be finite and nonnegative")
        if np.any(np.diag(w) != 0):
            raise ValueError("spatial weights must have a zero diagonal")


@dataclass(frozen=True)
class MoranResult:
    lmi: np.ndarray
    x: np.ndarray
    x_bar: float
    s2: np.ndarray


@dataclass(frozen=True)
class AggregationWeights:
    aw: np.ndarray


def haversine_matrix(latlon: np.ndarray, radius_km: float = EARTH_RADIUS_KM) -> np.ndarray:
    latlon = np.asarray(latlon, dtype=float)
    if np.any(np.abs(latlon[:, 0]) > 90) or np.any(np.abs(latlon[:, 1]) > 180):
        raise ValueError("centroids must satisfy |lat| <= 90 and |lon| <= 180")
    lat = np.radians(latlon[:, 0])[:, None]
    lon = np.radians(latlon[:, 1])[:, None]
    dlat = lat - lat.T
    dlon = lon - lon.T
    a = np.sin(dlat / 2) ** 2 + np.cos(lat) * np.cos(lat.T) * np.sin(dlon / 2) ** 2
    d = 2 * radius_km * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    d = (d + d.T) / 2
    np.fill_diagonal(d, 0.0)
    return d


def centroid_distances(registry: GeoRegistry) -> np.ndarray:
    return haversine_matrix(registry.centroids())


def inverse_distance_weights(distances: np.ndarray, floor_km: float = DEFAULT_FLOOR_KM,
                             knn: int = 0) -> SpatialWeights:
    """``w[i, j] = 1 / max(d[i, j], floor)`` off the diagonal.

    ``knn > 0`` keeps only each row's ``knn`` largest weights (nearest
    neighbours); rows are truncated independently, so the result may be
    asymmetric.
    """
    if floor_km <= 0:
        raise ValueError("distance floor must be positive")
    d = np.asarray(distances, dtype=float)
    w = 1.0 / np.maximum(d, floor_km)
    np.fill_diagonal(w, 0.0)
    if knn and knn < w.shape[0] - 1:
        drop = np.argsort(-w, axis=1, kind="stable")[:, knn:]
        np.put_along_axis(w, drop, 0.0, axis=1)
    return SpatialWeights(w)


def local_morans_i(x: np.ndarray, weights: SpatialWeights) -> MoranResult:
    """Per-unit LISA with the leave-one-out variance over all other units.

    ``S_i^2 = sum_{j != i} (x_j - mean)^2 / (n - 1)`` with ``n`` the total
    unit count; units with ``S_i^2 == 0`` get ``LMi = 0``.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if n < 2:
        raise ValueError("Local Moran's I needs at least two units")
    if weights.w.shape != (n, n):
        raise ValueError(f"weights shape {weights.w.shape} does not match {n} units")
    z = x - x.mean()
    s2 = (np.sum(z * z) - z * z) / (n - 1)
    lag = weights.w @ z  # diagonal is zero, so j != i is implicit
    with np.errstate(divide="ignore", invalid="ignore"):
        lmi = np.where(s2 > 0, z / np.where(s2 > 0, s2, 1.0) * lag, 0.0)
    # s2 can be a rounding residue when z is (numerically) constant
    scale = np.max(np.abs(x)) if n else 0.0
    lmi = np.where(s2 > (1e-24 * scale * scale), lmi, 0.0)
    return MoranResult(lmi=lmi, x=x, x_bar=float(x.mean()), s2=s2)


def aggregation_weights(moran: MoranResult) -> AggregationWeights:
    lmi = np.asarray(moran.lmi, dtype=float)
    if not np.all(np.isfinite(lmi)):
        raise ValueError("LMi must be finite")
    return AggregationWeights(stable_sigmoid(lmi))


def aggregation_matrix(aw: np.ndarray, membership: dict, communities) -> np.ndarray:
    """``M[j, i] = aw_i`` when CBG ``i`` belongs to community ``j``."""
    aw = np.asarray(aw, dtype=float)
    check_partition(membership, aw.shape[0])
    m = np.zeros((len(communities), aw.shape[0]))
    for j, com in enumerate(communities):
        idx = list(membership[com])
        m[j, idx] = aw[idx]
    return m


def aggregate_embeddings(x: np.ndarray, aw, membership: dict, communities=None) -> np.ndarray:
    """Plain weighted sum ``C_j = sum_{i in com_j} aw_i X_i`` along axis 0."""
    if isinstance(aw, AggregationWeights):
        aw = aw.aw
    communities = list(membership) if communities is None else list(communities)
    m = aggregation_matrix(aw, membership, communities)
    x = np.asarray(x, dtype=float)
    return np.tensordot(m, x, axes=(1, 0))


def training_visit_totals(visits: np.ndarray, train_range: range) -> np.ndarray:
    """Per-CBG sum of unscaled visits over the training days."""
    return np.asarray(visits, dtype=float)[train_range.start : train_range.stop].sum(axis=0)


def moran_aggregation_weights(registry: GeoRegistry, visits: np.ndarray, train_range: range,
                              floor_km: float = DEFAULT_FLOOR_KM, knn: int = 0):
    x = training_visit_totals(visits, train_range)
    w = inverse_distance_weights(centroid_distances(registry), floor_km, knn)
    moran = local_morans_i(x, w)
    return moran, aggregation_weights(moran)
