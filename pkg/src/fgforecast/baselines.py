"""Per-community autoregression and a community-level two-layer LSTM."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ingest import Dataset, Prepared, WindowSample, community_level, prepare
from .numerics import LSTM, Linear, Module, Tensor


@dataclass(frozen=True)
class ArModel:
    coef: np.ndarray  # [p + 1]: intercept, then lag 1 .. lag p
    p: int


RIDGE_PENALTY = 1e-8


def ar_design(series: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(series, dtype=float)
    rows = len(x) - p
    design = np.ones((rows, p + 1))
    for lag in range(1, p + 1):
        design[:, lag] = x[p - lag : len(x) - lag]
    return design, x[p:]


def fit_ar(series, p: int) -> ArModel:
    """OLS of ``x_t`` on ``[1, x_{t-1}, ..., x_{t-p}]``.

    A rank-deficient design (e.g. a constant series) falls back to ridge
    regression with penalty 1e-8.
    """
    series = np.asarray(series, dtype=float)
    if p < 0:
        raise ValueError("lag order must be nonnegative")
    if len(series) <= p + 1:
        raise ValueError(f"series of length {len(series)} is too short for lag order {p}")
    design, y = ar_design(series, p)
    if np.linalg.matrix_rank(design) < p + 1:
        gram = design.T @ design + RIDGE_PENALTY * np.eye(p + 1)
        coef = np.linalg.solve(gram, design.T @ y)
    else:
        coef = np.linalg.lstsq(design, y, rcond=None)[0]
    return ArModel(coef, p)


def predict_ar(model: ArModel, tail) -> float:
    tail = np.asarray(tail, dtype=float)
    if len(tail) < model.p:
        raise ValueError(f"need {model.p} past values, got {len(tail)}")
    lags = tail[::-1][: model.p]
    return float(model.coef[0] + model.coef[1:] @ lags)


def fit_ar_communities(infections: np.ndarray, train_range: range, p: int) -> list[ArModel]:
    train = np.asarray(infections, dtype=float)[train_range.start : train_range.stop]
    return [fit_ar(train[:, j], p) for j in range(train.shape[1])]


def ar_forecast(models: Sequence[ArModel], infections: np.ndarray,
                samples: Sequence[WindowSample]) -> np.ndarray:
    """One-step forecasts ``[S, N_com]`` from the true history before each target day."""
    infections = np.asarray(infections, dtype=float)
    out = np.empty((len(samples), len(models)))
    for k, s in enumerate(samples):
        for j, m in enumerate(models):
            if s.target_day < m.p:
                raise ValueError(f"day {s.target_day} has fewer than {m.p} days of history")
            out[k, j] = predict_ar(m, infections[s.target_day - m.p : s.target_day, j])
    return out


class CommunityLSTM(Module):
    """Two stacked LSTMs over the concatenated community feature matrix, then a linear layer.

    Each time step's input is ``[infections, visits, vulnerability,
    population]`` for every community (``4 * N_com`` values); the output has
    one value per community.
    """

    variant = "lstm"

    def __init__(self, prepared: Prepared, hidden: int = 32, rng: np.random.Generator | None = None,
                 seed: int = 0):
        rng = np.random.default_rng(seed) if rng is None else rng
        self.prepared = prepared
        self.n_com = prepared.dataset.registry.n_com
        self.lstm1 = LSTM(4 * self.n_com, hidden, rng)
        self.lstm2 = LSTM(hidden, hidden, rng)
        self.output = Linear(hidden, self.n_com, rng)

    def inputs(self, samples: Sequence[WindowSample]) -> np.ndarray:
        rows = []
        for s in samples:
            f = s.features  # [C, T, 3] visits, population, vulnerability
            parts = [s.infections_history, f[:, :, 0], f[:, :, 2], f[:, :, 1]]
            rows.append(np.concatenate(parts, axis=0).T)  # [T, 4C]
        return np.stack(rows)

    def forward_batch(self, samples: Sequence[WindowSample]) -> Tensor:
        x = Tensor(self.inputs(samples))
        seq = self.lstm1(x, return_sequence=True)
        return self.output(self.lstm2(seq))

    def targets(self, samples: Sequence[WindowSample]) -> np.ndarray:
        return np.stack([s.target for s in samples])

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.named_parameters().items():
            p.assign(state[k])


def build_lstm_baseline(dataset: Dataset, window: int, horizon: int = 1,
                        split=(0.5, 0.2, 0.3), hidden: int = 32, seed: int = 0,
                        per_unit_scaling: bool = False) -> CommunityLSTM:
    prepared = prepare(community_level(dataset), window, horizon, split, static_adjacency=True,
                       per_unit_scaling=per_unit_scaling)
    return CommunityLSTM(prepared, hidden, seed=seed)
