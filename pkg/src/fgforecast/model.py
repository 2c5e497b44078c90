"""Fine-grained community forecaster: CBG-level GCN, weighted aggregation, shared LSTM.

Per time step every CBG's (visits, population, vulnerability) goes through a
feature MLP and a weighted GCN over the window's mobility graph.  The CBG
embeddings are summed into their community with per-CBG aggregation weights,
concatenated with an embedding of the community's infection history, and fed
through one LSTM shared by all communities; a head MLP emits the next-day
value.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .ingest import Dataset, Prepared, WindowSample, community_level, prepare
from .numerics import (
    LSTM,
    MLP,
    AdamW,
    GCNLayer,
    GradientTape,
    Module,
    NonFiniteError,
    Parameter,
    Tensor,
    concat,
    matmul,
    mse_loss,
    normalize_adjacency,
)
from .numerics.tensor import mul
from .spatial_stats import moran_aggregation_weights

VARIANTS = ("full", "wo_cst", "wo_swa", "wo_ewa", "wo_twa")


class TrainingDivergence(RuntimeError):
    """Loss or parameters became non-finite during training."""


@dataclass
class FgcConfig:
    window: int = 21
    horizon: int = 1
    hid1: int = 8
    hid2: int = 24
    lstm_hidden: int = 32
    gcn_layers: int = 1
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 32
    max_epochs: int = 400
    patience: int = 5
    warmup_epochs: int = 150
    seed: int = 0
    split: tuple[float, float, float] = (0.5, 0.2, 0.3)
    distance_floor_km: float = 0.01
    moran_knn: int = 0
    per_unit_scaling: bool = False

    def __post_init__(self):
        self.split = tuple(float(r) for r in self.split)
        for name in ("window", "horizon", "hid1", "hid2", "lstm_hidden", "gcn_layers",
                     "batch_size", "max_epochs", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be nonnegative")
        if self.hid2 <= self.hid1:
            raise ValueError(f"hid2 ({self.hid2}) must exceed hid1 ({self.hid1})")
        if self.horizon != 1:
            raise ValueError("only one-step-ahead forecasting (horizon 1) is supported")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def replace(self, **changes) -> "FgcConfig":
        values = asdict(self)
        values.update(changes)
        return FgcConfig(**values)


# ---------------------------------------------------------------- the model

class FgcModel(Module):
    """Forecaster over a :class:`Prepared` view.

    ``aggregate`` is ``None`` for the community-level graph variant; otherwise
    the aggregation weights are a constant array or, for ``wo_twa``, a
    Parameter.
    """

    def __init__(self, config: FgcConfig, prepared: Prepared, variant: str = "full",
                 aw=None, aggregate: bool = True, rng: np.random.Generator | None = None):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
        rng = np.random.default_rng(config.seed) if rng is None else rng
        reg = prepared.dataset.registry
        self.config = config
        self.prepared = prepared
        self.variant = variant
        self.n_nodes = reg.n_cbg
        self.n_com = reg.n_com
        self.aggregate = aggregate
        self.membership = reg.membership_matrix()
        self.feature_mlp = MLP(3, config.hid1, rng)
        self.gcn = [GCNLayer(config.hid1, config.hid1, rng) for _ in range(config.gcn_layers)]
        self.infection_mlp = MLP(1, config.hid2 - config.hid1, rng)
        self.lstm = LSTM(config.hid2, config.lstm_hidden, rng)
        self.head = MLP(config.lstm_hidden, 1, rng, hidden=config.lstm_hidden)
        if aggregate:
            aw = np.ones(self.n_nodes) if aw is None else aw
            self.aw = aw if isinstance(aw, Parameter) else np.asarray(aw, dtype=float)
        else:
            self.aw = None
        self._adj_cache: dict[int, tuple[sp.spmatrix, sp.csr_matrix]] = {}

    # -- pieces

    def normalized(self, adjacency: sp.spmatrix) -> sp.csr_matrix:
        hit = self._adj_cache.get(id(adjacency))
        if hit is None or hit[0] is not adjacency:
            hit = (adjacency, normalize_adjacency(adjacency))
            self._adj_cache[id(adjacency)] = hit
        return hit[1]

    def batch_adjacency(self, samples: Sequence[WindowSample]) -> sp.csr_matrix:
        mats = [self.normalized(s.adjacency) for s in samples]
        return mats[0] if len(mats) == 1 else sp.block_diag(mats, format="csr")

    def spatial_extract(self, samples: Sequence[WindowSample]) -> Tensor:
        """CBG embeddings ``[B, N, T, hid1]`` from the feature MLP and GCN."""
        b = len(samples)
        t = samples[0].features.shape[1]
        feats = Tensor(np.stack([s.features for s in samples]))
        h = self.feature_mlp(feats).reshape(b * self.n_nodes, t, self.config.hid1)
        adj = self.batch_adjacency(samples)
        for layer in self.gcn:
            h = layer(h, adj)
        return h.reshape(b, self.n_nodes, t, self.config.hid1)

    def aggregation_matrix(self):
        if isinstance(self.aw, Parameter):
            return mul(Tensor(self.membership), self.aw)
        return Tensor(self.membership * self.aw)

    def community_embeddings(self, x: Tensor) -> Tensor:
        b, n, t, f = x.shape
        if not self.aggregate:
            return x
        c = matmul(self.aggregation_matrix(), x.reshape(b, n, t * f))
        return c.reshape(b, self.n_com, t, f)

    def forward_batch(self, samples: Sequence[WindowSample]) -> Tensor:
        """Scaled next-day predictions ``[B, N_com]``."""
        b = len(samples)
        x = self.spatial_extract(samples)
        c = self.community_embeddings(x)
        t = c.shape[2]
        inf = Tensor(np.stack([s.infections_history for s in samples])[..., None])
        hi = self.infection_mlp(inf)
        hc = concat([hi, c], axis=-1).reshape(b * self.n_com, t, self.config.hid2)
        last = self.lstm(hc)
        return self.head(last).reshape(b, self.n_com)

    def forward(self, sample: WindowSample) -> Tensor:
        return self.forward_batch([sample]).reshape(self.n_com)

    def targets(self, samples: Sequence[WindowSample]) -> np.ndarray:
        return np.stack([s.target for s in samples])

    # -- persistence

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(params) != set(state):
            raise ValueError("checkpoint keys do not match model parameters")
        for k, p in params.items():
            p.assign(state[k])


def build_variant(variant: str, config: FgcConfig, dataset: Dataset) -> FgcModel:
    """Construct the full model or one of its ablations on ``dataset``.

    full    per-window CBG graph, sigmoid(Local Moran's I) weights
    wo_cst  one static CBG graph (training-range mobility sum)
    wo_swa  graph built directly on communities; no aggregation step
    wo_ewa  unit aggregation weights
    wo_twa  trainable aggregation weights initialized to 0.5
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    rng = np.random.default_rng(config.seed)
    if variant == "wo_swa":
        prepared = prepare(community_level(dataset), config.window, config.horizon, config.split,
                           static_adjacency=True, per_unit_scaling=config.per_unit_scaling)
        return FgcModel(config, prepared, variant, aggregate=False, rng=rng)
    prepared = prepare(dataset, config.window, config.horizon, config.split,
                       static_adjacency=(variant == "wo_cst"),
                       per_unit_scaling=config.per_unit_scaling)
    if variant in ("full", "wo_cst"):
        _, weights = moran_aggregation_weights(dataset.registry, dataset.visits.values,
                                               prepared.train_range, config.distance_floor_km,
                                               config.moran_knn)
        aw = weights.aw
    elif variant == "wo_ewa":
        aw = np.ones(dataset.registry.n_cbg)
    else:
        aw = Parameter(np.full(dataset.registry.n_cbg, 0.5), name="aw")
    return FgcModel(config, prepared, variant, aw=aw, rng=rng)


# ---------------------------------------------------------------- training

@dataclass
class EarlyStopper:
    """Patience-based stopping that starts monitoring once warm-up is over.

    Epochs up to ``warmup_epochs`` are ignored entirely; from then on the
    best validation loss, its epoch and the epochs-since-best counter are
    tracked, and training stops after ``patience`` epochs without a strict
    improvement.
    """

    patience: int
    warmup_epochs: int = 0
    best: float = math.inf
    best_epoch: int = 0
    since_best: int = 0

    def monitoring(self, epoch: int) -> bool:
        return epoch > self.warmup_epochs

    def update(self, epoch: int, val_loss: float) -> tuple[bool, bool]:
        """Return ``(improved, stop)`` for the 1-based ``epoch``."""
        if not self.monitoring(epoch):
            return False, False
        improved = val_loss < self.best
        if improved:
            self.best, self.best_epoch, self.since_best = val_loss, epoch, 0
        else:
            self.since_best += 1
        return improved, self.since_best >= self.patience


@dataclass
class TrainState:
    epoch: int = 0
    best_val_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    best_snapshot: dict[str, np.ndarray] = field(default_factory=dict)
    history: list[tuple[int, float, float]] = field(default_factory=list)
    stopped_early: bool = False


def batch_loss(model, samples: Sequence[WindowSample]) -> Tensor:
    return mse_loss(model.forward_batch(samples), model.targets(samples))


def evaluate_loss(model, samples: Sequence[WindowSample], batch_size: int = 64) -> float:
    total = 0.0
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        total += batch_loss(model, chunk).item() * len(chunk)
    return total / len(samples)


def train(model, train_samples: Sequence[WindowSample], val_samples: Sequence[WindowSample],
          config: FgcConfig, val_loss_fn: Callable[[int], float] | None = None,
          log: Callable[[str], None] | None = None) -> TrainState:
    """Mini-batch AdamW on the per-sample MSE with warm-up then early stopping.

    The parameters of the best monitored epoch are restored before returning;
    if training ends before monitoring starts, the final parameters are kept.
    ``val_loss_fn(epoch)`` overrides the measured validation loss (testing hook).
    """
    if not train_samples or not val_samples:
        raise ValueError("training and validation splits must be nonempty")
    rng = np.random.default_rng([config.seed, 1])
    params = model.parameters()
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    stopper = EarlyStopper(config.patience, config.warmup_epochs)
    state = TrainState()
    n = len(train_samples)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, config.batch_size):
            batch = [train_samples[i] for i in order[start : start + config.batch_size]]
            opt.zero_grad()
            try:
                with GradientTape() as tape:
                    loss = batch_loss(model, batch)
                tape.backward(loss)
                opt.step()
            except NonFiniteError as exc:
                raise TrainingDivergence(f"epoch {epoch}, batch at {start}: {exc}") from exc
            running += loss.item() * len(batch)
        train_loss = running / n
        try:
            val_loss = val_loss_fn(epoch) if val_loss_fn else evaluate_loss(model, val_samples)
        except NonFiniteError as exc:
            raise TrainingDivergence(f"epoch {epoch} validation: {exc}") from exc
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise TrainingDivergence(f"epoch {epoch}: non-finite loss")
        state.history.append((epoch, train_loss, val_loss))
        state.epoch = epoch
        improved, stop = stopper.update(epoch, val_loss)
        if improved or not stopper.monitoring(epoch):
            state.best_snapshot = copy.deepcopy(model.state_dict())
        state.best_val_loss, state.best_epoch = stopper.best, stopper.best_epoch
        state.epochs_since_improvement = stopper.since_best
        if log:
            log(f"epoch {epoch:4d} train {train_loss:.6f} val {val_loss:.6f}")
        if stop:
            state.stopped_early = True
            break
    model.load_state_dict(state.best_snapshot)
    return state


def predict_scaled(model, samples: Sequence[WindowSample], batch_size: int = 64) -> np.ndarray:
    out = [model.forward_batch(samples[i : i + batch_size]).data
           for i in range(0, len(samples), batch_size)]
    return np.concatenate(out, axis=0)


def forecast(model, samples: Sequence[WindowSample]) -> np.ndarray:
    """Predictions ``[S, N_com]`` in case counts; negatives are kept."""
    scaler = getattr(model.prepared, "scalers", None)
    if scaler is None or not scaler.infections.fitted:
        raise RuntimeError("model has no fitted infection scaler")
    return scaler.infections.inverse_transform(predict_scaled(model, samples))
