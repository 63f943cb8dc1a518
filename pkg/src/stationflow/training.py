"""Experiment harness: seeded training, metrics, repeated runs.

Wires the data pipeline, feature builder, graph builder and models into
the protocol used throughout: temporal split, min-max scaling fitted on
the training partition only, mini-batch Adam with early stopping on
validation loss, and RMSE/MAE/R² reported separately for stations seen
vs unseen during training, averaged over seeded repetitions.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .common import ConfigError, DataError, Month
from .data import (DatasetSplit, MonthlySample, StationRecord, derive_lifecycle,
                   read_samples, read_station_registry, temporal_split)
from .geo import FEATURE_DIM, FeatureBuilder, LayerSet
from .graphs import GraphBuilderConfig, MonthGraphs, build_localized_graphs, normalized_kernel_weights
from .models import (LINEAR_VARIANTS, LinearModel, ModelBatch,
                     ModelConfig, build_linear_design, fit_linear_model, forward,
                     init_params, linear_design_columns, loss_sse)
from .nn import Adam, MinMaxScaler, Params, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainRunConfig:
    variant: str = "mgat"
    epochs: int = 200
    patience: int = 10
    lr: float = 0.002
    batch_size: int = 32
    weight_decay: float = 1e-5
    seed: int = 0
    n_runs: int = 10
    val_fraction: float = 0.2
    train_end: Month | None = None
    test_start: Month | None = None
    slx_estimator: str = "ols"
    model: ModelConfig | None = None
    graph: GraphBuilderConfig = field(default_factory=GraphBuilderConfig)

    def __post_init__(self):
        if self.patience >= self.epochs:
            raise ConfigError("patience must be smaller than epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.model is None:
            self.model = ModelConfig(variant=self.variant)
        elif self.model.variant != self.variant:
            raise ConfigError("model config variant disagrees with run variant")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant, "epochs": self.epochs, "patience": self.patience,
            "lr": self.lr, "batch_size": self.batch_size,
            "weight_decay": self.weight_decay, "seed": self.seed,
            "n_runs": self.n_runs, "val_fraction": self.val_fraction,
            "train_end": str(self.train_end) if self.train_end else None,
            "test_start": str(self.test_start) if self.test_start else None,
            "slx_estimator": self.slx_estimator,
            "model": self.model.to_dict(),
            "graph": {"k": self.graph.k, "sigma_d": self.graph.sigma_d,
                      "sigma_b": self.graph.sigma_b, "sigma_scope": self.graph.sigma_scope},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRunConfig":
        d = dict(d)
        if d.get("train_end"):
            d["train_end"] = Month.parse(d["train_end"])
        if d.get("test_start"):
            d["test_start"] = Month.parse(d["test_start"])
        if d.get("model"):
            d["model"] = ModelConfig.from_dict(d["model"])
        if d.get("graph"):
            d["graph"] = GraphBuilderConfig(**d["graph"])
        return cls(**d)


@dataclass
class FeatureFrame:
    month: Month
    ids: tuple[str, ...]
    raw: np.ndarray

    def __post_init__(self):
        self.index = {sid: i for i, sid in enumerate(self.ids)}

    def row(self, station_id: str) -> np.ndarray:
        return self.raw[self.index[station_id]]


@dataclass
class ExperimentData:
    """Everything a run consumes: split, per-month features/graphs, scalers."""
    stations: dict[str, StationRecord]
    split: DatasetSplit
    frames: dict[Month, FeatureFrame]
    graphs: dict[Month, MonthGraphs]
    feature_scaler: MinMaxScaler
    age_scaler: MinMaxScaler
    target_scaler: MinMaxScaler
    first_active: dict[str, Month]
    graph_config: GraphBuilderConfig
    _normalized: dict[Month, np.ndarray] = field(default_factory=dict)

    def normalized(self, month: Month) -> np.ndarray:
        got = self._normalized.get(month)
        if got is None:
            got = self.feature_scaler.transform(self.frames[month].raw)
            self._normalized[month] = got
        return got

    def age_of(self, station_id: str, month: Month) -> int:
        first = self.first_active[station_id]
        return max(0, month.index - first.index)

    def feature_of(self, station_id: str, month: Month) -> np.ndarray:
        return self.frames[month].row(station_id)


def infer_split_months(samples: Sequence[MonthlySample]) -> tuple[Month, Month]:
    """Default protocol when not configured: first two thirds of the
    observed months train, the rest test."""
    months = sorted({s.month for s in samples})
    if len(months) < 3:
        raise DataError("need at least 3 months of samples to infer a split")
    cut = max(1, (2 * len(months)) // 3)
    return months[cut - 1], months[cut]


def active_sets(samples: Sequence[MonthlySample]) -> dict[Month, tuple[str, ...]]:
    by_month: dict[Month, set[str]] = {}
    for s in samples:
        by_month.setdefault(s.month, set()).add(s.station_id)
    return {m: tuple(sorted(ids)) for m, ids in by_month.items()}


def prepare_experiment(samples: Sequence[MonthlySample],
                       stations: Sequence[StationRecord],
                       layers: LayerSet,
                       config: TrainRunConfig) -> ExperimentData:
    """Split, build per-month features and graphs, fit scalers on train."""
    train_end = config.train_end
    test_start = config.test_start
    if train_end is None or test_start is None:
        train_end, test_start = infer_split_months(samples)
        log.info("inferred split: train through %s, test from %s", train_end, test_start)
        config.train_end, config.test_start = train_end, test_start
    split = temporal_split(samples, train_end, test_start, config.val_fraction, config.seed)

    registry = {s.id: s for s in stations}
    missing = {s.station_id for s in samples} - set(registry)
    if missing:
        raise DataError(f"samples reference stations missing from the registry: "
                        f"{sorted(missing)[:5]}...")
    lifecycle = derive_lifecycle(samples)
    first_active = {}
    for sid, (first, _last) in lifecycle.items():
        reg = registry[sid]
        first_active[sid] = reg.first_active_month or first

    builder = FeatureBuilder(layers)
    frames: dict[Month, FeatureFrame] = {}
    for month, ids in sorted(active_sets(samples).items(), key=lambda kv: kv[0]):
        lats = np.array([registry[sid].lat for sid in ids])
        lons = np.array([registry[sid].lon for sid in ids])
        frames[month] = FeatureFrame(month=month, ids=ids,
                                     raw=builder.feature_matrix(ids, lats, lons, month))

    train_rows = np.array([frames[s.month].row(s.station_id) for s in split.train])
    feature_scaler = MinMaxScaler.fit(train_rows)
    train_ages = np.array([[max(0, s.month.index - first_active[s.station_id].index)]
                           for s in split.train], dtype=float)
    age_scaler = MinMaxScaler.fit(train_ages)
    target_scaler = MinMaxScaler.fit(np.array([[s.y_out, s.y_in] for s in split.train]))

    data = ExperimentData(stations=registry, split=split, frames=frames, graphs={},
                          feature_scaler=feature_scaler, age_scaler=age_scaler,
                          target_scaler=target_scaler, first_active=first_active,
                          graph_config=config.graph)

    graph_config = config.graph
    if graph_config.sigma_scope == "global" and (graph_config.sigma_d is None
                                                 or graph_config.sigma_b is None):
        graph_config = _with_global_sigmas(graph_config, frames, data, train_end)
        data.graph_config = graph_config
    for month, frame in frames.items():
        lats = np.array([registry[sid].lat for sid in frame.ids])
        lons = np.array([registry[sid].lon for sid in frame.ids])
        data.graphs[month] = build_localized_graphs(
            frame.ids, lats, lons, data.normalized(month), graph_config)
    return data


def _with_global_sigmas(config: GraphBuilderConfig, frames, data,
                        train_end: Month) -> GraphBuilderConfig:
    """Pool pairwise distances over training months into one sigma each."""
    from .geo import pairwise_haversine
    geo_vals, feat_vals = [], []
    for month, frame in frames.items():
        if month > train_end:
            continue
        lats = np.array([data.stations[sid].lat for sid in frame.ids])
        lons = np.array([data.stations[sid].lon for sid in frame.ids])
        iu = np.triu_indices(len(frame.ids), k=1)
        geo_vals.append(pairwise_haversine(lats, lons)[iu])
        norm = data.normalized(month)
        diff = norm[:, None, :] - norm[None, :, :]
        feat_vals.append(np.sqrt((diff ** 2).sum(axis=2))[iu])
    sigma_d = float(np.concatenate(geo_vals).std())
    sigma_b = float(np.concatenate(feat_vals).std())
    return GraphBuilderConfig(k=config.k, sigma_d=config.sigma_d or sigma_d,
                              sigma_b=config.sigma_b or sigma_b, sigma_scope="global")


def make_batch(samples: Sequence[MonthlySample], data: ExperimentData,
               model_config: ModelConfig, with_targets: bool = True) -> ModelBatch:
    """Tensorize samples for the neural forward pass."""
    n = len(samples)
    k = model_config.k
    kinds = model_config.graph_kinds
    x_center = np.empty((n, FEATURE_DIM))
    month_index = np.empty(n, dtype=np.intp)
    age = np.empty((n, 1))
    y_norm = np.empty((n, 2)) if with_targets else None
    neighbors = {kind: np.zeros((n, k, FEATURE_DIM)) for kind in kinds}
    mask = {kind: np.zeros((n, k)) for kind in kinds}
    kernel = {kind: np.zeros((n, k)) for kind in kinds}
    keys = []
    for i, s in enumerate(samples):
        frame = data.frames[s.month]
        norm = data.normalized(s.month)
        x_center[i] = norm[frame.index[s.station_id]]
        month_index[i] = s.month.month_index
        age[i, 0] = data.age_scaler.transform(
            np.array([[float(data.age_of(s.station_id, s.month))]]))[0, 0]
        if with_targets:
            y_norm[i] = data.target_scaler.transform(np.array([[s.y_out, s.y_in]]))[0]
        for kind in kinds:
            g = data.graphs[s.month].by_kind(kind)[s.station_id]
            nn_count = len(g.neighbors)
            if nn_count == 0:
                continue
            rows = [frame.index[nid] for nid in g.neighbors]
            neighbors[kind][i, :nn_count] = norm[rows]
            mask[kind][i, :nn_count] = 1.0
            kernel[kind][i, :nn_count] = normalized_kernel_weights(g)
        keys.append((s.station_id, s.month))
    return ModelBatch(x_center=x_center, month_index=month_index, age=age, y=y_norm,
                      neighbors=neighbors, neighbor_mask=mask, kernel_norm=kernel,
                      sample_keys=keys)


@dataclass
class TrainedModel:
    run_config: TrainRunConfig
    params: Params | None = None
    linear: LinearModel | None = None
    feature_scaler: MinMaxScaler | None = None
    age_scaler: MinMaxScaler | None = None
    target_scaler: MinMaxScaler | None = None
    log: list[dict] = field(default_factory=list)
    best_epoch: int | None = None

    @property
    def variant(self) -> str:
        return self.run_config.variant

    @property
    def model_config(self) -> ModelConfig:
        return self.run_config.model

    def predict(self, samples: Sequence[MonthlySample],
                data: ExperimentData) -> np.ndarray:
        """Predictions in trips/day (raw, unclipped), shape (n, 2)."""
        if self.linear is not None:
            X = build_linear_design(
                samples, data.feature_of,
                {m: mg.proximity for m, mg in data.graphs.items()},
                data.age_of, include_lag=self.variant == "slx")
            return self.linear.predict(X)
        batch = make_batch(samples, data, self.model_config, with_targets=False)
        pred, _ = forward(self.params, self.model_config, batch)
        return self.target_scaler.inverse_transform(pred.data)


def train(config: TrainRunConfig, data: ExperimentData) -> TrainedModel:
    """One seeded training run returning the best-validation model."""
    if config.variant in LINEAR_VARIANTS:
        estimator = config.slx_estimator if config.variant == "slx" else "ols"
        linear = fit_linear_model(
            config.variant, data.split.train, data.feature_of,
            {m: mg.proximity for m, mg in data.graphs.items()},
            data.age_of, estimator=estimator)
        return TrainedModel(run_config=config, linear=linear,
                            feature_scaler=data.feature_scaler,
                            age_scaler=data.age_scaler,
                            target_scaler=data.target_scaler)

    rng = np.random.default_rng(config.seed)
    params = init_params(config.model, rng)
    opt = Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    train_batch = make_batch(data.split.train, data, config.model)
    val_batch = make_batch(data.split.validation, data, config.model)
    n = len(train_batch)

    best_val = np.inf
    best_state = params.state()
    best_epoch = 0
    stall = 0
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            batch = train_batch.take(idx)
            params.zero_grad()
            pred, _ = forward(params, config.model, batch)
            loss = loss_sse(pred, batch.y)
            if not np.isfinite(loss.item()):
                bad = [f"{sid}@{month}" for sid, month in batch.sample_keys]
                raise RuntimeError(f"non-finite loss at epoch {epoch}; batch: {bad}")
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
        val_pred, _ = forward(params, config.model, val_batch)
        val_loss = loss_sse(val_pred, val_batch.y).item()
        history.append({"epoch": epoch, "train_loss": epoch_loss, "val_loss": val_loss})
        if val_loss < best_val:
            best_val = val_loss
            best_state = params.state()
            best_epoch = epoch
            stall = 0
        else:
            stall += 1
            if stall >= config.patience:
                break
    params.load_state(best_state)
    return TrainedModel(run_config=config, params=params,
                        feature_scaler=data.feature_scaler,
                        age_scaler=data.age_scaler,
                        target_scaler=data.target_scaler,
                        log=history, best_epoch=best_epoch)


# ---------------------------------------------------------------------------
# Metrics

def rmse(pred: np.ndarray, true: np.ndarray) -> float:
    return float(np.sqrt(np.mean((pred - true) ** 2)))


def mae(pred: np.ndarray, true: np.ndarray) -> float:
    return float(np.mean(np.abs(pred - true)))


def r_squared(pred: np.ndarray, true: np.ndarray) -> float:
    ss_res = float(((true - pred) ** 2).sum())
    ss_tot = float(((true - true.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return 1.0 - ss_res / ss_tot


def metric_block(pred: np.ndarray, true: np.ndarray) -> dict:
    """Pooled (out+in concatenated) and per-direction metrics."""
    pool_p = np.concatenate([pred[:, 0], pred[:, 1]])
    pool_t = np.concatenate([true[:, 0], true[:, 1]])
    return {
        "rmse": rmse(pool_p, pool_t),
        "mae": mae(pool_p, pool_t),
        "r2": r_squared(pool_p, pool_t),
        "rmse_out": rmse(pred[:, 0], true[:, 0]),
        "rmse_in": rmse(pred[:, 1], true[:, 1]),
        "n_samples": int(pred.shape[0]),
    }


def evaluate(trained: TrainedModel, data: ExperimentData) -> dict:
    """Metrics per split in trips/day; empty splits report None."""
    out = {}
    for name, samples in (("new", data.split.test_new),
                          ("existing", data.split.test_existing),
                          ("validation", data.split.validation)):
        if not samples:
            out[name] = None
            continue
        pred = trained.predict(samples, data)
        true = np.array([[s.y_out, s.y_in] for s in samples])
        out[name] = metric_block(pred, true)
    return out


@dataclass
class EvalReport:
    config: TrainRunConfig
    runs: list[dict]
    mean: dict
    sigma_scope: str
    elapsed_seconds: float

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "metric_pooling": "outflow and inflow concatenated per split",
            "sigma_scope": self.sigma_scope,
            "elapsed_seconds": self.elapsed_seconds,
            "runs": self.runs,
            "mean": self.mean,
        }

    def write_json(self, path: Path | str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def write_runs_csv(self, path: Path | str) -> None:
        """Per-run metric rows for box-plot style comparisons."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["run", "seed", "split", "rmse", "mae", "r2"])
            for i, run in enumerate(self.runs):
                for split in ("new", "existing"):
                    block = run[split]
                    if block:
                        writer.writerow([i, run["seed"], split, block["rmse"],
                                         block["mae"], block["r2"]])


def run_experiment(config: TrainRunConfig, data: ExperimentData) -> EvalReport:
    """Repeat train+evaluate n_runs times with derived seeds; mean metrics."""
    t0 = time.time()
    runs = []
    for i in range(config.n_runs):
        run_config = TrainRunConfig.from_dict(config.to_dict())
        run_config.seed = config.seed + i
        trained = train(run_config, data)
        result = evaluate(trained, data)
        result["seed"] = run_config.seed
        result["best_epoch"] = trained.best_epoch
        runs.append(result)
        log.info("run %d/%d (seed %d): %s", i + 1, config.n_runs, run_config.seed,
                 {k: round(v["rmse"], 3) for k, v in result.items()
                  if isinstance(v, dict)})
    mean = {}
    for split in ("new", "existing", "validation"):
        blocks = [r[split] for r in runs if r[split]]
        if blocks:
            mean[split] = {key: float(np.mean([b[key] for b in blocks]))
                           for key in ("rmse", "mae", "r2")}
        else:
            mean[split] = None
    return EvalReport(config=config, runs=runs, mean=mean,
                      sigma_scope=data.graph_config.sigma_scope,
                      elapsed_seconds=time.time() - t0)


# ---------------------------------------------------------------------------
# Persistence

def save_trained(path: Path | str, trained: TrainedModel) -> None:
    meta = {
        "run_config": trained.run_config.to_dict(),
        "feature_scaler": trained.feature_scaler.to_dict(),
        "age_scaler": trained.age_scaler.to_dict(),
        "target_scaler": trained.target_scaler.to_dict(),
        "log": trained.log,
        "best_epoch": trained.best_epoch,
    }
    if trained.linear is not None:
        meta["linear_columns"] = list(trained.linear.columns)
        meta["linear_jittered"] = trained.linear.jittered
        state = {"linear.coef": trained.linear.coef}
    else:
        state = trained.params.state()
    save_checkpoint(path, state, meta)


def load_trained(path: Path | str) -> TrainedModel:
    state, meta = load_checkpoint(path)
    config = TrainRunConfig.from_dict(meta["run_config"])
    trained = TrainedModel(
        run_config=config,
        feature_scaler=MinMaxScaler.from_dict(meta["feature_scaler"]),
        age_scaler=MinMaxScaler.from_dict(meta["age_scaler"]),
        target_scaler=MinMaxScaler.from_dict(meta["target_scaler"]),
        log=meta.get("log", []),
        best_epoch=meta.get("best_epoch"),
    )
    if "linear.coef" in state:
        trained.linear = LinearModel(
            variant=config.variant, coef=state["linear.coef"],
            columns=tuple(meta["linear_columns"]),
            jittered=meta.get("linear_jittered", False))
    else:
        rng = np.random.default_rng(0)
        params = init_params(config.model, rng)
        params.load_state(state)
        trained.params = params
    return trained


def load_data_dir(data_dir: Path | str):
    """Read the conventional data directory layout.

    <dir>/stations.csv, <dir>/samples.csv (or trips.csv), and
    <dir>/layers/*.geojson. An optional <dir>/config.json can remap trip CSV
    column names ("trip_columns") and set the civil-day timezone.
    """
    from .data import DEFAULT_TZ, TripColumns, aggregate_all_months, ingest_trips
    from .geo import load_layers
    data_dir = Path(data_dir)
    columns = TripColumns()
    tz = DEFAULT_TZ
    config_path = data_dir / "config.json"
    if config_path.exists():
        with open(config_path) as fh:
            doc = json.load(fh)
        if doc.get("trip_columns"):
            columns = TripColumns(**doc["trip_columns"])
        tz = doc.get("timezone", tz)
    stations = read_station_registry(data_dir / "stations.csv")
    samples_path = data_dir / "samples.csv"
    if samples_path.exists():
        samples = read_samples(samples_path)
    else:
        trips_path = data_dir / "trips.csv"
        if not trips_path.exists():
            raise ConfigError(f"{data_dir} has neither samples.csv nor trips.csv")
        result = ingest_trips(trips_path, columns=columns)
        samples = aggregate_all_months(result.records, tz=tz)
    layers = load_layers(data_dir / "layers")
    return stations, samples, layers
