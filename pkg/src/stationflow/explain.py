"""Model interpretation: sampled Shapley attributions and attention export.

The Shapley estimator is the weighted-least-squares scheme over feature
coalitions: absent players are imputed from background rows, coalition
values are regressed on membership indicators under the local-accuracy
constraint (base + sum of attributions = prediction, exactly, by
construction). Players are the target station's own 43 features plus
station age and the month (one categorical player); neighbor features and
both graphs stay frozen, so attributions explain the station's own
environment.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Sequence

import numpy as np

from .common import ConfigError, DataError, Month
from .data import MonthlySample
from .geo import FEATURE_DIM, FEATURE_NAMES
from .graphs import MonthGraphs
from .models import AttentionEdge, ModelBatch, forward, forward_single
from .training import FeatureFrame, TrainedModel

log = logging.getLogger(__name__)

PLAYER_NAMES: tuple[str, ...] = FEATURE_NAMES + ("station_age", "month")
N_PLAYERS = len(PLAYER_NAMES)


@dataclass
class Attribution:
    station_id: str
    month: Month
    feature_name: str
    shap_value: float
    base_value: float
    flow_direction: str                 # "out" or "in"
    feature_value: float


def _kernel_weight(m: int, s: int) -> float:
    return (m - 1) / (math.comb(m, s) * s * (m - s))


def _coalitions(m: int, n_coalitions: int,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Coalition matrix and regression weights.

    Enumerates every non-trivial coalition when the budget allows (the
    estimate is then exact); otherwise samples coalition sizes from the
    Shapley kernel and pairs each draw with its complement.
    """
    total = 2 ** m - 2 if m < 60 else np.inf
    if total <= n_coalitions:
        rows = []
        weights = []
        for s in range(1, m):
            w = _kernel_weight(m, s)
            for combo in combinations(range(m), s):
                z = np.zeros(m)
                z[list(combo)] = 1.0
                rows.append(z)
                weights.append(w)
        return np.array(rows), np.array(weights)

    sizes = np.arange(1, m)
    p = (m - 1) / (sizes * (m - sizes))
    p = p / p.sum()
    n_pairs = n_coalitions // 2
    Z = np.zeros((2 * n_pairs, m))
    drawn_sizes = rng.choice(sizes, size=n_pairs, p=p)
    for i, s in enumerate(drawn_sizes):
        members = rng.choice(m, size=s, replace=False)
        Z[2 * i, members] = 1.0
        Z[2 * i + 1] = 1.0 - Z[2 * i]
    return Z, np.ones(Z.shape[0])


def shap_values(predict_fn: Callable[[np.ndarray], np.ndarray],
                x: np.ndarray, background: np.ndarray,
                n_coalitions: int = 2048, seed: int = 0,
                chunk_rows: int = 16384) -> tuple[np.ndarray, np.ndarray]:
    """Shapley attributions for one player vector.

    `predict_fn` maps an (R, M) matrix of player rows to (R, T) outputs.
    Returns (phi, base) with phi shaped (M, T); for every output column,
    base + phi.sum() equals predict_fn(x) up to solver precision.
    """
    x = np.asarray(x, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    m = x.shape[0]
    if n_coalitions < m + 2:
        raise ConfigError(f"n_coalitions must be at least {m + 2} for {m} players")
    rng = np.random.default_rng(seed)
    Z, w = _coalitions(m, n_coalitions, rng)
    nb = background.shape[0]

    base = predict_fn(background).mean(axis=0)
    fx = predict_fn(x[None, :])[0]

    # nu[i] = mean over background of f(x masked by coalition i)
    nu = np.empty((Z.shape[0], fx.shape[0]))
    rows_per_coal = nb
    coals_per_chunk = max(1, chunk_rows // rows_per_coal)
    for lo in range(0, Z.shape[0], coals_per_chunk):
        zc = Z[lo:lo + coals_per_chunk]
        block = np.where(zc[:, None, :] > 0, x[None, None, :], background[None, :, :])
        preds = predict_fn(block.reshape(-1, m))
        nu[lo:lo + coals_per_chunk] = preds.reshape(zc.shape[0], nb, -1).mean(axis=1)

    # Constrained WLS: eliminate the last player via the local-accuracy
    # constraint, solve for the rest, back-substitute.
    gap = fx - base
    y = nu - base - Z[:, -1:] * gap
    A = Z[:, :-1] - Z[:, -1:]
    sw = np.sqrt(w)[:, None]
    phi_rest, *_ = np.linalg.lstsq(A * sw, y * sw, rcond=None)
    phi_last = gap - phi_rest.sum(axis=0)
    return np.vstack([phi_rest, phi_last]), base


# ---------------------------------------------------------------------------
# Wiring the estimator to trained models

def player_matrix(samples: Sequence[MonthlySample], frames: dict[Month, FeatureFrame],
                  first_active: dict[str, Month]) -> np.ndarray:
    """Rows of [43 raw features, raw age, month index] per sample."""
    rows = np.empty((len(samples), N_PLAYERS))
    for i, s in enumerate(samples):
        rows[i, :FEATURE_DIM] = frames[s.month].row(s.station_id)
        rows[i, FEATURE_DIM] = max(0, s.month.index - first_active[s.station_id].index)
        rows[i, FEATURE_DIM + 1] = s.month.month_index
    return rows


def make_predict_fn(trained: TrainedModel, frames: dict[Month, FeatureFrame],
                    graphs: dict[Month, MonthGraphs], station_id: str,
                    month: Month) -> Callable[[np.ndarray], np.ndarray]:
    """Raw trips/day prediction over player rows, graphs frozen.

    The explained station's neighborhoods (both kinds) are fixed; player
    rows only vary the center's own features, age and month.
    """
    frame = frames[month]
    if station_id not in frame.index:
        raise DataError(f"station {station_id} is not active in {month}")
    config = trained.model_config
    mg = graphs[month]
    norm_frame = trained.feature_scaler.transform(frame.raw)
    k = config.k
    neighbors = {}
    mask = {}
    kernel = {}
    for kind in config.graph_kinds:
        g = mg.by_kind(kind)[station_id]
        xn = np.zeros((k, FEATURE_DIM))
        mk = np.zeros(k)
        kw = np.zeros(k)
        count = len(g.neighbors)
        if count:
            xn[:count] = norm_frame[[frame.index[nid] for nid in g.neighbors]]
            mk[:count] = 1.0
            raw_w = np.asarray(g.kernel_weights)
            kw[:count] = raw_w / raw_w.sum()
        neighbors[kind] = xn
        mask[kind] = mk
        kernel[kind] = kw

    if trained.linear is not None:
        lag = {}
        if trained.variant == "slx":
            g = mg.proximity[station_id]
            raw_w = np.asarray(g.kernel_weights)
            if raw_w.size:
                lag_vec = (raw_w / raw_w.sum()) @ frame.raw[
                    [frame.index[nid] for nid in g.neighbors]]
            else:
                lag_vec = np.zeros(FEATURE_DIM)

        def predict_linear(rows: np.ndarray) -> np.ndarray:
            rows = np.atleast_2d(rows)
            n = rows.shape[0]
            X = np.zeros((n, trained.linear.coef.shape[0]))
            X[:, :FEATURE_DIM] = rows[:, :FEATURE_DIM]
            col = FEATURE_DIM
            if trained.variant == "slx":
                X[:, col:col + FEATURE_DIM] = lag_vec
                col += FEATURE_DIM
            months_idx = rows[:, FEATURE_DIM + 1].astype(int)
            X[np.arange(n), col + months_idx] = 1.0
            X[:, col + 12] = rows[:, FEATURE_DIM]
            X[:, col + 13] = 1.0
            return trained.linear.predict(X)
        return predict_linear

    def predict_neural(rows: np.ndarray) -> np.ndarray:
        rows = np.atleast_2d(rows)
        n = rows.shape[0]
        x_norm = trained.feature_scaler.transform(rows[:, :FEATURE_DIM])
        age_norm = trained.age_scaler.transform(rows[:, FEATURE_DIM:FEATURE_DIM + 1])
        batch = ModelBatch(
            x_center=x_norm,
            month_index=rows[:, FEATURE_DIM + 1].astype(np.intp),
            age=age_norm,
            y=None,
            neighbors={kind: np.broadcast_to(v, (n, k, FEATURE_DIM)).copy()
                       for kind, v in neighbors.items()},
            neighbor_mask={kind: np.broadcast_to(v, (n, k)).copy()
                           for kind, v in mask.items()},
            kernel_norm={kind: np.broadcast_to(v, (n, k)).copy()
                         for kind, v in kernel.items()},
        )
        pred, _ = forward(trained.params, config, batch)
        return trained.target_scaler.inverse_transform(pred.data)
    return predict_neural


def kernel_shap(trained: TrainedModel, frames: dict[Month, FeatureFrame],
                graphs: dict[Month, MonthGraphs], first_active: dict[str, Month],
                station_id: str, month: Month, background: np.ndarray,
                n_coalitions: int = 2048, seed: int = 0) -> list[Attribution]:
    """Attributions for one station-month, both flow directions."""
    frame = frames[month]
    x = np.empty(N_PLAYERS)
    x[:FEATURE_DIM] = frame.row(station_id)
    x[FEATURE_DIM] = max(0, month.index - first_active[station_id].index)
    x[FEATURE_DIM + 1] = month.month_index
    predict_fn = make_predict_fn(trained, frames, graphs, station_id, month)
    phi, base = shap_values(predict_fn, x, background, n_coalitions, seed)
    out = []
    for d, direction in enumerate(("out", "in")):
        for i, name in enumerate(PLAYER_NAMES):
            out.append(Attribution(station_id=station_id, month=month,
                                   feature_name=name, shap_value=float(phi[i, d]),
                                   base_value=float(base[d]),
                                   flow_direction=direction,
                                   feature_value=float(x[i])))
    return out


def sample_background(samples: Sequence[MonthlySample],
                      frames: dict[Month, FeatureFrame],
                      first_active: dict[str, Month], size: int = 100,
                      seed: int = 0) -> np.ndarray:
    """Seeded draw of training rows as the imputation background."""
    rng = np.random.default_rng(seed)
    take = rng.choice(len(samples), size=min(size, len(samples)), replace=False)
    return player_matrix([samples[i] for i in take], frames, first_active)


def export_attention(trained: TrainedModel, frames: dict[Month, FeatureFrame],
                     graphs: dict[Month, MonthGraphs], station_id: str,
                     month: Month) -> list[AttentionEdge]:
    """Attention edges (k per graph kind) for one station-month."""
    if month not in frames or station_id not in frames[month].index:
        raise DataError(f"station {station_id} is not active in {month}")
    if trained.params is None or not trained.model_config.graph_kinds:
        return []
    frame = frames[month]
    mg = graphs[month]
    norm = trained.feature_scaler.transform(frame.raw)
    config = trained.model_config
    graph_inputs = {}
    for kind in config.graph_kinds:
        g = mg.by_kind(kind)[station_id]
        rows = [frame.index[nid] for nid in g.neighbors]
        graph_inputs[kind] = (g.neighbors, norm[rows], np.asarray(g.kernel_weights))
    x_norm = norm[frame.index[station_id]]
    # Attention depends only on the encoded features, so the temporal inputs
    # of the discarded prediction can be anything.
    _, edges = forward_single(trained.params, config, x_norm, graph_inputs,
                              month.month_index, 0.0)
    for e in edges:
        e.center = station_id
    return edges


def rank_features(attributions: Sequence[Attribution]) -> list[dict]:
    """Global importance: features ordered by mean absolute attribution."""
    by_feature: dict[str, list[Attribution]] = {}
    for a in attributions:
        by_feature.setdefault(a.feature_name, []).append(a)
    table = []
    for name, rows in by_feature.items():
        vals = np.array([r.shap_value for r in rows])
        table.append({
            "feature": name,
            "mean_abs_shap": float(np.abs(vals).mean()),
            "mean_shap": float(vals.mean()),
            "n": len(rows),
        })
    table.sort(key=lambda r: -r["mean_abs_shap"])
    return table


def beeswarm_data(attributions: Sequence[Attribution], top: int = 30) -> dict:
    """Per-feature (value, shap) pairs for beeswarm-style plots."""
    ranked = rank_features(attributions)[:top]
    by_feature: dict[str, dict] = {}
    for row in ranked:
        by_feature[row["feature"]] = {"values": [], "shap": []}
    for a in attributions:
        if a.feature_name in by_feature:
            by_feature[a.feature_name]["values"].append(a.feature_value)
            by_feature[a.feature_name]["shap"].append(a.shap_value)
    return {"order": [r["feature"] for r in ranked], "features": by_feature}


def write_attribution_csv(path, attributions: Sequence[Attribution]) -> None:
    with open(path, "w") as fh:
        fh.write("station_id,month,direction,feature_name,shap_value,feature_value\n")
        for a in attributions:
            fh.write(f"{a.station_id},{a.month},{a.flow_direction},{a.feature_name},"
                     f"{a.shap_value!r},{a.feature_value!r}\n")


def write_attention_csv(path, edges: Sequence[AttentionEdge], month: Month) -> None:
    with open(path, "w") as fh:
        fh.write("center_id,neighbor_id,kind,score,weight,month\n")
        for e in edges:
            fh.write(f"{e.center},{e.neighbor},{e.graph_kind},{e.score!r},"
                     f"{e.weight!r},{month}\n")
