"""Station demand models: multi-graph attention nets and linear baselines.

The neural family shares one architecture: per-graph linear encoders over
neighbor features, pairwise attention scores normalized per center, a
learned month embedding plus normalized station age, and a three-layer
output stack predicting (outflow, inflow). Variants differ only in which
graph branches exist ("mgat" both, "pgat"/"bgat" one, "fnn" none) or in
replacing attention with fixed kernel weights ("mgcn"). "linreg" and
"slx" are least-squares baselines over an explicit design matrix.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .common import ConfigError, Month
from .data import MonthlySample
from .geo import FEATURE_DIM
from .graphs import LocalizedGraph, normalized_kernel_weights
from . import nn
from .nn import Params, Tensor

log = logging.getLogger(__name__)

VARIANTS = ("mgat", "mgcn", "pgat", "bgat", "fnn", "linreg", "slx")
NEURAL_VARIANTS = ("mgat", "mgcn", "pgat", "bgat", "fnn")
LINEAR_VARIANTS = ("linreg", "slx")
ATTENTION_VARIANTS = ("mgat", "pgat", "bgat")


@dataclass
class ModelConfig:
    variant: str = "mgat"
    k: int = 5
    d_h: int = 8
    d_z: int = 16
    d_m: int = 12
    d_o1: int = 32
    d_o2: int = 16
    share_graph_encoders: bool = False
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        for name in ("k", "d_h", "d_z", "d_m", "d_o1", "d_o2"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def graph_kinds(self) -> tuple[str, ...]:
        return {
            "mgat": ("proximity", "similarity"),
            "mgcn": ("proximity", "similarity"),
            "pgat": ("proximity",),
            "bgat": ("similarity",),
        }.get(self.variant, ())

    @property
    def input_width(self) -> int:
        return FEATURE_DIM + len(self.graph_kinds) * self.d_h + self.d_m + 1

    def encoder_key(self, kind: str) -> str:
        return "shared" if self.share_graph_encoders else kind

    def to_dict(self) -> dict:
        return {
            "variant": self.variant, "k": self.k, "d_h": self.d_h, "d_z": self.d_z,
            "d_m": self.d_m, "d_o1": self.d_o1, "d_o2": self.d_o2,
            "share_graph_encoders": self.share_graph_encoders,
            "leaky_slope": self.leaky_slope,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def init_params(config: ModelConfig, rng: np.random.Generator) -> Params:
    """Fresh parameters for a neural variant, uniformly initialized."""
    if config.variant not in NEURAL_VARIANTS:
        raise ConfigError(f"{config.variant!r} has no neural parameters")
    p = Params()
    keys = sorted({config.encoder_key(k) for k in config.graph_kinds})
    for key in keys:
        p.add(f"encoder.{key}.weight", nn.affine_init(rng, FEATURE_DIM, (FEATURE_DIM, config.d_h)))
        p.add(f"encoder.{key}.bias", nn.affine_init(rng, FEATURE_DIM, (config.d_h,)))
        if config.variant in ATTENTION_VARIANTS:
            p.add(f"attention.{key}.pair.weight",
                  nn.affine_init(rng, 2 * config.d_h, (2 * config.d_h, config.d_z)))
            p.add(f"attention.{key}.pair.bias",
                  nn.affine_init(rng, 2 * config.d_h, (config.d_z,)))
            p.add(f"attention.{key}.score.weight",
                  nn.affine_init(rng, config.d_z, (config.d_z, 1)))
            p.add(f"attention.{key}.score.bias",
                  nn.affine_init(rng, config.d_z, (1,)))
    p.add("month_embedding", nn.embedding_init(rng, (12, config.d_m)))
    width = config.input_width
    p.add("output.l1.weight", nn.affine_init(rng, width, (width, config.d_o1)))
    p.add("output.l1.bias", nn.affine_init(rng, width, (config.d_o1,)))
    p.add("output.l2.weight", nn.affine_init(rng, config.d_o1, (config.d_o1, config.d_o2)))
    p.add("output.l2.bias", nn.affine_init(rng, config.d_o1, (config.d_o2,)))
    p.add("output.l3.weight", nn.affine_init(rng, config.d_o2, (config.d_o2, 2)))
    p.add("output.l3.bias", nn.affine_init(rng, config.d_o2, (2,)))
    return p


@dataclass
class ModelBatch:
    """Tensorized samples: everything a forward pass consumes."""
    x_center: np.ndarray                      # (B, 43) normalized
    month_index: np.ndarray                   # (B,) ints 0..11
    age: np.ndarray                           # (B, 1) normalized
    y: np.ndarray | None                      # (B, 2) normalized targets
    neighbors: dict[str, np.ndarray] = field(default_factory=dict)        # kind -> (B, K, 43)
    neighbor_mask: dict[str, np.ndarray] = field(default_factory=dict)    # kind -> (B, K)
    kernel_norm: dict[str, np.ndarray] = field(default_factory=dict)      # kind -> (B, K), rows sum to 1
    sample_keys: list[tuple[str, Month]] = field(default_factory=list)

    def __len__(self) -> int:
        return self.x_center.shape[0]

    def take(self, idx: np.ndarray) -> "ModelBatch":
        return ModelBatch(
            x_center=self.x_center[idx],
            month_index=self.month_index[idx],
            age=self.age[idx],
            y=self.y[idx] if self.y is not None else None,
            neighbors={k: v[idx] for k, v in self.neighbors.items()},
            neighbor_mask={k: v[idx] for k, v in self.neighbor_mask.items()},
            kernel_norm={k: v[idx] for k, v in self.kernel_norm.items()},
            sample_keys=[self.sample_keys[i] for i in idx] if self.sample_keys else [],
        )


def forward(params: Params, config: ModelConfig, batch: ModelBatch,
            capture_attention: bool = False):
    """Batched prediction (B, 2) in normalized units.

    Returns (Tensor, attention) where attention maps graph kind to the
    (B, K) weight array actually used (captured post-softmax).
    """
    B = len(batch)
    x_c = Tensor(batch.x_center)
    branches: list[Tensor] = [x_c]
    attention: dict[str, np.ndarray] = {}

    for kind in config.graph_kinds:
        key = config.encoder_key(kind)
        W = params[f"encoder.{key}.weight"]
        b = params[f"encoder.{key}.bias"]
        xn = batch.neighbors[kind]
        mask = batch.neighbor_mask[kind]
        K = xn.shape[1]
        hn_flat = nn.add(nn.matmul(Tensor(xn.reshape(B * K, FEATURE_DIM)), W), b)
        hn = nn.reshape(hn_flat, (B, K, config.d_h))
        if config.variant == "mgcn":
            eps = batch.kernel_norm[kind]
            weighted = nn.mul(Tensor(eps[:, :, None]), hn)
        else:
            hc = nn.add(nn.matmul(x_c, W), b)
            rep = np.repeat(np.arange(B), K)
            pair = nn.concat([nn.gather_rows(hc, rep), hn_flat], axis=1)
            z = nn.relu(nn.add(nn.matmul(pair, params[f"attention.{key}.pair.weight"]),
                               params[f"attention.{key}.pair.bias"]))
            scores = nn.leaky_relu(
                nn.add(nn.matmul(z, params[f"attention.{key}.score.weight"]),
                       params[f"attention.{key}.score.bias"]),
                config.leaky_slope)
            eps_t = nn.masked_softmax(nn.reshape(scores, (B, K)), mask)
            if capture_attention:
                attention[kind] = eps_t.data.copy()
            weighted = nn.mul(nn.reshape(eps_t, (B, K, 1)), hn)
        branches.append(nn.reduce_sum(weighted, axis=1))

    emb = nn.gather_rows(params["month_embedding"], batch.month_index)
    branches.append(nn.concat([emb, Tensor(batch.age)], axis=1))
    stacked = nn.concat(branches, axis=1)
    z1 = nn.relu(nn.add(nn.matmul(stacked, params["output.l1.weight"]),
                        params["output.l1.bias"]))
    z2 = nn.sigmoid(nn.add(nn.matmul(z1, params["output.l2.weight"]),
                           params["output.l2.bias"]))
    pred = nn.add(nn.matmul(z2, params["output.l3.weight"]), params["output.l3.bias"])
    return pred, attention


def loss_sse(pred: Tensor, targets: np.ndarray) -> Tensor:
    """Sum of squared errors over all samples and both flow directions."""
    if pred.shape != targets.shape:
        raise ConfigError(f"prediction/target shape mismatch: {pred.shape} vs {targets.shape}")
    return nn.reduce_sum(nn.square(nn.sub(pred, Tensor(targets))))


# ---------------------------------------------------------------------------
# Single-sample reference path (export, oracles, small-scale serving)

def encode_neighbors(weight: np.ndarray, bias: np.ndarray,
                     features: np.ndarray) -> np.ndarray:
    """Shared linear encoding h = x W + b for one or many feature rows."""
    features = np.asarray(features, dtype=np.float64)
    if features.size and (features.min() < -4.0 or features.max() > 5.0):
        log.warning("encode_neighbors saw values far outside the normalized range")
    return features @ weight + bias


def attention_weights(params: Params, config: ModelConfig, kind: str,
                      h_center: np.ndarray, h_neighbors: np.ndarray,
                      neighbor_ids: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Per-neighbor scores and softmax weights for one center.

    Internally evaluated in neighbor-id order so results are bit-identical
    under any permutation of the input list; outputs align to input order.
    """
    n = len(neighbor_ids)
    if n == 0:
        return np.zeros(0), np.zeros(0)
    key = config.encoder_key(kind)
    order = np.argsort(np.asarray(neighbor_ids, dtype=object))
    h_sorted = np.asarray(h_neighbors, dtype=np.float64)[order]
    pair = np.concatenate([np.tile(h_center, (n, 1)), h_sorted], axis=1)
    z = np.maximum(pair @ params[f"attention.{key}.pair.weight"].data
                   + params[f"attention.{key}.pair.bias"].data, 0.0)
    raw = (z @ params[f"attention.{key}.score.weight"].data
           + params[f"attention.{key}.score.bias"].data)[:, 0]
    scores_sorted = np.where(raw > 0.0, raw, config.leaky_slope * raw)
    eps_sorted = nn.softmax(scores_sorted)
    scores = np.empty(n)
    eps = np.empty(n)
    scores[order] = scores_sorted
    eps[order] = eps_sorted
    return scores, eps


def aggregate_interaction(eps: np.ndarray, h_neighbors: np.ndarray,
                          neighbor_ids: Sequence[str]) -> np.ndarray:
    """Attention-weighted sum of neighbor encodings (center excluded).

    Summation runs in neighbor-id order for permutation-stable bits.
    """
    eps = np.asarray(eps, dtype=np.float64)
    h = np.asarray(h_neighbors, dtype=np.float64)
    if eps.shape[0] != h.shape[0]:
        raise ConfigError("attention weights and neighbor encodings disagree in length")
    if eps.size == 0:
        return np.zeros(0)
    order = np.argsort(np.asarray(neighbor_ids, dtype=object))
    return (eps[order, None] * h[order]).sum(axis=0)


def mgcn_aggregate(kernel_weights: np.ndarray, h_neighbors: np.ndarray) -> np.ndarray:
    """Fixed-weight aggregation: kernel weights normalized to sum to one."""
    w = np.asarray(kernel_weights, dtype=np.float64)
    h = np.asarray(h_neighbors, dtype=np.float64)
    if w.shape[0] != h.shape[0]:
        raise ConfigError("kernel weights and neighbor encodings disagree in length")
    total = w.sum()
    if total <= 0.0:
        raise ConfigError("all-zero kernel weights")
    return ((w / total)[:, None] * h).sum(axis=0)


def predict_single(params: Params, config: ModelConfig, x_center: np.ndarray,
                   interactions: Sequence[np.ndarray], month_index: int,
                   age_norm: float) -> np.ndarray:
    """Output stack on one sample given precomputed interaction vectors."""
    emb = params["month_embedding"].data[month_index]
    parts = [np.asarray(x_center, dtype=np.float64)]
    parts.extend(np.asarray(s, dtype=np.float64) for s in interactions)
    parts.append(emb)
    parts.append(np.array([age_norm]))
    stacked = np.concatenate(parts)
    z1 = np.maximum(stacked @ params["output.l1.weight"].data
                    + params["output.l1.bias"].data, 0.0)
    z2 = 1.0 / (1.0 + np.exp(-(z1 @ params["output.l2.weight"].data
                               + params["output.l2.bias"].data)))
    return z2 @ params["output.l3.weight"].data + params["output.l3.bias"].data


@dataclass
class AttentionEdge:
    center: str
    neighbor: str
    graph_kind: str
    score: float
    weight: float


def forward_single(params: Params, config: ModelConfig, x_center: np.ndarray,
                   graph_inputs: dict[str, tuple[Sequence[str], np.ndarray, np.ndarray]],
                   month_index: int, age_norm: float
                   ) -> tuple[np.ndarray, list[AttentionEdge]]:
    """Reference forward pass for one sample.

    `graph_inputs` maps kind -> (neighbor_ids, neighbor_features_normalized,
    kernel_weights). Returns normalized (out, in) and the attention edges.
    """
    interactions = []
    edges: list[AttentionEdge] = []
    for kind in config.graph_kinds:
        ids, feats, kernel = graph_inputs[kind]
        key = config.encoder_key(kind)
        W = params[f"encoder.{key}.weight"].data
        b = params[f"encoder.{key}.bias"].data
        if len(ids) == 0:
            interactions.append(np.zeros(config.d_h))
            continue
        h_n = encode_neighbors(W, b, feats)
        if config.variant == "mgcn":
            interactions.append(mgcn_aggregate(np.asarray(kernel), h_n))
            w_norm = np.asarray(kernel) / np.asarray(kernel).sum()
            for nid, wk in zip(ids, w_norm):
                edges.append(AttentionEdge(center="", neighbor=nid, graph_kind=kind,
                                           score=float(wk), weight=float(wk)))
        else:
            h_c = encode_neighbors(W, b, np.asarray(x_center))
            scores, eps = attention_weights(params, config, kind, h_c, h_n, ids)
            interactions.append(aggregate_interaction(eps, h_n, ids))
            for nid, s, e in zip(ids, scores, eps):
                edges.append(AttentionEdge(center="", neighbor=nid, graph_kind=kind,
                                           score=float(s), weight=float(e)))
    pred = predict_single(params, config, x_center, interactions, month_index, age_norm)
    return pred, edges


# ---------------------------------------------------------------------------
# Linear baselines (ordinary and spatial-lag regression)

MONTH_COLUMNS = tuple(f"month_{i + 1:02d}" for i in range(12))


def linear_design_columns(include_lag: bool) -> tuple[str, ...]:
    from .geo import FEATURE_NAMES
    cols = list(FEATURE_NAMES)
    if include_lag:
        cols += [f"lag_{name}" for name in FEATURE_NAMES]
    cols += list(MONTH_COLUMNS)
    cols += ["station_age", "intercept"]
    return tuple(cols)


def spatial_lag(graph: LocalizedGraph,
                feature_of: Callable[[str], np.ndarray]) -> np.ndarray:
    """Kernel-normalized weighted mean of neighbor feature vectors."""
    if not graph.neighbors:
        return np.zeros(FEATURE_DIM)
    w = normalized_kernel_weights(graph)
    return sum(wi * feature_of(nid) for wi, nid in zip(w, graph.neighbors))


def build_linear_design(samples: Sequence[MonthlySample],
                        feature_of: Callable[[str, Month], np.ndarray],
                        prox_graphs: dict[Month, dict[str, LocalizedGraph]] | None,
                        age_of: Callable[[str, Month], int],
                        include_lag: bool) -> np.ndarray:
    """Rows of [features, (spatial lag,) month one-hot, age, intercept]."""
    n = len(samples)
    width = FEATURE_DIM * (2 if include_lag else 1) + 12 + 2
    X = np.zeros((n, width))
    for i, s in enumerate(samples):
        x = feature_of(s.station_id, s.month)
        col = 0
        X[i, col:col + FEATURE_DIM] = x
        col += FEATURE_DIM
        if include_lag:
            graph = prox_graphs[s.month][s.station_id]
            X[i, col:col + FEATURE_DIM] = spatial_lag(
                graph, lambda nid: feature_of(nid, s.month))
            col += FEATURE_DIM
        X[i, col + s.month.month_index] = 1.0
        col += 12
        X[i, col] = age_of(s.station_id, s.month)
        X[i, col + 1] = 1.0
    return X


def fit_ols(X: np.ndarray, Y: np.ndarray,
            jitter: float = 1e-8) -> tuple[np.ndarray, bool]:
    """Normal-equations least squares; ridge jitter on singular systems.

    Columns are equilibrated to unit max-abs before forming the normal
    equations (raw feature scales differ by orders of magnitude), then the
    solution is mapped back. Returns (coefficients, jitter_applied).
    """
    scale = np.abs(X).max(axis=0)
    scale[scale == 0.0] = 1.0
    Xs = X / scale
    A = Xs.T @ Xs
    B = Xs.T @ Y
    eig = np.linalg.eigvalsh(A)
    singular = bool(eig[0] <= 1e-10 * max(eig[-1], 1.0))
    A_solve = A
    if singular:
        log.warning("design matrix is rank deficient; solving with ridge jitter %g", jitter)
        A_solve = A + jitter * np.eye(A.shape[0])
    coef = np.linalg.solve(A_solve, B)
    if singular:
        # Iterative refinement strips the ridge bias from the informative
        # directions; the null-space residual stays zero so nothing blows up.
        for _ in range(3):
            coef = coef + np.linalg.solve(A_solve, B - A @ coef)
    if coef.ndim > 1:
        return coef / scale[:, None], singular
    return coef / scale, singular


class GdDivergence(RuntimeError):
    pass


def fit_gd(X: np.ndarray, Y: np.ndarray, tol: float = 1e-8,
           max_iter: int = 2_000_000) -> np.ndarray:
    """Full-batch gradient descent on the squared loss, to convergence.

    Columns are equilibrated first (diagonal preconditioning); iterations
    use heavy-ball momentum with the step size and momentum coefficient set
    from the extreme curvature of the quadratic, which is what makes the
    gradient-norm tolerance reachable on badly conditioned designs. The
    iterate starts at zero, so rank-deficient directions stay at their
    minimum-norm value. Fifty consecutive loss increases abort.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    scale = np.linalg.norm(X, axis=0)
    scale[scale == 0.0] = 1.0
    Xs = X / scale
    A = Xs.T @ Xs
    eig = np.linalg.eigvalsh(A)
    lam_max = float(eig[-1])
    positive = eig[eig > 1e-12 * lam_max]
    lam_min = float(positive[0]) if positive.size else lam_max
    # the loss Hessian is 2A
    L = 2.0 * lam_max
    kappa = lam_max / lam_min
    beta = (math.sqrt(kappa) - 1.0) / (math.sqrt(kappa) + 1.0)

    coef = np.empty((X.shape[1], Y.shape[1]))
    for col in range(Y.shape[1]):
        b = Xs.T @ Y[:, col]
        w = np.zeros(X.shape[1])
        y = w
        prev_loss = np.inf
        rises = 0
        gnorm = np.inf
        for it in range(max_iter):
            g = 2.0 * (A @ y - b)
            gnorm = float(np.linalg.norm(g))
            if gnorm < tol:
                w = y
                break
            w_next = y - g / L
            y = w_next + beta * (w_next - w)
            w = w_next
            if it % 200 == 0:
                loss = w @ (A @ w) - 2.0 * (b @ w)
                if loss > prev_loss:
                    rises += 1
                    if rises >= 50:
                        raise GdDivergence(
                            f"gradient descent diverged on column {col}: "
                            f"iteration {it}, loss {loss:.6g}, grad norm {gnorm:.3g}")
                else:
                    rises = 0
                prev_loss = loss
        else:
            log.warning("gradient descent stopped at max_iter with grad norm %.3g",
                        gnorm)
        coef[:, col] = w / scale
    return coef


@dataclass
class LinearModel:
    variant: str
    coef: np.ndarray                     # (D, 2): outflow and inflow columns
    columns: tuple[str, ...]
    jittered: bool = False

    def predict(self, X: np.ndarray) -> np.ndarray:
        return X @ self.coef


def fit_linear_model(variant: str, samples: Sequence[MonthlySample],
                     feature_of: Callable[[str, Month], np.ndarray],
                     prox_graphs: dict[Month, dict[str, LocalizedGraph]] | None,
                     age_of: Callable[[str, Month], int],
                     estimator: str = "ols") -> LinearModel:
    """OLS or gradient-descent fit of linreg/slx on raw-feature designs."""
    if variant not in LINEAR_VARIANTS:
        raise ConfigError(f"{variant!r} is not a linear variant")
    include_lag = variant == "slx"
    X = build_linear_design(samples, feature_of, prox_graphs, age_of, include_lag)
    Y = np.array([[s.y_out, s.y_in] for s in samples])
    if estimator == "ols":
        coef, jittered = fit_ols(X, Y)
    elif estimator == "gd":
        coef, jittered = fit_gd(X, Y), False
    else:
        raise ConfigError(f"unknown estimator {estimator!r}")
    return LinearModel(variant=variant, coef=coef,
                       columns=linear_design_columns(include_lag), jittered=jittered)
