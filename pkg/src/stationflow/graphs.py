"""Localized k-NN graphs over stations, one per relation kind.

Each active station gets two neighborhoods per month: the k geographically
nearest stations and the k stations with the most similar (normalized)
built-environment features. Edge weights are Gaussian kernels of the
underlying distance, with the bandwidth defaulting to the population
standard deviation of all pairwise distances in scope.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .common import ConfigError
from .geo import pairwise_haversine

log = logging.getLogger(__name__)

PROXIMITY = "proximity"
SIMILARITY = "similarity"


@dataclass(frozen=True)
class LocalizedGraph:
    center: str
    kind: str
    neighbors: tuple[str, ...]
    distances: tuple[float, ...]
    kernel_weights: tuple[float, ...]


@dataclass
class GraphBuilderConfig:
    k: int = 5
    sigma_d: float | None = None       # meters; None = from sigma_scope
    sigma_b: float | None = None       # feature units; None = from sigma_scope
    sigma_scope: str = "per_month"     # "per_month" or "global"

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.sigma_d is not None and self.sigma_d <= 0:
            raise ConfigError("sigma_d must be positive")
        if self.sigma_b is not None and self.sigma_b <= 0:
            raise ConfigError("sigma_b must be positive")
        if self.sigma_scope not in ("per_month", "global"):
            raise ConfigError(f"unknown sigma_scope {self.sigma_scope!r}")


@dataclass
class MonthGraphs:
    """Both graph kinds for one month's active station set."""
    ids: tuple[str, ...]
    sigma_d: float
    sigma_b: float
    proximity: dict[str, LocalizedGraph]
    similarity: dict[str, LocalizedGraph]

    def by_kind(self, kind: str) -> dict[str, LocalizedGraph]:
        return self.proximity if kind == PROXIMITY else self.similarity


def proximity_weight(d: float, sigma_d: float) -> float:
    """exp(-(d/sigma)^2) in (0, 1]."""
    if sigma_d <= 0:
        raise ConfigError("sigma_d must be positive")
    return math.exp(-((d / sigma_d) ** 2))


def similarity_weight(x_i: np.ndarray, x_j: np.ndarray, sigma_b: float) -> float:
    if x_i.shape != x_j.shape:
        raise ConfigError(f"feature dimension mismatch: {x_i.shape} vs {x_j.shape}")
    if sigma_b <= 0:
        raise ConfigError("sigma_b must be positive")
    d = float(np.linalg.norm(x_i - x_j))
    return math.exp(-((d / sigma_b) ** 2))


def pairwise_std(dist: np.ndarray) -> float:
    """Population standard deviation of the unordered pairwise distances."""
    iu = np.triu_indices(dist.shape[0], k=1)
    vals = dist[iu]
    return float(vals.std()) if vals.size else 0.0


def knn_from_matrix(ids: Sequence[str], dist: np.ndarray, k: int, kind: str,
                    sigma: float) -> dict[str, LocalizedGraph]:
    """k nearest neighbors per row; ties broken by ascending station id."""
    n = len(ids)
    id_rank = np.argsort(np.argsort(np.asarray(ids, dtype=object)))
    graphs = {}
    for i, sid in enumerate(ids):
        row = dist[i].copy()
        row[i] = np.inf
        order = np.lexsort((id_rank, row))
        take = order[:min(k, n - 1)]
        neigh = tuple(ids[j] for j in take)
        d = tuple(float(row[j]) for j in take)
        if sigma > 0:
            w = tuple(math.exp(-((dj / sigma) ** 2)) for dj in d)
        else:
            w = tuple(1.0 for _ in d)
        graphs[sid] = LocalizedGraph(center=sid, kind=kind, neighbors=neigh,
                                     distances=d, kernel_weights=w)
    return graphs


def build_localized_graphs(ids: Sequence[str], lats: np.ndarray, lons: np.ndarray,
                           features: np.ndarray,
                           config: GraphBuilderConfig) -> MonthGraphs:
    """Both localized graphs for every station in one month's active set.

    `features` rows must already be normalized with the training scaler.
    With a single active station both graphs are empty (warning logged).
    """
    ids = tuple(ids)
    n = len(ids)
    if n == 0:
        raise ConfigError("no active stations")
    if n == 1:
        log.warning("single active station %s: empty neighborhoods", ids[0])
        empty = {ids[0]: LocalizedGraph(ids[0], PROXIMITY, (), (), ())}
        empty_b = {ids[0]: LocalizedGraph(ids[0], SIMILARITY, (), (), ())}
        return MonthGraphs(ids=ids, sigma_d=0.0, sigma_b=0.0,
                           proximity=empty, similarity=empty_b)

    geo_dist = pairwise_haversine(np.asarray(lats), np.asarray(lons))
    sigma_d = config.sigma_d if config.sigma_d is not None else pairwise_std(geo_dist)

    diff = features[:, None, :] - features[None, :, :]
    feat_dist = np.sqrt((diff ** 2).sum(axis=2))
    sigma_b = config.sigma_b if config.sigma_b is not None else pairwise_std(feat_dist)

    return MonthGraphs(
        ids=ids,
        sigma_d=sigma_d,
        sigma_b=sigma_b,
        proximity=knn_from_matrix(ids, geo_dist, config.k, PROXIMITY, sigma_d),
        similarity=knn_from_matrix(ids, feat_dist, config.k, SIMILARITY, sigma_b),
    )


def build_proximity_graphs(ids: Sequence[str], lats: np.ndarray, lons: np.ndarray,
                           k: int, sigma_d: float | None = None) -> tuple[dict[str, LocalizedGraph], float]:
    """Proximity graphs only (no features needed); returns (graphs, sigma)."""
    ids = tuple(ids)
    if len(ids) < 2:
        return ({sid: LocalizedGraph(sid, PROXIMITY, (), (), ()) for sid in ids}, 0.0)
    dist = pairwise_haversine(np.asarray(lats), np.asarray(lons))
    sigma = sigma_d if sigma_d is not None else pairwise_std(dist)
    return knn_from_matrix(ids, dist, k, PROXIMITY, sigma), sigma


def normalized_kernel_weights(graph: LocalizedGraph) -> np.ndarray:
    """Kernel weights rescaled to sum to one over the neighbor set."""
    w = np.asarray(graph.kernel_weights, dtype=float)
    if w.size == 0:
        return w
    total = w.sum()
    if total <= 0.0:
        raise ConfigError(f"graph for {graph.center} has all-zero kernel weights")
    return w / total


def write_graph_csv(path: Path | str, months: dict) -> None:
    """Graph export: center_id, kind, rank, neighbor_id, distance, kernel_weight, month."""
    with open(path, "w") as fh:
        fh.write("center_id,kind,rank,neighbor_id,distance,kernel_weight,month\n")
        for month, mg in sorted(months.items(), key=lambda kv: str(kv[0])):
            for graphs in (mg.proximity, mg.similarity):
                for sid in mg.ids:
                    g = graphs[sid]
                    for rank, (nid, d, w) in enumerate(
                            zip(g.neighbors, g.distances, g.kernel_weights)):
                        fh.write(f"{sid},{g.kind},{rank},{nid},{d!r},{w!r},{month}\n")
