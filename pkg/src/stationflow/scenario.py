"""What-if expansion engine: apply station changes, re-predict the system.

A scenario adds candidate stations and/or removes active ones at a base
month. The engine rebuilds every network-dependent feature and both
localized graphs for the modified station set (exactly equivalent to a
from-scratch pipeline rebuild), runs the trained model over all stations,
and reports per-station predictions plus deltas against the cached
baseline. Scenario bodies and results persist in an embedded SQLite store
keyed by scenario id.
"""

from __future__ import annotations

import json
import logging
import sqlite3
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .common import DataError, Month
from .data import (DatasetSplit, MonthlySample, StationRecord, derive_lifecycle,
                   read_samples, read_station_registry)
from .explain import export_attention, kernel_shap, sample_background
from .geo import FeatureBuilder, LayerSet
from .graphs import GraphBuilderConfig, build_localized_graphs
from .models import AttentionEdge
from .training import ExperimentData, FeatureFrame, TrainedModel

log = logging.getLogger(__name__)


class ScenarioError(ValueError):
    """Scenario is malformed or incompatible with the loaded state."""


@dataclass(frozen=True)
class CandidateStation:
    id: str
    lat: float
    lon: float


@dataclass
class Scenario:
    base_month: Month
    additions: list[CandidateStation] = field(default_factory=list)
    removals: list[str] = field(default_factory=list)
    age_override: int = 0
    id: str = field(default_factory=lambda: uuid.uuid4().hex[:12])

    def to_dict(self) -> dict:
        return {
            "id": self.id, "base_month": str(self.base_month),
            "additions": [{"id": c.id, "lat": c.lat, "lon": c.lon}
                          for c in self.additions],
            "removals": list(self.removals),
            "age_override": self.age_override,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        return cls(
            base_month=Month.parse(d["base_month"]),
            additions=[CandidateStation(a["id"], float(a["lat"]), float(a["lon"]))
                       for a in d.get("additions", [])],
            removals=list(d.get("removals", [])),
            age_override=int(d.get("age_override", 0)),
            id=d.get("id") or uuid.uuid4().hex[:12],
        )


@dataclass
class StationPrediction:
    station_id: str
    lat: float
    lon: float
    is_candidate: bool
    y_out: float                        # served values, clipped at zero
    y_in: float
    raw_out: float                      # unclipped model output
    raw_in: float
    delta_out: float = 0.0              # vs baseline, pre-existing stations
    delta_in: float = 0.0


@dataclass
class ScenarioResult:
    scenario_id: str
    base_month: Month
    stations: list[StationPrediction]
    candidate_attention: list[AttentionEdge]
    sigma_changed: bool
    recompute_seconds: float
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "base_month": str(self.base_month),
            "sigma_changed": self.sigma_changed,
            "recompute_seconds": self.recompute_seconds,
            "warnings": self.warnings,
            "stations": [vars(s) for s in self.stations],
            "candidate_attention": [vars(e) for e in self.candidate_attention],
        }


@dataclass
class NetworkState:
    month: Month
    ids: tuple[str, ...]
    lats: np.ndarray
    lons: np.ndarray
    frame: FeatureFrame
    graphs: object
    raw_pred: np.ndarray                # (n, 2) trips/day, unclipped


class ScenarioStore:
    """SQLite persistence for scenarios and their results."""

    def __init__(self, path: Path | str = ":memory:"):
        self._conn = sqlite3.connect(str(path), check_same_thread=False)
        self._conn.execute(
            "CREATE TABLE IF NOT EXISTS scenarios ("
            "id TEXT PRIMARY KEY, body TEXT NOT NULL, result TEXT)")
        self._conn.commit()

    def put(self, scenario: Scenario) -> None:
        self._conn.execute(
            "INSERT OR REPLACE INTO scenarios (id, body, result) VALUES (?, ?, "
            "(SELECT result FROM scenarios WHERE id = ?))",
            (scenario.id, json.dumps(scenario.to_dict()), scenario.id))
        self._conn.commit()

    def put_result(self, scenario_id: str, result: ScenarioResult) -> None:
        self._conn.execute("UPDATE scenarios SET result = ? WHERE id = ?",
                           (json.dumps(result.to_dict()), scenario_id))
        self._conn.commit()

    def get(self, scenario_id: str) -> Scenario | None:
        row = self._conn.execute("SELECT body FROM scenarios WHERE id = ?",
                                 (scenario_id,)).fetchone()
        return Scenario.from_dict(json.loads(row[0])) if row else None

    def get_result(self, scenario_id: str) -> dict | None:
        row = self._conn.execute("SELECT result FROM scenarios WHERE id = ?",
                                 (scenario_id,)).fetchone()
        return json.loads(row[0]) if row and row[0] else None

    def ids(self) -> list[str]:
        return [r[0] for r in self._conn.execute("SELECT id FROM scenarios")]


class ScenarioEngine:
    """Holds a trained model plus immutable baseline caches per month."""

    def __init__(self, trained: TrainedModel, stations: Sequence[StationRecord],
                 layers: LayerSet, samples: Sequence[MonthlySample] | None = None,
                 store: ScenarioStore | None = None, freeze_sigma: bool = False):
        self.trained = trained
        self.layers = layers
        self.builder = FeatureBuilder(layers)
        self.registry = {s.id: s for s in stations}
        self.samples = list(samples) if samples else []
        self.store = store or ScenarioStore()
        self.freeze_sigma = freeze_sigma
        self.graph_config = trained.run_config.graph
        self._baselines: dict[Month, NetworkState] = {}
        self._background: np.ndarray | None = None

        self.first_active: dict[str, Month] = {}
        derived = derive_lifecycle(self.samples) if self.samples else {}
        for sid, rec in self.registry.items():
            first = rec.first_active_month or (derived.get(sid, (None,))[0])
            if first is None:
                raise DataError(f"station {sid}: no first_active_month and no samples")
            self.first_active[sid] = first

        self._active_by_month: dict[Month, tuple[str, ...]] = {}
        for s in self.samples:
            self._active_by_month.setdefault(s.month, None)
        by_month: dict[Month, set[str]] = {}
        for s in self.samples:
            by_month.setdefault(s.month, set()).add(s.station_id)
        for month, ids in by_month.items():
            self._active_by_month[month] = tuple(sorted(ids))

        lat_min, lat_max, lon_min, lon_max = layers.bounding_box()
        pad = 0.01
        self.bbox = (lat_min - pad, lat_max + pad, lon_min - pad, lon_max + pad)

    @classmethod
    def from_data_dir(cls, trained: TrainedModel, data_dir: Path | str,
                      store_path: Path | str | None = None,
                      freeze_sigma: bool = False) -> "ScenarioEngine":
        from .training import load_data_dir
        stations, samples, layers = load_data_dir(data_dir)
        store = ScenarioStore(store_path) if store_path else ScenarioStore()
        return cls(trained, stations, layers, samples=samples, store=store,
                   freeze_sigma=freeze_sigma)

    # -- baseline ----------------------------------------------------------

    def months(self) -> list[Month]:
        return sorted(self._active_by_month)

    def active_ids(self, month: Month) -> tuple[str, ...]:
        got = self._active_by_month.get(month)
        if got:
            return got
        ids = tuple(sorted(sid for sid, rec in self.registry.items()
                           if rec.active_in(month) and self.first_active[sid] <= month))
        if not ids:
            raise DataError(f"no active stations in {month}")
        return ids

    def baseline(self, month: Month) -> NetworkState:
        got = self._baselines.get(month)
        if got is None:
            got = self._compute_state(month, self.active_ids(month), {})
            self._baselines[month] = got
        return got

    def _compute_state(self, month: Month, ids: tuple[str, ...],
                       candidates: dict[str, CandidateStation],
                       sigma_override: tuple[float, float] | None = None,
                       age_override: int = 0) -> NetworkState:
        lats = np.array([candidates[sid].lat if sid in candidates
                         else self.registry[sid].lat for sid in ids])
        lons = np.array([candidates[sid].lon if sid in candidates
                         else self.registry[sid].lon for sid in ids])
        raw = self.builder.feature_matrix(ids, lats, lons, month)
        frame = FeatureFrame(month=month, ids=ids, raw=raw)
        config = self.graph_config
        if sigma_override is not None:
            config = GraphBuilderConfig(k=config.k, sigma_d=sigma_override[0],
                                        sigma_b=sigma_override[1],
                                        sigma_scope=config.sigma_scope)
        graphs = build_localized_graphs(
            ids, lats, lons, self.trained.feature_scaler.transform(raw), config)
        raw_pred = self._predict(frame, graphs, candidates, age_override)
        return NetworkState(month=month, ids=ids, lats=lats, lons=lons, frame=frame,
                            graphs=graphs, raw_pred=raw_pred)

    def _predict(self, frame: FeatureFrame, graphs, candidates: dict,
                 age_override: int = 0) -> np.ndarray:
        month = frame.month
        first_active = dict(self.first_active)
        for sid in candidates:
            first_active[sid] = month.add(-age_override)
        data = ExperimentData(
            stations=self.registry,
            split=DatasetSplit([], [], [], [], set()),
            frames={month: frame}, graphs={month: graphs},
            feature_scaler=self.trained.feature_scaler,
            age_scaler=self.trained.age_scaler,
            target_scaler=self.trained.target_scaler,
            first_active=first_active,
            graph_config=self.graph_config)
        stubs = [MonthlySample(sid, month, 0.0, 0.0, 1) for sid in frame.ids]
        return self.trained.predict(stubs, data)

    # -- scenarios ----------------------------------------------------------

    def apply_scenario(self, scenario: Scenario) -> NetworkState:
        """Modified-network features, graphs and predictions for a scenario."""
        base = self.baseline(scenario.base_month)
        active = set(base.ids)
        for cand in scenario.additions:
            if cand.id in self.registry or cand.id in active:
                raise ScenarioError(f"candidate id {cand.id!r} collides with an "
                                    f"existing station")
            if not (self.bbox[0] <= cand.lat <= self.bbox[1]
                    and self.bbox[2] <= cand.lon <= self.bbox[3]):
                raise ScenarioError(
                    f"candidate {cand.id} at ({cand.lat:.5f}, {cand.lon:.5f}) lies "
                    f"outside the loaded geo layers (lat {self.bbox[0]:.5f}.."
                    f"{self.bbox[1]:.5f}, lon {self.bbox[2]:.5f}..{self.bbox[3]:.5f})")
        seen = {c.id for c in scenario.additions}
        if len(seen) != len(scenario.additions):
            raise ScenarioError("duplicate candidate ids in scenario")
        for sid in scenario.removals:
            if sid not in active:
                raise ScenarioError(f"removal {sid!r} is not an active station "
                                    f"in {scenario.base_month}")
        ids = tuple(sorted((active - set(scenario.removals)) | seen))
        candidates = {c.id: c for c in scenario.additions}
        sigma_override = None
        if self.freeze_sigma:
            sigma_override = (base.graphs.sigma_d, base.graphs.sigma_b)
        return self._compute_state(scenario.base_month, ids, candidates,
                                   sigma_override=sigma_override,
                                   age_override=scenario.age_override)

    def predict_scenario(self, scenario: Scenario) -> ScenarioResult:
        t0 = time.time()
        base = self.baseline(scenario.base_month)
        if not scenario.additions and not scenario.removals:
            modified = base
        else:
            modified = self.apply_scenario(scenario)
        base_index = {sid: i for i, sid in enumerate(base.ids)}
        candidate_ids = {c.id for c in scenario.additions}
        stations = []
        for i, sid in enumerate(modified.ids):
            raw_out, raw_in = modified.raw_pred[i]
            delta_out = delta_in = 0.0
            if sid in base_index and sid not in candidate_ids:
                b = base.raw_pred[base_index[sid]]
                delta_out = float(raw_out - b[0])
                delta_in = float(raw_in - b[1])
            stations.append(StationPrediction(
                station_id=sid, lat=float(modified.lats[i]), lon=float(modified.lons[i]),
                is_candidate=sid in candidate_ids,
                y_out=max(0.0, float(raw_out)), y_in=max(0.0, float(raw_in)),
                raw_out=float(raw_out), raw_in=float(raw_in),
                delta_out=delta_out, delta_in=delta_in))
        edges: list[AttentionEdge] = []
        warnings = []
        if self.trained.params is not None and self.trained.model_config.graph_kinds:
            frames = {modified.month: modified.frame}
            graphs = {modified.month: modified.graphs}
            for cid in sorted(candidate_ids):
                edges.extend(export_attention(self.trained, frames, graphs, cid,
                                              modified.month))
        elif candidate_ids:
            warnings.append(f"variant {self.trained.variant!r} has no attention "
                            f"stacks; candidate edges unavailable")
        if self.freeze_sigma:
            warnings.append("kernel bandwidths frozen to baseline values")
        sigma_changed = (modified.graphs.sigma_d != base.graphs.sigma_d
                         or modified.graphs.sigma_b != base.graphs.sigma_b)
        result = ScenarioResult(
            scenario_id=scenario.id, base_month=scenario.base_month,
            stations=stations, candidate_attention=edges,
            sigma_changed=sigma_changed, recompute_seconds=time.time() - t0,
            warnings=warnings)
        self.store.put(scenario)
        self.store.put_result(scenario.id, result)
        return result

    # -- explanation endpoints ----------------------------------------------

    def station_attention(self, station_id: str, month: Month) -> list[AttentionEdge]:
        state = self.baseline(month)
        if station_id not in state.frame.index:
            raise DataError(f"station {station_id} is not active in {month}")
        return export_attention(self.trained, {month: state.frame},
                                {month: state.graphs}, station_id, month)

    def station_attribution(self, station_id: str, month: Month,
                            n_coalitions: int = 2048, seed: int = 0):
        state = self.baseline(month)
        if station_id not in state.frame.index:
            raise DataError(f"station {station_id} is not active in {month}")
        background = self._training_background()
        return kernel_shap(self.trained, {month: state.frame}, {month: state.graphs},
                           self.first_active, station_id, month, background,
                           n_coalitions=n_coalitions, seed=seed)

    def _training_background(self, size: int = 100) -> np.ndarray:
        if self._background is not None:
            return self._background
        if not self.samples:
            raise DataError("attribution requires samples in the data directory")
        train_end = self.trained.run_config.train_end
        pool = [s for s in self.samples if train_end is None or s.month <= train_end]
        frames = {}
        for month in sorted({s.month for s in pool}):
            state = self.baseline(month)
            frames[month] = state.frame
        self._background = sample_background(pool, frames, self.first_active, size=size)
        return self._background
