"""Deterministic synthetic city with known demand ground truth.

Generates stations (downtown-clustered, expanding outward over time), the
six geo layers, and monthly demand drawn from a linear model over the 43
features plus a one-hop kernel-weighted neighbor spillover term, additive
calendar seasonality and Gaussian noise:

    demand = max(0, b0 + x·beta + lambda * sum_j w_ij (x_j·beta)
                    + seasonal[month] + eps)

With spillover off and no noise plain least squares recovers beta exactly;
with spillover on, the spatial-lag design is the correct model class.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from .common import ConfigError, Month
from .data import MonthlySample, StationRecord, write_samples, write_station_registry
from .geo import (FEATURE_DIM, FeatureBuilder, LayerSet, LineFeature, LineLayer,
                  PointLayer, PolygonLayer, TractFeature, POI_CATEGORIES,
                  ROAD_LEVELS, TRACT_ATTRIBUTES)
from .graphs import build_proximity_graphs, normalized_kernel_weights

log = logging.getLogger(__name__)

CENTER_LAT = 40.73
CENTER_LON = -73.99
KM_PER_DEG_LAT = 110.574
KM_PER_DEG_LON = 111.320


def _offset(lat0: float, lon0: float, dx_km: float, dy_km: float) -> tuple[float, float]:
    lat = lat0 + dy_km / KM_PER_DEG_LAT
    lon = lon0 + dx_km / (KM_PER_DEG_LON * math.cos(math.radians(lat0)))
    return lat, lon


@dataclass
class SynthConfig:
    seed: int = 0
    n_stations: int = 200
    n_months: int = 36
    expansion_months: tuple[tuple[int, int], ...] = ((12, 25), (22, 25), (27, 50))
    spillover_strength: float = 0.5
    seasonal_amplitude: float = 4.0
    noise_sd: float = 1.0
    area_extent_km: float = 12.0
    start_month: Month = field(default_factory=lambda: Month(2018, 1))
    base_demand: float = 30.0
    signal_sd: float = 9.0
    k: int = 5

    def __post_init__(self):
        if self.n_months < 12:
            raise ConfigError("n_months must be >= 12")
        if self.n_stations < 1:
            raise ConfigError("n_stations must be >= 1")
        if self.spillover_strength < 0:
            raise ConfigError("spillover_strength must be >= 0")
        added = sum(c for _, c in self.expansion_months)
        if added >= self.n_stations:
            raise ConfigError("expansion events add more stations than exist")
        if any(m <= 0 or m >= self.n_months for m, _ in self.expansion_months):
            raise ConfigError("expansion months must fall inside the timeline")


@dataclass
class GroundTruth:
    beta: np.ndarray                    # (43, 2) outflow / inflow coefficients
    intercept: np.ndarray               # (2,)
    spillover: float
    seasonal: np.ndarray                # (12,) additive by calendar month
    noise_sd: float
    seed: int
    truncation_rate: float = 0.0

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(), "intercept": self.intercept.tolist(),
            "spillover": self.spillover, "seasonal": self.seasonal.tolist(),
            "noise_sd": self.noise_sd, "seed": self.seed,
            "truncation_rate": self.truncation_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(beta=np.array(d["beta"]), intercept=np.array(d["intercept"]),
                   spillover=d["spillover"], seasonal=np.array(d["seasonal"]),
                   noise_sd=d["noise_sd"], seed=d["seed"],
                   truncation_rate=d.get("truncation_rate", 0.0))


@dataclass
class SynthCity:
    config: SynthConfig
    stations: list[StationRecord]
    layers: LayerSet
    samples: list[MonthlySample]
    truth: GroundTruth
    months: list[Month]
    features: dict[Month, tuple[tuple[str, ...], np.ndarray]]   # month -> (ids, X)

    def active_ids(self, month: Month) -> tuple[str, ...]:
        return self.features[month][0]

    def noise_free_demand(self, ids, lats, lons, X: np.ndarray,
                          month: Month) -> np.ndarray:
        """Ground-truth demand (before noise/clipping) for any network state.

        `X` must be the 43-feature matrix of the given station set; rows
        align with `ids`. Used as the oracle for scenario evaluation.
        """
        t = self.truth
        signal = X @ t.beta
        graphs, _sigma = build_proximity_graphs(ids, np.asarray(lats), np.asarray(lons),
                                                self.config.k)
        idx = {sid: i for i, sid in enumerate(ids)}
        spill = np.zeros_like(signal)
        for i, sid in enumerate(ids):
            g = graphs[sid]
            if not g.neighbors:
                continue
            w = normalized_kernel_weights(g)
            rows = [idx[nid] for nid in g.neighbors]
            spill[i] = w @ signal[rows]
        return t.intercept + signal + t.spillover * spill + t.seasonal[month.month_index]


def _make_layers(config: SynthConfig, rng: np.random.Generator) -> LayerSet:
    half = config.area_extent_km / 2.0

    # POIs: dense local clumps spread uniformly. Clumpiness keeps the counts
    # rough at the station spacing scale, so feature similarity is not just
    # a proxy for geographic proximity, and uniform coverage keeps later
    # (peripheral) stations inside the training feature distribution.
    lats, lons, cats = [], [], []
    for cat in POI_CATEGORIES:
        n_clumps = 30
        cxs = rng.uniform(-half * 0.95, half * 0.95, n_clumps)
        cys = rng.uniform(-half * 0.95, half * 0.95, n_clumps)
        sizes = 1 + rng.poisson(2.5, n_clumps)
        for cx, cy, size in zip(cxs, cys, sizes):
            for _ in range(size):
                lat, lon = _offset(CENTER_LAT, CENTER_LON,
                                   cx + rng.normal(0.0, 0.12),
                                   cy + rng.normal(0.0, 0.12))
                lats.append(lat)
                lons.append(lon)
                cats.append(cat)
    poi = PointLayer("poi", np.array(lats), np.array(lons), tuple(cats), POI_CATEGORIES)

    # Census tracts: a grid where each tract draws one of a handful of
    # "neighborhood type" attribute profiles (plus per-tract jitter so the
    # 11 columns stay linearly independent). Types scatter across the map,
    # so stations with similar demographics need not be geographically near.
    n_grid = 10
    step = config.area_extent_km / n_grid
    n_types = 8
    profiles = np.array([[1.0 + 0.5 * i for i in range(len(TRACT_ATTRIBUTES))]
                         for _ in range(n_types)])
    profiles += rng.uniform(-1.0, 1.0, profiles.shape)
    tracts = []
    for gy in range(n_grid):
        for gx in range(n_grid):
            x0 = -half + gx * step
            y0 = -half + gy * step
            corners = [(x0, y0), (x0 + step, y0), (x0 + step, y0 + step), (x0, y0 + step),
                       (x0, y0)]
            ring = []
            for cx, cy in corners:
                lat, lon = _offset(CENTER_LAT, CENTER_LON, cx, cy)
                ring.append([lon, lat])
            # Types cluster softly in space: a quarter of the draws follow a
            # quadrant-preferred type, the rest are uniform.
            quadrant = (2 if (x0 + step / 2.0) > 0 else 0) + (1 if (y0 + step / 2.0) > 0 else 0)
            if rng.random() < 0.25:
                profile = profiles[(2 * quadrant + int(rng.integers(0, 2))) % n_types]
            else:
                profile = profiles[rng.integers(0, n_types)]
            attrs = {}
            for i, name in enumerate(TRACT_ATTRIBUTES):
                attrs[name] = round(profile[i] + rng.uniform(0.0, 0.1), 6)
            tracts.append(TractFeature(tract_id=f"T{gy:02d}{gx:02d}", exterior=np.array(ring),
                                       holes=[], attributes=attrs))
    census = PolygonLayer("census_tract", tracts)

    # Roads: a grid of polylines, levels cycling; vertices every ~400 m so
    # every level shows up within any station's radius footprint.
    spacing = 0.4
    n_lines = int(config.area_extent_km / spacing) + 1
    road_feats = []
    junction_pts = []
    for axis in (0, 1):
        for li in range(n_lines):
            pos = -half + li * spacing
            coords = []
            for vi in range(n_lines):
                along = -half + vi * spacing
                x, y = (pos, along) if axis == 0 else (along, pos)
                lat, lon = _offset(CENTER_LAT, CENTER_LON, x, y)
                coords.append([lon, lat])
                if axis == 0:
                    junction_pts.append((lat, lon))
            level = ROAD_LEVELS[li % len(ROAD_LEVELS)]
            road_feats.append(LineFeature(coords=np.array(coords), level=level))
    road = LineLayer("road", road_feats)
    junction = PointLayer("junction", np.array([p[0] for p in junction_pts]),
                          np.array([p[1] for p in junction_pts]),
                          tuple("junction" for _ in junction_pts), ("junction",))

    # Bike lanes: every 4th road line, opening dates spread over the timeline.
    lane_feats = []
    for i, f in enumerate(road_feats):
        if i % 4 != 0:
            continue
        open_month = None
        if i % 8 == 0:
            open_month = config.start_month.add(int(rng.integers(0, config.n_months)))
        lane_feats.append(LineFeature(coords=f.coords.copy(), level="",
                                      open_month=open_month))
    bike = LineLayer("bike_lane", lane_feats)

    # Subway: two diagonal lines of stations through the center.
    sub_lats, sub_lons = [], []
    for t in np.linspace(-half * 0.7, half * 0.7, 8):
        lat, lon = _offset(CENTER_LAT, CENTER_LON, t, t)
        sub_lats.append(lat)
        sub_lons.append(lon)
        lat, lon = _offset(CENTER_LAT, CENTER_LON, t, -t)
        sub_lats.append(lat)
        sub_lons.append(lon)
    subway = PointLayer("subway", np.array(sub_lats), np.array(sub_lons),
                        tuple("subway" for _ in sub_lats), ("subway",))

    return LayerSet(poi=poi, census_tract=census, road=road, bike_lane=bike,
                    subway=subway, junction=junction)


def generate_city(config: SynthConfig) -> SynthCity:
    """Deterministic synthetic city, layers, samples and ground truth."""
    rng = np.random.default_rng(config.seed)
    layers = _make_layers(config, rng)
    half = config.area_extent_km / 2.0

    # Station placement: radial density gradient, later cohorts peripheral.
    n = config.n_stations
    r = np.minimum(np.abs(rng.normal(0.0, half / 2.5, n)) + rng.uniform(0.05, 0.3, n),
                   half * 0.95)
    theta = rng.uniform(0.0, 2.0 * math.pi, n)
    order = np.argsort(r)
    cohort_sizes = [n - sum(c for _, c in config.expansion_months)]
    cohort_months = [0]
    for m, c in sorted(config.expansion_months):
        cohort_sizes.append(c)
        cohort_months.append(m)
    stations: list[StationRecord] = []
    pos = 0
    width = len(str(n))
    meta: list[tuple[str, float, float, int]] = []
    for size, m_idx in zip(cohort_sizes, cohort_months):
        for j in range(size):
            i = order[pos]
            lat, lon = _offset(CENTER_LAT, CENTER_LON,
                               r[i] * math.cos(theta[i]), r[i] * math.sin(theta[i]))
            meta.append((f"S{pos:0{width}d}", lat, lon, m_idx))
            pos += 1
    meta.sort(key=lambda t: t[0])
    months = [config.start_month.add(i) for i in range(config.n_months)]
    for sid, lat, lon, m_idx in meta:
        stations.append(StationRecord(id=sid, lat=lat, lon=lon,
                                      first_active_month=months[m_idx],
                                      last_active_month=months[-1]))

    by_id = {s.id: s for s in stations}
    builder = FeatureBuilder(layers)
    features: dict[Month, tuple[tuple[str, ...], np.ndarray]] = {}
    for month in months:
        ids = tuple(s.id for s in stations if s.first_active_month <= month)
        lats = np.array([by_id[sid].lat for sid in ids])
        lons = np.array([by_id[sid].lon for sid in ids])
        features[month] = (ids, builder.feature_matrix(ids, lats, lons, month))

    # Ground truth: coefficients scaled so the linear signal has the
    # configured spread over the final month's features. Columns with no
    # variation across the initial cohort get zero weight (they would not
    # be identifiable from any training period).
    ref_ids, ref_X = features[months[-1]]
    col_sd = ref_X.std(axis=0)
    initial_sd = features[months[0]][1].std(axis=0)
    dead = (col_sd < 1e-9) | (initial_sd < 1e-9)
    beta = rng.normal(0.0, 1.0, (FEATURE_DIM, 2))
    beta[dead, :] = 0.0
    safe_sd = np.where(dead, 1.0, col_sd)
    beta = beta / safe_sd[:, None]
    signal = ref_X @ beta
    for col in range(2):
        spread = signal[:, col].std()
        if spread > 0:
            beta[:, col] *= config.signal_sd / spread
    seasonal = config.seasonal_amplitude * np.sin(
        2.0 * math.pi * (np.arange(12) - 2.0) / 12.0)

    # Intercept chosen so mean demand sits at base_demand on the final month.
    signal = ref_X @ beta
    graphs, _ = build_proximity_graphs(
        ref_ids, np.array([by_id[sid].lat for sid in ref_ids]),
        np.array([by_id[sid].lon for sid in ref_ids]), config.k)
    idx = {sid: i for i, sid in enumerate(ref_ids)}
    spill = np.zeros_like(signal)
    for i, sid in enumerate(ref_ids):
        g = graphs[sid]
        if g.neighbors:
            w = normalized_kernel_weights(g)
            spill[i] = w @ signal[[idx[nid] for nid in g.neighbors]]
    nominal = signal + config.spillover_strength * spill
    intercept = config.base_demand - nominal.mean(axis=0)

    truth = GroundTruth(beta=beta, intercept=intercept,
                        spillover=config.spillover_strength, seasonal=seasonal,
                        noise_sd=config.noise_sd, seed=config.seed)

    samples: list[MonthlySample] = []
    truncated = 0
    total = 0
    city = SynthCity(config=config, stations=stations, layers=layers, samples=samples,
                     truth=truth, months=months, features=features)
    for month in months:
        ids, X = features[month]
        lats = np.array([by_id[sid].lat for sid in ids])
        lons = np.array([by_id[sid].lon for sid in ids])
        demand = city.noise_free_demand(ids, lats, lons, X, month)
        if config.noise_sd > 0:
            demand = demand + rng.normal(0.0, config.noise_sd, demand.shape)
        truncated += int((demand < 0).sum())
        total += demand.size
        demand = np.maximum(demand, 0.0)
        for i, sid in enumerate(ids):
            samples.append(MonthlySample(station_id=sid, month=month,
                                         y_out=float(demand[i, 0]),
                                         y_in=float(demand[i, 1]),
                                         active_days=month.days()))
    truth.truncation_rate = truncated / total if total else 0.0
    if truth.truncation_rate > 0.05:
        log.warning("ground-truth truncation rate %.1f%% exceeds 5%%",
                    100 * truth.truncation_rate)
    return city


# ---------------------------------------------------------------------------
# Fixture emission in the pipeline's external formats

def _point_geojson(layer: PointLayer) -> dict:
    return {"type": "FeatureCollection", "features": [
        {"type": "Feature",
         "geometry": {"type": "Point", "coordinates": [float(lon), float(lat)]},
         "properties": {"category": cat}}
        for lat, lon, cat in zip(layer.lat, layer.lon, layer.category)
    ]}


def _line_geojson(layer: LineLayer) -> dict:
    feats = []
    for f in layer.features:
        props = {}
        if f.level:
            props["level"] = f.level
        if f.open_month is not None:
            props["open_date"] = str(f.open_month)
        feats.append({"type": "Feature",
                      "geometry": {"type": "LineString",
                                   "coordinates": f.coords.tolist()},
                      "properties": props})
    return {"type": "FeatureCollection", "features": feats}


def _polygon_geojson(layer: PolygonLayer) -> dict:
    feats = []
    for t in layer.features:
        props = {"id": t.tract_id}
        props.update(t.attributes)
        rings = [t.exterior.tolist()] + [h.tolist() for h in t.holes]
        feats.append({"type": "Feature",
                      "geometry": {"type": "Polygon", "coordinates": rings},
                      "properties": props})
    return {"type": "FeatureCollection", "features": feats}


def emit_fixtures(city: SynthCity, out_dir: Path | str) -> None:
    """Write stations.csv, samples.csv, trips.csv, layers/ and ground truth."""
    out_dir = Path(out_dir)
    layer_dir = out_dir / "layers"
    layer_dir.mkdir(parents=True, exist_ok=True)
    write_station_registry(out_dir / "stations.csv", city.stations)
    write_samples(out_dir / "samples.csv", city.samples)
    emit_trips(city, out_dir / "trips.csv")
    docs = {
        "poi": _point_geojson(city.layers.poi),
        "subway": _point_geojson(city.layers.subway),
        "junction": _point_geojson(city.layers.junction),
        "road": _line_geojson(city.layers.road),
        "bike_lane": _line_geojson(city.layers.bike_lane),
        "census_tract": _polygon_geojson(city.layers.census_tract),
    }
    for kind, doc in docs.items():
        with open(layer_dir / f"{kind}.geojson", "w") as fh:
            json.dump(doc, fh)
    with open(out_dir / "ground_truth.json", "w") as fh:
        json.dump(city.truth.to_dict(), fh)


def emit_trips(city: SynthCity, path: Path | str) -> None:
    """Quantize demand into individual trips (counts rounded to whole trips).

    Every active station departs at least once a month; arrival totals are
    apportioned so each month's trip table balances.
    """
    rng = np.random.default_rng(city.config.seed + 1)
    by_month: dict[Month, list[MonthlySample]] = {}
    for s in city.samples:
        by_month.setdefault(s.month, []).append(s)
    with open(path, "w") as fh:
        fh.write("start_station_id,end_station_id,started_at,ended_at\n")
        for month in city.months:
            rows = sorted(by_month.get(month, []), key=lambda s: s.station_id)
            if not rows:
                continue
            n_days = month.days()
            c_out = {s.station_id: max(1, int(round(s.y_out * n_days))) for s in rows}
            total = sum(c_out.values())
            raw_in = np.array([s.y_in * n_days for s in rows])
            if raw_in.sum() <= 0:
                quota = np.full(len(rows), total // len(rows))
                quota[: total - quota.sum()] += 1
            else:
                exact = raw_in * (total / raw_in.sum())
                quota = np.floor(exact).astype(int)
                remainder = total - quota.sum()
                frac_order = np.argsort(-(exact - quota))
                quota[frac_order[:remainder]] += 1
            arrivals = []
            for s, q in zip(rows, quota):
                arrivals.extend([s.station_id] * int(q))
            arrivals = list(np.array(arrivals)[rng.permutation(len(arrivals))])
            t = 0
            for s in rows:
                count = c_out[s.station_id]
                for j in range(count):
                    day = 1 + (j % n_days)
                    hour = 6 + (j // n_days) % 16
                    start = datetime(month.year, month.month, day, hour, 0, 0)
                    end = datetime(month.year, month.month, day, hour, 15, 0)
                    fh.write(f"{s.station_id},{arrivals[t]},"
                             f"{start.isoformat()},{end.isoformat()}\n")
                    t += 1
