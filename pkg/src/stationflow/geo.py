"""Built-environment feature extraction from GeoJSON layers.

Produces the fixed 43-column feature vector per station and month:
10 POI counts, 11 census-tract attributes, 16 road-network values
(7 counts, 7 lengths, bike-lane length, junction count), 2 transit
values and 4 bike-network values. All radius queries use great-circle
distance on WGS84 coordinates.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .common import ConfigError, DataError, Month

log = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_000.0
DEFAULT_RADIUS_M = 500.0

POI_CATEGORIES = (
    "residential", "educational", "cultural", "recreational", "commercial",
    "religious", "transportation", "government", "health", "social_services",
)
TRACT_ATTRIBUTES = (
    "population_density", "housing_unit_density", "prop_households_pop",
    "prop_under_18", "avg_household_size", "total_housing_units",
    "prop_occupied_housing", "prop_hispanic", "prop_white", "prop_asian",
    "prop_black",
)
ROAD_LEVELS = (
    "motorway", "trunk", "primary", "secondary", "tertiary", "unclassified",
    "residential",
)
LAYER_KINDS = ("poi", "census_tract", "road", "bike_lane", "subway", "junction")

FEATURE_NAMES: tuple[str, ...] = (
    tuple(f"poi_{c}" for c in POI_CATEGORIES)
    + TRACT_ATTRIBUTES
    + tuple(f"road_count_{l}" for l in ROAD_LEVELS)
    + tuple(f"road_len_{l}" for l in ROAD_LEVELS)
    + ("bike_lane_len", "junction_count", "subway_dist", "subway_count_500m",
       "bss_count_0_500m", "bss_count_500_1000m", "bss_count_1000_5000m",
       "bss_mean_dist")
)
FEATURE_DIM = len(FEATURE_NAMES)
assert FEATURE_DIM == 43

# Only these columns depend on the station network / subway layer.
NETWORK_FEATURE_NAMES = (
    "subway_dist", "subway_count_500m", "bss_count_0_500m",
    "bss_count_500_1000m", "bss_count_1000_5000m", "bss_mean_dist",
)


def haversine(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in meters between two WGS84 points."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dphi = p2 - p1
    dlam = math.radians(lon2 - lon1)
    a = math.sin(dphi / 2.0) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(a)))


def haversine_many(lat: float, lon: float, lats: np.ndarray, lons: np.ndarray) -> np.ndarray:
    """Distances in meters from one point to arrays of points."""
    p1 = math.radians(lat)
    p2 = np.radians(lats)
    dphi = p2 - p1
    dlam = np.radians(lons - lon)
    a = np.sin(dphi / 2.0) ** 2 + math.cos(p1) * np.cos(p2) * np.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(a)))


def pairwise_haversine(lats: np.ndarray, lons: np.ndarray) -> np.ndarray:
    """Full symmetric distance matrix in meters."""
    p = np.radians(np.asarray(lats, dtype=float))
    lam = np.radians(np.asarray(lons, dtype=float))
    dphi = p[:, None] - p[None, :]
    dlam = lam[:, None] - lam[None, :]
    a = np.sin(dphi / 2.0) ** 2 + np.cos(p)[:, None] * np.cos(p)[None, :] * np.sin(dlam / 2.0) ** 2
    np.clip(a, 0.0, 1.0, out=a)
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(a))


# ---------------------------------------------------------------------------
# Layer containers

@dataclass
class PointLayer:
    kind: str
    lat: np.ndarray
    lon: np.ndarray
    category: tuple[str, ...]          # per-point category label
    categories: tuple[str, ...]        # allowed category order for counting

    def __len__(self) -> int:
        return self.lat.shape[0]


@dataclass
class LineFeature:
    coords: np.ndarray                 # (n, 2) as (lon, lat), GeoJSON order
    level: str = ""
    open_month: Month | None = None
    seg_mid_lat: np.ndarray = field(default=None, repr=False)
    seg_mid_lon: np.ndarray = field(default=None, repr=False)
    seg_len: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        lon = self.coords[:, 0]
        lat = self.coords[:, 1]
        self.seg_mid_lat = (lat[:-1] + lat[1:]) / 2.0
        self.seg_mid_lon = (lon[:-1] + lon[1:]) / 2.0
        self.seg_len = np.array([
            haversine(lat[i], lon[i], lat[i + 1], lon[i + 1])
            for i in range(len(lat) - 1)
        ])

    def length(self) -> float:
        return float(self.seg_len.sum())


@dataclass
class LineLayer:
    kind: str
    features: list[LineFeature]


@dataclass
class TractFeature:
    tract_id: str
    exterior: np.ndarray               # (n, 2) as (lon, lat), closed or open ring
    holes: list[np.ndarray]
    attributes: dict[str, float]
    centroid: tuple[float, float] = None  # (lat, lon)

    def __post_init__(self):
        self.centroid = _ring_centroid(self.exterior)

    def contains(self, lat: float, lon: float) -> bool:
        if not _point_in_ring(lon, lat, self.exterior):
            return False
        return not any(_point_in_ring(lon, lat, h) for h in self.holes)


@dataclass
class PolygonLayer:
    kind: str
    features: list[TractFeature]


@dataclass
class LayerSet:
    poi: PointLayer
    census_tract: PolygonLayer
    road: LineLayer
    bike_lane: LineLayer
    subway: PointLayer
    junction: PointLayer

    def bounding_box(self) -> tuple[float, float, float, float]:
        """(lat_min, lat_max, lon_min, lon_max) over every layer geometry."""
        lats, lons = [], []
        for layer in (self.poi, self.subway, self.junction):
            if len(layer):
                lats += [layer.lat.min(), layer.lat.max()]
                lons += [layer.lon.min(), layer.lon.max()]
        for layer in (self.road, self.bike_lane):
            for f in layer.features:
                lats += [f.coords[:, 1].min(), f.coords[:, 1].max()]
                lons += [f.coords[:, 0].min(), f.coords[:, 0].max()]
        for t in self.census_tract.features:
            lats += [t.exterior[:, 1].min(), t.exterior[:, 1].max()]
            lons += [t.exterior[:, 0].min(), t.exterior[:, 0].max()]
        return min(lats), max(lats), min(lons), max(lons)


def _point_in_ring(lon: float, lat: float, ring: np.ndarray) -> bool:
    # Even-odd ray cast in lon/lat coordinates.
    x, y = lon, lat
    xs = ring[:, 0]
    ys = ring[:, 1]
    n = len(ring)
    inside = False
    j = n - 1
    for i in range(n):
        if (ys[i] > y) != (ys[j] > y):
            x_cross = xs[j] + (y - ys[j]) * (xs[i] - xs[j]) / (ys[i] - ys[j])
            if x < x_cross:
                inside = not inside
        j = i
    return inside


def _ring_centroid(ring: np.ndarray) -> tuple[float, float]:
    """Planar shoelace centroid of a ring, returned as (lat, lon)."""
    xs = ring[:, 0]
    ys = ring[:, 1]
    x2 = np.roll(xs, -1)
    y2 = np.roll(ys, -1)
    cross = xs * y2 - x2 * ys
    area2 = cross.sum()
    if abs(area2) < 1e-15:
        return float(ys.mean()), float(xs.mean())
    cx = ((xs + x2) * cross).sum() / (3.0 * area2)
    cy = ((ys + y2) * cross).sum() / (3.0 * area2)
    return float(cy), float(cx)


# ---------------------------------------------------------------------------
# GeoJSON ingestion

def load_layer(path: Path | str, kind: str) -> PointLayer | LineLayer | PolygonLayer:
    if kind not in LAYER_KINDS:
        raise ConfigError(f"unknown layer kind {kind!r}")
    with open(path) as fh:
        doc = json.load(fh)
    features = doc.get("features", [])

    if kind in ("poi", "subway", "junction"):
        lats, lons, cats = [], [], []
        allowed = POI_CATEGORIES if kind == "poi" else (kind,)
        for f in features:
            lon, lat = f["geometry"]["coordinates"]
            props = f.get("properties") or {}
            cat = props.get("category", kind)
            if cat not in allowed:
                raise DataError(f"{kind} layer has unknown category {cat!r}")
            lats.append(lat)
            lons.append(lon)
            cats.append(cat)
        layer = PointLayer(kind, np.array(lats, dtype=float), np.array(lons, dtype=float),
                           tuple(cats), allowed)
        _check_coords(layer.lat, layer.lon, kind)
        return layer

    if kind in ("road", "bike_lane"):
        feats = []
        for f in features:
            coords = np.asarray(f["geometry"]["coordinates"], dtype=float)
            props = f.get("properties") or {}
            level = props.get("level", "")
            if kind == "road" and level not in ROAD_LEVELS:
                raise DataError(f"road layer has unknown level {level!r}")
            open_month = None
            if props.get("open_date"):
                open_month = Month.parse(str(props["open_date"])[:7])
            _check_coords(coords[:, 1], coords[:, 0], kind)
            feats.append(LineFeature(coords=coords, level=level, open_month=open_month))
        return LineLayer(kind, feats)

    feats = []
    for i, f in enumerate(features):
        geom = f["geometry"]
        rings = geom["coordinates"]
        props = f.get("properties") or {}
        tract_id = str(props.get("id", i))
        attrs = {k: float(props[k]) for k in props if k != "id"}
        exterior = np.asarray(rings[0], dtype=float)
        holes = [np.asarray(r, dtype=float) for r in rings[1:]]
        _check_coords(exterior[:, 1], exterior[:, 0], kind)
        feats.append(TractFeature(tract_id=tract_id, exterior=exterior, holes=holes,
                                  attributes=attrs))
    return PolygonLayer(kind, feats)


def _check_coords(lats: np.ndarray, lons: np.ndarray, kind: str) -> None:
    if len(lats) == 0:
        return
    if np.abs(lats).max() > 90.0 or np.abs(lons).max() > 180.0:
        raise DataError(f"{kind} layer has coordinates outside WGS84 bounds")


def load_layers(layer_dir: Path | str) -> LayerSet:
    """Load the six layers from <dir>/<kind>.geojson.

    A missing junction file is derived from road endpoints shared by three
    or more segments; every other layer is required.
    """
    layer_dir = Path(layer_dir)
    loaded = {}
    for kind in LAYER_KINDS:
        path = layer_dir / f"{kind}.geojson"
        if not path.exists():
            if kind == "junction":
                loaded[kind] = None
                continue
            raise ConfigError(f"missing layer file: {path}")
        loaded[kind] = load_layer(path, kind)
    if loaded["junction"] is None:
        loaded["junction"] = derive_junctions(loaded["road"])
        log.info("derived %d junctions from road endpoints", len(loaded["junction"]))
    return LayerSet(**loaded)


def derive_junctions(roads: LineLayer) -> PointLayer:
    """Junctions = road segment endpoints shared by >= 3 segments."""
    degree: dict[tuple[float, float], int] = {}
    for f in roads.features:
        pts = np.round(f.coords, 7)
        for i in range(len(pts) - 1):
            for p in (tuple(pts[i]), tuple(pts[i + 1])):
                degree[p] = degree.get(p, 0) + 1
    nodes = [p for p, d in degree.items() if d >= 3]
    lon = np.array([p[0] for p in nodes])
    lat = np.array([p[1] for p in nodes])
    return PointLayer("junction", lat, lon, tuple("junction" for _ in nodes), ("junction",))


# ---------------------------------------------------------------------------
# Feature operations

def extract_radius_counts(center: tuple[float, float], layer: PointLayer,
                          radius: float = DEFAULT_RADIUS_M) -> dict[str, int]:
    """Count layer points within `radius` meters (inclusive), per category."""
    counts = {c: 0 for c in layer.categories}
    if len(layer) == 0:
        return counts
    d = haversine_many(center[0], center[1], layer.lat, layer.lon)
    for cat, within in zip(layer.category, d <= radius):
        if within:
            counts[cat] += 1
    return counts


def extract_sociodemographics(center: tuple[float, float],
                              tracts: PolygonLayer) -> np.ndarray:
    """The 11 tract attributes at a point; nearest centroid when uncovered."""
    lat, lon = center
    match = None
    for t in tracts.features:
        if t.contains(lat, lon):
            match = t
            break
    if match is None:
        if not tracts.features:
            raise DataError("census tract layer is empty")
        match = min(tracts.features,
                    key=lambda t: haversine(lat, lon, t.centroid[0], t.centroid[1]))
    out = np.empty(len(TRACT_ATTRIBUTES))
    for i, name in enumerate(TRACT_ATTRIBUTES):
        if name not in match.attributes:
            raise DataError(f"tract {match.tract_id} is missing attribute {name!r}")
        out[i] = match.attributes[name]
    return out


def extract_bss_network(station_id: str, lat: float, lon: float,
                        active_lat: np.ndarray, active_lon: np.ndarray,
                        active_ids: Sequence[str]) -> tuple[np.ndarray, bool]:
    """Band counts [0,500) / [500,1000) / [1000,5000) and mean distance.

    The station itself is excluded. A single-station system reports zeros
    with the warning flag set.
    """
    others = [i for i, sid in enumerate(active_ids) if sid != station_id]
    if not others:
        return np.zeros(4), True
    d = haversine_many(lat, lon, active_lat[others], active_lon[others])
    bands = np.array([
        np.count_nonzero(d < 500.0),
        np.count_nonzero((d >= 500.0) & (d < 1000.0)),
        np.count_nonzero((d >= 1000.0) & (d < 5000.0)),
    ], dtype=float)
    return np.concatenate([bands, [d.mean()]]), False


def road_stats(center: tuple[float, float], roads: LineLayer,
               radius: float = DEFAULT_RADIUS_M,
               month: Month | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-level (count, total length) of roads near a point.

    A road counts if any of its segment midpoints falls within the radius;
    its contributed length is the sum of those segments. `month` filters
    features by open date (used for bike lanes).
    """
    idx = {lvl: i for i, lvl in enumerate(ROAD_LEVELS)}
    counts = np.zeros(len(ROAD_LEVELS))
    lengths = np.zeros(len(ROAD_LEVELS))
    lat, lon = center
    for f in roads.features:
        if month is not None and f.open_month is not None and f.open_month > month:
            continue
        d = haversine_many(lat, lon, f.seg_mid_lat, f.seg_mid_lon)
        within = d <= radius
        if not within.any():
            continue
        i = idx.get(f.level, 0) if f.level else 0
        counts[i] += 1
        lengths[i] += f.seg_len[within].sum()
    return counts, lengths


def bike_lane_length(center: tuple[float, float], lanes: LineLayer, month: Month,
                     radius: float = DEFAULT_RADIUS_M) -> float:
    """Total bike-lane length near a point, lanes opened by `month` only."""
    lat, lon = center
    total = 0.0
    for f in lanes.features:
        if f.open_month is not None and f.open_month > month:
            continue
        d = haversine_many(lat, lon, f.seg_mid_lat, f.seg_mid_lon)
        total += f.seg_len[d <= radius].sum()
    return float(total)


@dataclass(frozen=True)
class TemporalFeatures:
    month_index: int    # calendar month, 0..11
    station_age: int    # months since first active month, >= 0


def temporal_features(first_active: Month, month: Month) -> TemporalFeatures:
    age = month.index - first_active.index
    if age < 0:
        log.warning("month %s precedes first active month %s; clamping age to 0",
                    month, first_active)
        age = 0
    return TemporalFeatures(month_index=month.month_index, station_age=age)


class FeatureBuilder:
    """Assembles 43-feature vectors, caching the month-independent block.

    Only bike-lane length (lane opening dates) and the 4 bss-network
    columns change between months; POI, tract, road and transit values are
    computed once per station location.
    """

    def __init__(self, layers: LayerSet, radius: float = DEFAULT_RADIUS_M):
        for kind in LAYER_KINDS:
            if getattr(layers, kind, None) is None:
                raise ConfigError(f"missing layer kind {kind!r}")
        self.layers = layers
        self.radius = radius
        self._static: dict[tuple[float, float], np.ndarray] = {}
        self._lane_cache: dict[tuple[float, float], list[tuple[int, float]]] = {}

    def _static_block(self, lat: float, lon: float) -> np.ndarray:
        key = (lat, lon)
        got = self._static.get(key)
        if got is not None:
            return got
        center = (lat, lon)
        poi = extract_radius_counts(center, self.layers.poi, self.radius)
        poi_vec = np.array([poi[c] for c in POI_CATEGORIES], dtype=float)
        socio = extract_sociodemographics(center, self.layers.census_tract)
        counts, lengths = road_stats(center, self.layers.road, self.radius)
        junctions = extract_radius_counts(center, self.layers.junction, self.radius)
        if len(self.layers.subway) == 0:
            raise DataError("subway layer is empty")
        subway_d = haversine_many(lat, lon, self.layers.subway.lat, self.layers.subway.lon)
        transit = np.array([subway_d.min(), np.count_nonzero(subway_d <= self.radius)])
        block = np.concatenate([poi_vec, socio, counts, lengths,
                                [junctions["junction"]], transit])
        self._static[key] = block
        return block

    def _lane_length(self, lat: float, lon: float, month: Month) -> float:
        key = (lat, lon)
        events = self._lane_cache.get(key)
        if events is None:
            events = []
            for f in self.layers.bike_lane.features:
                d = haversine_many(lat, lon, f.seg_mid_lat, f.seg_mid_lon)
                length = f.seg_len[d <= self.radius].sum()
                if length > 0.0:
                    open_idx = f.open_month.index if f.open_month is not None else -1
                    events.append((open_idx, float(length)))
            events.sort()
            self._lane_cache[key] = events
        return sum(length for open_idx, length in events if open_idx <= month.index)

    def assemble(self, station_id: str, lat: float, lon: float, month: Month,
                 active_ids: Sequence[str], active_lat: np.ndarray,
                 active_lon: np.ndarray) -> np.ndarray:
        """One station's 43-vector for one month, in FEATURE_NAMES order."""
        static = self._static_block(lat, lon)
        lane = self._lane_length(lat, lon, month)
        bss, single = extract_bss_network(station_id, lat, lon,
                                          active_lat, active_lon, active_ids)
        if single:
            log.warning("station %s is the only active station in %s", station_id, month)
        vec = np.empty(FEATURE_DIM)
        vec[0:21] = static[0:21]        # poi + sociodem
        vec[21:35] = static[21:35]      # road counts + lengths
        vec[35] = lane
        vec[36] = static[35]            # junction count
        vec[37:39] = static[36:38]      # subway distance + count
        vec[39:43] = bss
        return vec

    def feature_matrix(self, ids: Sequence[str], lats: np.ndarray, lons: np.ndarray,
                       month: Month) -> np.ndarray:
        """Feature rows for every station in `ids`, active set = `ids`."""
        out = np.empty((len(ids), FEATURE_DIM))
        lats = np.asarray(lats, dtype=float)
        lons = np.asarray(lons, dtype=float)
        for row, sid in enumerate(ids):
            out[row] = self.assemble(sid, lats[row], lons[row], month, ids, lats, lons)
        return out


def write_feature_csv(path: Path | str, ids: Sequence[str], months: Sequence[Month],
                      rows: np.ndarray) -> None:
    """Feature matrix export: station_id, month, then the 43 named columns."""
    with open(path, "w") as fh:
        fh.write("station_id,month," + ",".join(FEATURE_NAMES) + "\n")
        for sid, month, row in zip(ids, months, rows):
            fh.write(f"{sid},{month}," + ",".join(repr(float(v)) for v in row) + "\n")
