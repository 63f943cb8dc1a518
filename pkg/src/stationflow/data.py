"""Trip ingestion, monthly demand aggregation and temporal splitting.

Demand for a station-month is average daily flow: total departures (or
arrivals) divided by the number of days the station saw any trip that
month. Departures belong to the month of the trip's start time, arrivals
to the month of its end time.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from datetime import datetime, date
from pathlib import Path
from typing import Iterable, Sequence
from zoneinfo import ZoneInfo

import numpy as np

from .common import ConfigError, DataError, Month

log = logging.getLogger(__name__)

DEFAULT_TZ = "America/New_York"


@dataclass(frozen=True)
class TripRecord:
    start_station_id: str
    end_station_id: str
    start_time: datetime
    end_time: datetime


@dataclass
class StationRecord:
    id: str
    lat: float
    lon: float
    first_active_month: Month | None = None
    last_active_month: Month | None = None

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0 or not -180.0 <= self.lon <= 180.0:
            raise DataError(f"station {self.id}: coordinates out of range")
        if (self.first_active_month and self.last_active_month
                and self.first_active_month > self.last_active_month):
            raise DataError(f"station {self.id}: first_active_month after last_active_month")

    def active_in(self, month: Month) -> bool:
        if self.first_active_month and month < self.first_active_month:
            return False
        if self.last_active_month and month > self.last_active_month:
            return False
        return True


@dataclass(frozen=True)
class MonthlySample:
    station_id: str
    month: Month
    y_out: float
    y_in: float
    active_days: int


@dataclass
class DatasetSplit:
    train: list[MonthlySample]
    validation: list[MonthlySample]
    test_existing: list[MonthlySample]
    test_new: list[MonthlySample]
    train_station_ids: set[str]


@dataclass
class TripColumns:
    start_station_id: str = "start_station_id"
    end_station_id: str = "end_station_id"
    start_time: str = "started_at"
    end_time: str = "ended_at"

    def required(self) -> tuple[str, ...]:
        return (self.start_station_id, self.end_station_id,
                self.start_time, self.end_time)


@dataclass
class IngestResult:
    records: list[TripRecord]
    skipped: int
    total_rows: int


def _parse_ts(text: str) -> datetime:
    return datetime.fromisoformat(text.strip())


def ingest_trips(source: Path | str | io.TextIOBase,
                 columns: TripColumns | None = None) -> IngestResult:
    """Read a trip CSV; malformed rows are skipped, counted and logged."""
    columns = columns or TripColumns()
    if isinstance(source, (str, Path)):
        fh = open(source, newline="")
        close = True
    else:
        fh, close = source, False
    try:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in columns.required() if c not in header]
        if missing:
            raise ConfigError(f"trip CSV is missing required columns: {missing}")
        records: list[TripRecord] = []
        skipped = 0
        total = 0
        for row in reader:
            total += 1
            sid = (row[columns.start_station_id] or "").strip()
            eid = (row[columns.end_station_id] or "").strip()
            try:
                start = _parse_ts(row[columns.start_time])
                end = _parse_ts(row[columns.end_time])
            except (ValueError, TypeError, AttributeError):
                skipped += 1
                continue
            if not sid or not eid or start > end:
                skipped += 1
                continue
            records.append(TripRecord(sid, eid, start, end))
        if skipped:
            log.warning("skipped %d of %d trip rows", skipped, total)
        return IngestResult(records=records, skipped=skipped, total_rows=total)
    finally:
        if close:
            fh.close()


def _local_date(ts: datetime, tz: ZoneInfo) -> date:
    if ts.tzinfo is None:
        return ts.date()
    return ts.astimezone(tz).date()


def aggregate_monthly_demand(trips: Iterable[TripRecord], month: Month,
                             tz: str = DEFAULT_TZ) -> list[MonthlySample]:
    """Per-station average daily departures/arrivals for one month.

    A station is included if it has at least one departure or arrival;
    active days = distinct civil days with any trip at the station.
    """
    zone = ZoneInfo(tz)
    departures: dict[str, int] = {}
    arrivals: dict[str, int] = {}
    days: dict[str, set[int]] = {}
    for trip in trips:
        d_start = _local_date(trip.start_time, zone)
        if Month.of(d_start) == month:
            departures[trip.start_station_id] = departures.get(trip.start_station_id, 0) + 1
            days.setdefault(trip.start_station_id, set()).add(d_start.day)
        d_end = _local_date(trip.end_time, zone)
        if Month.of(d_end) == month:
            arrivals[trip.end_station_id] = arrivals.get(trip.end_station_id, 0) + 1
            days.setdefault(trip.end_station_id, set()).add(d_end.day)
    samples = []
    for sid in sorted(days):
        n = len(days[sid])
        samples.append(MonthlySample(
            station_id=sid,
            month=month,
            y_out=departures.get(sid, 0) / n,
            y_in=arrivals.get(sid, 0) / n,
            active_days=n,
        ))
    return samples


def aggregate_all_months(trips: Sequence[TripRecord],
                         tz: str = DEFAULT_TZ) -> list[MonthlySample]:
    """aggregate_monthly_demand over every month present, in one pass."""
    zone = ZoneInfo(tz)
    departures: dict[tuple[str, Month], int] = {}
    arrivals: dict[tuple[str, Month], int] = {}
    days: dict[tuple[str, Month], set[int]] = {}
    for trip in trips:
        d_start = _local_date(trip.start_time, zone)
        key = (trip.start_station_id, Month.of(d_start))
        departures[key] = departures.get(key, 0) + 1
        days.setdefault(key, set()).add(d_start.day)
        d_end = _local_date(trip.end_time, zone)
        key = (trip.end_station_id, Month.of(d_end))
        arrivals[key] = arrivals.get(key, 0) + 1
        days.setdefault(key, set()).add(d_end.day)
    samples = []
    for (sid, month), dayset in sorted(days.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        n = len(dayset)
        samples.append(MonthlySample(
            station_id=sid, month=month,
            y_out=departures.get((sid, month), 0) / n,
            y_in=arrivals.get((sid, month), 0) / n,
            active_days=n,
        ))
    return samples


def temporal_split(samples: Sequence[MonthlySample], train_end: Month,
                   test_start: Month, val_fraction: float, seed: int) -> DatasetSplit:
    """Seeded train/validation split of the pre-`train_end` period plus
    new-vs-existing labeling of the post-`test_start` period."""
    if train_end >= test_start:
        raise ConfigError("train_end must precede test_start")
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError("val_fraction must be in (0, 1)")
    train_period = [s for s in samples if s.month <= train_end]
    test_period = [s for s in samples if s.month >= test_start]
    if not train_period or not test_period:
        raise DataError("empty train or test period")

    # Canonical order first so the shuffle depends only on content and seed.
    train_period.sort(key=lambda s: (s.station_id, s.month))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(train_period))
    n_val = int(round(val_fraction * len(train_period)))
    val_idx = set(perm[:n_val].tolist())
    train = [s for i, s in enumerate(train_period) if i not in val_idx]
    validation = [s for i, s in enumerate(train_period) if i in val_idx]

    train_station_ids = {s.station_id for s in train_period}
    test_existing = [s for s in test_period if s.station_id in train_station_ids]
    test_new = [s for s in test_period if s.station_id not in train_station_ids]
    return DatasetSplit(train=train, validation=validation,
                        test_existing=test_existing, test_new=test_new,
                        train_station_ids=train_station_ids)


def derive_lifecycle(samples: Iterable[MonthlySample]) -> dict[str, tuple[Month, Month]]:
    """First/last month with any trip, per station."""
    spans: dict[str, tuple[Month, Month]] = {}
    for s in samples:
        first, last = spans.get(s.station_id, (s.month, s.month))
        spans[s.station_id] = (min(first, s.month), max(last, s.month))
    return spans


# ---------------------------------------------------------------------------
# CSV formats

def read_station_registry(path: Path | str) -> list[StationRecord]:
    stations = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = ("id", "lat", "lon")
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise ConfigError(f"station registry is missing columns: {missing}")
        for row in reader:
            first = row.get("first_active_month", "").strip()
            last = row.get("last_active_month", "").strip()
            stations.append(StationRecord(
                id=row["id"].strip(),
                lat=float(row["lat"]),
                lon=float(row["lon"]),
                first_active_month=Month.parse(first) if first else None,
                last_active_month=Month.parse(last) if last else None,
            ))
    return stations


def write_station_registry(path: Path | str, stations: Sequence[StationRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "lat", "lon", "first_active_month", "last_active_month"])
        for s in stations:
            writer.writerow([s.id, repr(float(s.lat)), repr(float(s.lon)),
                             str(s.first_active_month) if s.first_active_month else "",
                             str(s.last_active_month) if s.last_active_month else ""])


def read_samples(path: Path | str) -> list[MonthlySample]:
    samples = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            samples.append(MonthlySample(
                station_id=row["station_id"].strip(),
                month=Month.parse(row["month"]),
                y_out=float(row["y_out"]),
                y_in=float(row["y_in"]),
                active_days=int(row["active_days"]),
            ))
    return samples


def write_samples(path: Path | str, samples: Sequence[MonthlySample]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["station_id", "month", "y_out", "y_in", "active_days"])
        for s in samples:
            writer.writerow([s.station_id, str(s.month), repr(float(s.y_out)),
                             repr(float(s.y_in)), s.active_days])
