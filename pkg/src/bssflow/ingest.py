"""Reading and cleaning of trip logs, station registries, weather and holidays.

Trips are held as a :class:`pandas.DataFrame` with the columns listed in
:data:`TRIP_COLUMNS`; timestamps are naive wall-clock times in the city's
local civil time and ``duration_min`` is the elapsed time in minutes.
"""

from __future__ import annotations

import datetime as dt
import enum
import io
import logging
import os
from dataclasses import dataclass
from typing import IO, Iterable, Union

import numpy as np
import pandas as pd
from dateutil.easter import easter

logger = logging.getLogger(__name__)

Source = Union[str, os.PathLike, IO]

TRIP_COLUMNS = ("departure_time", "arrival_time", "origin_station", "destination_station")
STATION_COLUMNS = ("station_id", "latitude", "longitude", "name")
WEATHER_COLUMNS = ("hour_start", "rain_minutes")

SHORT_LOOP_MAX_MIN = 2
OVERLONG_MIN_MIN = 12 * 60


class IngestError(ValueError):
    """Fatal problem with an input source."""


class RainLevel(enum.IntEnum):
    LOW = 0
    MEDIUM = 1
    HIGH = 2

    @property
    def label(self) -> str:
        return self.name.capitalize()


RAIN_LABELS = tuple(level.label for level in RainLevel)


@dataclass(frozen=True)
class TripRecord:
    departure_time: dt.datetime
    arrival_time: dt.datetime
    origin_station: str
    destination_station: str

    @property
    def duration_min(self) -> float:
        return (self.arrival_time - self.departure_time).total_seconds() / 60.0


@dataclass(frozen=True)
class Station:
    station_id: str
    latitude: float
    longitude: float
    name: str = ""


class StationRegistry:
    """Set of stations keyed by station id, iterated in insertion order."""

    def __init__(self, stations: Iterable[Station] = ()):
        self._stations: dict[str, Station] = {}
        for st in stations:
            self.add(st)

    def add(self, station: Station) -> None:
        if station.station_id in self._stations:
            raise IngestError(f"duplicate station id {station.station_id!r}")
        if not -90.0 <= station.latitude <= 90.0:
            raise IngestError(f"station {station.station_id!r}: latitude {station.latitude} out of range")
        if not -180.0 <= station.longitude <= 180.0:
            raise IngestError(f"station {station.station_id!r}: longitude {station.longitude} out of range")
        self._stations[station.station_id] = station

    def union(self, other: "StationRegistry") -> "StationRegistry":
        """Stations of both registries; entries of ``self`` win on id clashes."""
        merged = StationRegistry(self)
        for st in other:
            if st.station_id not in merged:
                merged.add(st)
        return merged

    def __contains__(self, station_id: object) -> bool:
        return station_id in self._stations

    def __getitem__(self, station_id: str) -> Station:
        return self._stations[station_id]

    def __iter__(self):
        return iter(self._stations.values())

    def __len__(self) -> int:
        return len(self._stations)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(self._stations)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(st) for st in self], columns=list(STATION_COLUMNS))


@dataclass(frozen=True)
class IngestReport:
    total_rows: int
    valid: int
    malformed: int
    unknown_station: int
    negative_duration: int

    @property
    def skipped(self) -> int:
        return self.malformed + self.unknown_station + self.negative_duration


@dataclass(frozen=True)
class FilterReport:
    n_input: int
    short_loops: int
    overlong: int

    @property
    def n_removed(self) -> int:
        return self.short_loops + self.overlong

    @property
    def n_kept(self) -> int:
        return self.n_input - self.n_removed

    @property
    def removed_fraction(self) -> float:
        return self.n_removed / self.n_input if self.n_input else 0.0


def _read_table(source: Source, columns: Iterable[str], what: str) -> pd.DataFrame:
    try:
        frame = pd.read_csv(source, dtype=str, keep_default_na=False, skipinitialspace=True)
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise IngestError(f"cannot read {what} source: {exc}") from exc
    frame.columns = [c.strip() for c in frame.columns]
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise IngestError(f"{what} source lacks column(s) {missing}")
    return frame


def read_stations(source: Source) -> StationRegistry:
    frame = _read_table(source, STATION_COLUMNS, "stations")
    registry = StationRegistry()
    for row in frame.itertuples(index=False):
        try:
            lat, lon = float(row.latitude), float(row.longitude)
        except ValueError as exc:
            raise IngestError(f"station {row.station_id!r}: bad coordinates") from exc
        registry.add(Station(str(row.station_id).strip(), lat, lon, str(row.name)))
    return registry


def _parse_local(values: pd.Series, timezone: str | None) -> pd.Series:
    """Parse ISO-8601 strings to naive local wall-clock timestamps (minute precision)."""
    parsed = pd.to_datetime(values.str.strip(), format="ISO8601", errors="coerce")
    if isinstance(parsed.dtype, pd.DatetimeTZDtype):
        parsed = parsed.dt.tz_convert(timezone or "UTC").dt.tz_localize(None)
    return parsed.dt.floor("min")


def _elapsed_minutes(dep: pd.Series, arr: pd.Series, timezone: str | None) -> pd.Series:
    if timezone is None:
        return (arr - dep).dt.total_seconds() / 60.0

    def instants(ts: pd.Series) -> pd.Series:
        # ambiguous wall times take the earlier (DST) instant; skipped ones move forward
        return ts.dt.tz_localize(timezone, ambiguous=np.ones(len(ts), dtype=bool),
                                 nonexistent="shift_forward")

    return (instants(arr) - instants(dep)).dt.total_seconds() / 60.0


def parse_trips(
    source: Source,
    registry: StationRegistry,
    timezone: str | None = "Europe/Paris",
) -> tuple[pd.DataFrame, IngestReport]:
    """Parse a trip log, skipping and counting unusable rows.

    Rows are checked in order: malformed (unparseable timestamp or empty
    station field), unknown station, negative duration. Each skipped row is
    counted once, under its first failure.
    """
    raw = _read_table(source, TRIP_COLUMNS, "trips")
    total = len(raw)
    dep = _parse_local(raw["departure_time"], timezone)
    arr = _parse_local(raw["arrival_time"], timezone)
    origin = raw["origin_station"].str.strip()
    dest = raw["destination_station"].str.strip()

    malformed = dep.isna() | arr.isna() | (origin == "") | (dest == "")
    known = set(registry.ids)
    unknown = ~malformed & ~(origin.isin(known) & dest.isin(known))
    ok = ~malformed & ~unknown
    duration = pd.Series(np.nan, index=raw.index)
    duration[ok] = _elapsed_minutes(dep[ok], arr[ok], timezone)
    negative = ok & (duration < 0)
    ok &= ~negative

    trips = pd.DataFrame({
        "departure_time": dep[ok],
        "arrival_time": arr[ok],
        "origin_station": origin[ok],
        "destination_station": dest[ok],
        "duration_min": duration[ok].astype(float),
    }).reset_index(drop=True)
    report = IngestReport(
        total_rows=total,
        valid=int(ok.sum()),
        malformed=int(malformed.sum()),
        unknown_station=int(unknown.sum()),
        negative_duration=int(negative.sum()),
    )
    if report.skipped:
        logger.info("parse_trips: skipped %d of %d rows (%s)", report.skipped, total, report)
    return trips, report


def trips_from_records(records: Iterable[TripRecord]) -> pd.DataFrame:
    rows = [
        (r.departure_time, r.arrival_time, r.origin_station, r.destination_station, r.duration_min)
        for r in records
    ]
    frame = pd.DataFrame(rows, columns=[*TRIP_COLUMNS, "duration_min"])
    for col in ("departure_time", "arrival_time"):
        frame[col] = pd.to_datetime(frame[col])
    frame["duration_min"] = frame["duration_min"].astype(float)
    return frame


def trip_records(trips: pd.DataFrame) -> list[TripRecord]:
    return [
        TripRecord(r.departure_time.to_pydatetime(), r.arrival_time.to_pydatetime(),
                   r.origin_station, r.destination_station)
        for r in trips.itertuples(index=False)
    ]


def filter_trips(trips: pd.DataFrame) -> tuple[pd.DataFrame, FilterReport]:
    """Drop short round trips (<= 2 min, same station) and trips over 12 hours."""
    duration = trips["duration_min"]
    short_loop = (duration <= SHORT_LOOP_MAX_MIN) & (trips["origin_station"] == trips["destination_station"])
    overlong = duration > OVERLONG_MIN_MIN
    kept = trips.loc[~(short_loop | overlong)].reset_index(drop=True)
    return kept, FilterReport(len(trips), int(short_loop.sum()), int(overlong.sum()))


def classify_rain(rain_minutes: int) -> RainLevel:
    """Rain level of one hour from its minutes of rainfall."""
    if isinstance(rain_minutes, bool) or int(rain_minutes) != rain_minutes:
        raise ValueError(f"rain minutes must be an integer, got {rain_minutes!r}")
    if not 0 <= rain_minutes <= 60:
        raise ValueError(f"rain minutes must lie in [0, 60], got {rain_minutes}")
    if rain_minutes <= 20:
        return RainLevel.LOW
    if rain_minutes <= 40:
        return RainLevel.MEDIUM
    return RainLevel.HIGH


def classify_rain_array(rain_minutes) -> np.ndarray:
    """Vectorized :func:`classify_rain`; returns integer level codes."""
    m = np.asarray(rain_minutes)
    if np.any((m < 0) | (m > 60)):
        raise ValueError("rain minutes must lie in [0, 60]")
    return np.where(m <= 20, RainLevel.LOW, np.where(m <= 40, RainLevel.MEDIUM, RainLevel.HIGH)).astype(np.int8)


def read_weather(source: Source) -> pd.DataFrame:
    """Hourly rain records as a frame with ``hour_start`` and ``rain_minutes``."""
    frame = _read_table(source, WEATHER_COLUMNS, "weather")
    hours = pd.to_datetime(frame["hour_start"].str.strip(), format="ISO8601", errors="coerce")
    minutes = pd.to_numeric(frame["rain_minutes"], errors="coerce")
    if hours.isna().any() or minutes.isna().any():
        bad = int((hours.isna() | minutes.isna()).sum())
        raise IngestError(f"weather source has {bad} unparseable row(s)")
    if isinstance(hours.dtype, pd.DatetimeTZDtype):
        hours = hours.dt.tz_localize(None)
    if (hours != hours.dt.floor("h")).any():
        raise IngestError("weather hour_start values must be on the hour")
    if ((minutes < 0) | (minutes > 60) | (minutes != minutes.round())).any():
        raise IngestError("rain_minutes must be integers in [0, 60]")
    if hours.duplicated().any():
        raise IngestError("weather source has duplicate hours")
    return pd.DataFrame({"hour_start": hours, "rain_minutes": minutes.astype(int)})


def read_holidays(source: Source, years: Iterable[int] | None = None) -> frozenset[dt.date]:
    """One ISO date per line; blank lines and ``#`` comments are ignored."""
    if hasattr(source, "read"):
        text = source.read()
        text = text.decode() if isinstance(text, bytes) else text
    else:
        try:
            with open(source, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise IngestError(f"cannot read holidays source: {exc}") from exc
    dates: list[dt.date] = []
    for lineno, line in enumerate(io.StringIO(text), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            dates.append(dt.date.fromisoformat(line))
        except ValueError as exc:
            raise IngestError(f"holidays line {lineno}: {line!r} is not an ISO date") from exc
    if len(set(dates)) != len(dates):
        raise IngestError("holiday calendar contains duplicate dates")
    if years is not None:
        allowed = set(years)
        outside = sorted(d for d in dates if d.year not in allowed)
        if outside:
            raise IngestError(f"holiday dates outside the analysis years: {outside}")
    return frozenset(dates)


def french_public_holidays(year: int) -> list[dt.date]:
    """The 11 French public holidays of ``year``."""
    e = easter(year)
    day = dt.timedelta(days=1)
    return sorted([
        dt.date(year, 1, 1), e + day, dt.date(year, 5, 1), dt.date(year, 5, 8),
        e + 39 * day, e + 50 * day, dt.date(year, 7, 14), dt.date(year, 8, 15),
        dt.date(year, 11, 1), dt.date(year, 11, 11), dt.date(year, 12, 25),
    ])
