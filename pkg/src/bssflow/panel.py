"""Time-binned usage panels, calendar features and per-station standardization."""

from __future__ import annotations

import datetime as dt
import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .ingest import RAIN_LABELS, RainLevel, classify_rain_array

logger = logging.getLogger(__name__)

CITYWIDE = "citywide"
DEPARTURES = "departures"
ARRIVALS = "arrivals"
WORKING, WEEKEND = 0, 1
DAY_TYPES = ("working", "weekend")
MAX_WEEK = 53

CACHE_MAGIC = "bssflow-panel"
CACHE_VERSION = 1


class PanelError(ValueError):
    pass


@dataclass(frozen=True)
class Span:
    """Half-open range of whole days ``[start, end)``."""

    start: pd.Timestamp
    end: pd.Timestamp

    def __post_init__(self):
        start, end = pd.Timestamp(self.start), pd.Timestamp(self.end)
        if start != start.normalize() or end != end.normalize():
            raise PanelError(f"span {start} .. {end} is not aligned to whole days")
        if end <= start:
            raise PanelError("span end must come after its start")
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "end", end)

    @classmethod
    def for_years(cls, first: int, last: int | None = None) -> "Span":
        last = first if last is None else last
        return cls(pd.Timestamp(first, 1, 1), pd.Timestamp(last + 1, 1, 1))

    @classmethod
    def from_dates(cls, first_day, last_day) -> "Span":
        """Span covering ``first_day`` through ``last_day`` inclusive."""
        return cls(pd.Timestamp(first_day), pd.Timestamp(last_day) + pd.Timedelta(days=1))

    @property
    def n_days(self) -> int:
        return (self.end - self.start).days

    @property
    def years(self) -> list[int]:
        return list(range(self.start.year, (self.end - pd.Timedelta(days=1)).year + 1))

    def bins(self, width: pd.Timedelta) -> pd.DatetimeIndex:
        width = pd.Timedelta(width)
        if width <= pd.Timedelta(0) or pd.Timedelta(days=1) % width != pd.Timedelta(0):
            raise PanelError(f"bin width {width} does not divide a day evenly")
        return pd.date_range(self.start, self.end, freq=width, inclusive="left")


@dataclass(frozen=True)
class UsagePanel:
    bin_start: pd.DatetimeIndex
    bin_width: pd.Timedelta
    station_ids: tuple[str, ...]
    counts: np.ndarray
    direction: str = DEPARTURES

    def __post_init__(self):
        if self.counts.shape != (len(self.bin_start), len(self.station_ids)):
            raise PanelError(
                f"counts shape {self.counts.shape} does not match "
                f"{len(self.bin_start)} bins x {len(self.station_ids)} stations"
            )
        if np.any(self.counts < 0):
            raise PanelError("counts must be nonnegative")

    @property
    def n_bins(self) -> int:
        return len(self.bin_start)

    def citywide(self) -> "UsagePanel":
        return UsagePanel(self.bin_start, self.bin_width, (CITYWIDE,),
                          self.counts.sum(axis=1, keepdims=True), self.direction)

    def select(self, mask) -> "UsagePanel":
        """Sub-panel restricted to the bins where ``mask`` is true."""
        mask = np.asarray(mask, dtype=bool)
        return UsagePanel(self.bin_start[mask], self.bin_width, self.station_ids,
                          self.counts[mask], self.direction)

    def year(self, year: int) -> "UsagePanel":
        return self.select(self.bin_start.year == year)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.counts, index=self.bin_start, columns=list(self.station_ids))
        frame.index.name = "bin_start"
        return frame


@dataclass(frozen=True)
class CalendarContext:
    """Per-bin calendar and weather features aligned with a panel."""

    bin_start: pd.DatetimeIndex
    time_of_day: np.ndarray
    day_type: np.ndarray
    week_index: np.ndarray
    holiday: np.ndarray
    rain_level: np.ndarray
    slots_per_day: int
    missing_rain_bins: int = 0

    def __len__(self) -> int:
        return len(self.bin_start)

    def row(self, i: int) -> dict:
        return {
            "time_of_day": int(self.time_of_day[i]),
            "day_type": DAY_TYPES[self.day_type[i]],
            "week_index": int(self.week_index[i]),
            "holiday": bool(self.holiday[i]),
            "rain_level": RAIN_LABELS[self.rain_level[i]],
        }

    def select(self, mask) -> "CalendarContext":
        mask = np.asarray(mask, dtype=bool)
        return CalendarContext(self.bin_start[mask], self.time_of_day[mask], self.day_type[mask],
                               self.week_index[mask], self.holiday[mask], self.rain_level[mask],
                               self.slots_per_day, self.missing_rain_bins)


@dataclass(frozen=True)
class StandardizedPanel:
    bin_start: pd.DatetimeIndex
    station_ids: tuple[str, ...]
    values: np.ndarray
    column_means: np.ndarray
    column_stds: np.ndarray
    excluded_stations: dict[str, str] = field(default_factory=dict)

    def destandardize(self) -> np.ndarray:
        return self.values * self.column_stds + self.column_means


def week_of_year(dates) -> np.ndarray:
    """Monday-started week number within the calendar year, 1..53.

    Week 1 runs from 1 January to the first Sunday; each later week starts on
    a Monday. This matches ISO-8601 numbering whenever 1 January falls on
    Monday to Thursday, except for the last days of December that ISO moves
    into week 1 of the next year. The single Monday that would form a 54th
    week (a leap year starting on a Sunday) is folded into week 53.
    """
    d = pd.DatetimeIndex(dates)
    jan1_weekday = pd.DatetimeIndex(pd.to_datetime({"year": d.year, "month": 1, "day": 1})).dayofweek
    week = (d.dayofyear - 1 + jan1_weekday) // 7 + 1
    return np.minimum(np.asarray(week), MAX_WEEK).astype(np.int16)


def bin_trips(
    trips: pd.DataFrame,
    width: pd.Timedelta,
    span: Span,
    per_station: bool = False,
    direction: str = DEPARTURES,
    stations: Sequence[str] | None = None,
) -> UsagePanel:
    """Count trips per time bin (and per station), by departure or arrival time.

    Trips outside the span, or at stations not listed in ``stations``, are
    ignored. Empty bins are present with count 0.
    """
    if direction not in (DEPARTURES, ARRIVALS):
        raise PanelError(f"direction must be {DEPARTURES!r} or {ARRIVALS!r}")
    width = pd.Timedelta(width)
    bins = span.bins(width)
    if per_station:
        if stations is None:
            col = "origin_station" if direction == DEPARTURES else "destination_station"
            stations = sorted(trips[col].unique())
        station_ids = tuple(stations)
    else:
        station_ids = (CITYWIDE,)
    n_bins, n_st = len(bins), len(station_ids)

    time_col = "departure_time" if direction == DEPARTURES else "arrival_time"
    if len(trips):
        offsets = (trips[time_col] - span.start).to_numpy()
        idx = (offsets // width.to_timedelta64()).astype(np.int64)
        keep = (offsets >= np.timedelta64(0)) & (idx < n_bins)
        if per_station:
            col = "origin_station" if direction == DEPARTURES else "destination_station"
            lookup = pd.Index(station_ids)
            s = lookup.get_indexer(trips[col])
            keep &= s >= 0
        else:
            s = np.zeros(len(trips), dtype=np.int64)
        flat = idx[keep] * n_st + s[keep]
        counts = np.bincount(flat, minlength=n_bins * n_st).reshape(n_bins, n_st)
    else:
        counts = np.zeros((n_bins, n_st), dtype=np.int64)
    return UsagePanel(bins, width, station_ids, counts.astype(np.int64), direction)


def _rain_frame(rain) -> pd.DataFrame:
    if rain is None:
        return pd.DataFrame({"hour_start": pd.DatetimeIndex([]), "rain_minutes": []})
    if isinstance(rain, pd.DataFrame):
        return rain
    records = list(rain)
    return pd.DataFrame({
        "hour_start": pd.to_datetime([r.hour_start for r in records]),
        "rain_minutes": [r.rain_minutes for r in records],
    })


def build_calendar(
    panel: UsagePanel | pd.DatetimeIndex,
    holidays: Iterable[dt.date] = (),
    rain=None,
    bin_width: pd.Timedelta | None = None,
) -> CalendarContext:
    """Annotate each bin with slot, day type, week, holiday flag and rain level.

    ``rain`` is a frame from :func:`~bssflow.ingest.read_weather` or an
    iterable of records with ``hour_start``/``rain_minutes``. A bin inherits
    the level of its containing hour; hours without a record count as Low
    and are reported in ``missing_rain_bins``.
    """
    if isinstance(panel, UsagePanel):
        bins, width = panel.bin_start, panel.bin_width
    else:
        bins, width = pd.DatetimeIndex(panel), pd.Timedelta(bin_width)
    slots_per_day = int(pd.Timedelta(days=1) / width)
    minutes = bins.hour * 60 + bins.minute
    time_of_day = np.asarray(minutes // int(width.total_seconds() // 60), dtype=np.int16)
    day_type = np.where(bins.dayofweek >= 5, WEEKEND, WORKING).astype(np.int8)
    holiday_set = {pd.Timestamp(d) for d in holidays}
    holiday = np.asarray(bins.normalize().isin(list(holiday_set)), dtype=bool)

    frame = _rain_frame(rain)
    levels = pd.Series(classify_rain_array(frame["rain_minutes"].to_numpy()),
                       index=pd.DatetimeIndex(frame["hour_start"]))
    looked_up = levels.reindex(bins.floor("h"))
    missing = int(looked_up.isna().sum())
    if missing:
        logger.warning("build_calendar: %d bin(s) lack a rain record; annotated Low", missing)
    rain_level = looked_up.fillna(int(RainLevel.LOW)).to_numpy().astype(np.int8)

    return CalendarContext(
        bin_start=bins,
        time_of_day=time_of_day,
        day_type=day_type,
        week_index=week_of_year(bins),
        holiday=holiday,
        rain_level=rain_level,
        slots_per_day=slots_per_day,
        missing_rain_bins=missing,
    )


def standardize(panel: UsagePanel) -> StandardizedPanel:
    """Column z-scores with the population standard deviation.

    Zero-variance columns are dropped and listed in ``excluded_stations``.
    """
    if panel.n_bins < 2:
        raise PanelError("standardization needs at least 2 bins")
    return standardize_values(panel.counts, panel.bin_start, panel.station_ids)


def standardize_values(values: np.ndarray, bin_start=None, station_ids=None) -> StandardizedPanel:
    """Standardize a real-valued matrix (rows = bins) like :func:`standardize`."""
    x = np.asarray(values, dtype=float)
    q, p = x.shape
    ids = tuple(station_ids) if station_ids is not None else tuple(f"s{i:03d}" for i in range(p))
    if bin_start is None:
        bin_start = pd.date_range("2000-01-01", periods=q, freq="h")
    mean = x.mean(axis=0)
    centered = x - mean
    std = np.sqrt(np.mean(centered**2, axis=0))
    keep = std > 0
    if not keep.any():
        raise PanelError("every column has zero variance")
    z = centered[:, keep] / std[keep]
    # second pass removes the rounding left by the first
    z -= z.mean(axis=0)
    z /= np.sqrt(np.mean(z**2, axis=0))
    excluded = {sid: "zero-variance" for sid, k in zip(ids, keep) if not k}
    return StandardizedPanel(pd.DatetimeIndex(bin_start), tuple(s for s, k in zip(ids, keep) if k),
                             z, mean[keep], std[keep], excluded)


def write_panel_csv(panel: UsagePanel, path) -> None:
    frame = panel.to_frame()
    frame.index = frame.index.strftime("%Y-%m-%dT%H:%M")
    frame.to_csv(path, lineterminator="\n")


def read_panel_csv(path, bin_width: pd.Timedelta, direction: str = DEPARTURES) -> UsagePanel:
    frame = pd.read_csv(path, index_col="bin_start", dtype={"bin_start": str})
    bins = pd.DatetimeIndex(pd.to_datetime(frame.index, format="ISO8601"))
    return UsagePanel(bins, pd.Timedelta(bin_width), tuple(str(c) for c in frame.columns),
                      frame.to_numpy(dtype=np.int64), direction)


def save_panels(path, **panels: UsagePanel) -> None:
    """Write named panels to one ``.npz`` cache with a versioned JSON header."""
    header = {"magic": CACHE_MAGIC, "version": CACHE_VERSION, "panels": {}}
    arrays = {}
    for name, p in panels.items():
        header["panels"][name] = {
            "start": p.bin_start[0].isoformat() if p.n_bins else None,
            "n_bins": p.n_bins,
            "bin_width_s": int(p.bin_width.total_seconds()),
            "station_ids": list(p.station_ids),
            "direction": p.direction,
        }
        arrays[f"{name}__counts"] = p.counts
        arrays[f"{name}__bins"] = p.bin_start.asi8
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    # fixed entry timestamps keep the cache byte-reproducible
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


def load_panels(path) -> dict[str, UsagePanel]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("magic") != CACHE_MAGIC:
            raise PanelError(f"{path} is not a panel cache")
        if header.get("version") != CACHE_VERSION:
            raise PanelError(f"unsupported panel cache version {header.get('version')}")
        out = {}
        for name, meta in header["panels"].items():
            out[name] = UsagePanel(
                pd.DatetimeIndex(data[f"{name}__bins"].astype("datetime64[ns]")),
                pd.Timedelta(seconds=meta["bin_width_s"]),
                tuple(meta["station_ids"]),
                data[f"{name}__counts"].astype(np.int64),
                meta["direction"],
            )
    return out
