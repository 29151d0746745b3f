"""Descriptive statistics: trip durations, trimmed ANOVA, profile and station comparisons."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import pandas as pd
from scipy import stats

from .panel import DAY_TYPES, UsagePanel, week_of_year
from .temporal import DailyProfile

logger = logging.getLogger(__name__)

ANOVA_TRIM = (1.0, 120.0)


class DescriptiveError(ValueError):
    pass


@dataclass(frozen=True)
class DurationStats:
    period: str
    day_type: str
    year: int
    n: int
    p10: float
    q1: float
    q2: float
    q3: float
    p90: float


@dataclass(frozen=True)
class AnovaResult:
    f_statistic: float
    p_value: float
    n_a: int
    n_b: int


@dataclass(frozen=True)
class StationChange:
    station_id: str
    trips_year_a: int
    trips_year_b: int
    pct_change: float
    comparable_bins: int

    @property
    def defined(self) -> bool:
        return np.isfinite(self.pct_change)


def nearest_rank_percentiles(values, percents) -> np.ndarray:
    """Nearest-rank percentiles: the ceil(P/100 * n)-th smallest value."""
    return np.percentile(np.asarray(values, dtype=float), percents, method="inverted_cdf")


def period_mask(dates: pd.DatetimeIndex, bounds) -> np.ndarray:
    if bounds is None:
        return np.ones(len(dates), dtype=bool)
    start, end = (tuple(int(x) for x in str(b).split("-")) for b in bounds)
    md = dates.month * 100 + dates.day
    lo, hi = start[0] * 100 + start[1], end[0] * 100 + end[1]
    return np.asarray((md >= lo) & (md <= hi)) if lo <= hi else np.asarray((md >= lo) | (md <= hi))


def duration_stats(
    trips: pd.DataFrame,
    periods: Mapping[str, tuple[str, str] | None] | None = None,
) -> list[DurationStats]:
    """Duration percentiles per period x day type x year.

    ``periods`` maps a label to inclusive ``("MM-DD", "MM-DD")`` bounds
    applied to every year (``None`` means the whole year). Groups without
    trips are omitted and logged.
    """
    periods = periods or {"all": None}
    dep = pd.DatetimeIndex(trips["departure_time"])
    durations = trips["duration_min"].to_numpy(dtype=float)
    weekend = np.asarray(dep.dayofweek >= 5)
    years = sorted(set(dep.year))
    out = []
    for label, bounds in periods.items():
        in_period = period_mask(dep, bounds)
        for year in years:
            for d, day_type in enumerate(DAY_TYPES):
                mask = in_period & np.asarray(dep.year == year) & (weekend == bool(d))
                if not mask.any():
                    logger.info("duration_stats: empty group (%s, %s, %d) omitted", label, day_type, year)
                    continue
                p10, q1, q2, q3, p90 = nearest_rank_percentiles(durations[mask], [10, 25, 50, 75, 90])
                out.append(DurationStats(label, day_type, int(year), int(mask.sum()),
                                         float(p10), float(q1), float(q2), float(q3), float(p90)))
    return out


def duration_stats_frame(rows: list[DurationStats]) -> pd.DataFrame:
    return pd.DataFrame([vars(r) for r in rows],
                        columns=["period", "day_type", "year", "n", "p10", "q1", "q2", "q3", "p90"])


def trimmed_anova(durations_a, durations_b, trim: tuple[float, float] = ANOVA_TRIM) -> AnovaResult:
    """One-way ANOVA of two duration samples after trimming to ``[trim[0], trim[1]]`` minutes."""
    lo, hi = trim
    a = np.asarray(durations_a, dtype=float)
    b = np.asarray(durations_b, dtype=float)
    a, b = a[(a >= lo) & (a <= hi)], b[(b >= lo) & (b <= hi)]
    if a.size == 0 or b.size == 0:
        raise DescriptiveError("a group is empty after trimming")
    if a.size + b.size < 3:
        raise DescriptiveError("too few observations for ANOVA")
    grand = np.concatenate([a, b]).mean()
    between = a.size * (a.mean() - grand) ** 2 + b.size * (b.mean() - grand) ** 2
    within = np.sum((a - a.mean()) ** 2) + np.sum((b - b.mean()) ** 2)
    df_within = a.size + b.size - 2
    if within == 0:
        f = 0.0 if between == 0 else np.inf
    else:
        f = between / (within / df_within)
    p = float(stats.f.sf(f, 1, df_within)) if np.isfinite(f) else 0.0
    return AnovaResult(float(f), p, int(a.size), int(b.size))


def profile_correlation(profile_a, profile_b) -> float:
    """Pearson correlation between two daily profiles of equal length."""
    a = np.asarray(profile_a.values if isinstance(profile_a, DailyProfile) else profile_a, dtype=float)
    b = np.asarray(profile_b.values if isinstance(profile_b, DailyProfile) else profile_b, dtype=float)
    if a.shape != b.shape:
        raise DescriptiveError(f"profiles differ in length ({a.size} vs {b.size})")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise DescriptiveError("correlation undefined for a constant profile")
    a, b = a - a.mean(), b - b.mean()
    return float(np.dot(a, b) / np.sqrt(np.dot(a, a) * np.dot(b, b)))


def _weekly(panel: UsagePanel) -> tuple[np.ndarray, np.ndarray]:
    weeks = week_of_year(panel.bin_start)
    frame = pd.DataFrame(panel.counts, columns=range(panel.counts.shape[1]))
    frame["week"] = weeks
    totals = frame.groupby("week").sum()
    return totals.index.to_numpy(), totals.to_numpy()


def station_change(
    panel_a: UsagePanel,
    panel_b: UsagePanel,
    arrivals_a: UsagePanel | None = None,
    arrivals_b: UsagePanel | None = None,
) -> list[StationChange]:
    """Percentage change in departures per station between two years.

    A station is out of service in a week when it records neither departures
    nor arrivals (departures only, if arrival panels are not given); such
    weeks are dropped from both years before the totals are compared.
    Stations with no year-a trips over the comparable weeks get a NaN change.
    """
    ids = panel_a.station_ids
    for other in (panel_b, arrivals_a, arrivals_b):
        if other is not None and other.station_ids != ids:
            raise DescriptiveError("panels do not share the station axis")
    weeks_a, dep_a = _weekly(panel_a)
    weeks_b, dep_b = _weekly(panel_b)
    act_a = dep_a + (_weekly(arrivals_a)[1] if arrivals_a is not None else 0)
    act_b = dep_b + (_weekly(arrivals_b)[1] if arrivals_b is not None else 0)

    common = np.intersect1d(weeks_a, weeks_b)
    ia, ib = np.searchsorted(weeks_a, common), np.searchsorted(weeks_b, common)
    service = (act_a[ia] > 0) & (act_b[ib] > 0)
    bin_weeks = week_of_year(panel_a.bin_start)
    bins_per_week = np.array([np.sum(bin_weeks == w) for w in common])

    out = []
    for s, sid in enumerate(ids):
        ok = service[:, s]
        a = int(dep_a[ia[ok], s].sum())
        b = int(dep_b[ib[ok], s].sum())
        pct = 100.0 * (b - a) / a if a > 0 else float("nan")
        if a == 0:
            logger.info("station_change: %s has no comparable year-a trips; change undefined", sid)
        out.append(StationChange(sid, a, b, pct, int(bins_per_week[ok].sum())))
    return out


def station_change_frame(rows: list[StationChange]) -> pd.DataFrame:
    return pd.DataFrame([vars(r) for r in rows],
                        columns=["station_id", "trips_year_a", "trips_year_b", "pct_change", "comparable_bins"])
