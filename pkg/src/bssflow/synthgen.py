"""Synthetic usage data with planted ground truth.

Two forward models are provided: the multiplicative calendar model for the
citywide 10-minute series, and the linear factor model ``X = F L^T + E`` for
per-station panels. :func:`synthesize_city` combines both into a trip log
that the ingest pipeline can read back.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.optimize import linear_sum_assignment

from .ingest import RAIN_LABELS, Station, StationRegistry, french_public_holidays
from .panel import (
    MAX_WEEK, CalendarContext, Span, StandardizedPanel, UsagePanel, build_calendar,
    standardize_values,
)

TEN_MINUTES = pd.Timedelta(minutes=10)
DEFAULT_HOLIDAY_MULTIPLIER = 0.7435
DEFAULT_RAIN_MULTIPLIERS = (1.0, 0.769, 0.738)


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class TemporalScenario:
    """Planted multipliers of the calendar model.

    ``f`` has shape ``(2, 144)`` (working, weekend), ``g`` has 53 entries
    (week 1 first) and ``rain`` has one entry per rain level. Reference
    levels ``f[0, 0]``, ``g[0]`` and ``rain[0]`` must equal 1.
    """

    span: Span
    f: np.ndarray
    g: np.ndarray
    h: float
    rain: np.ndarray
    baseline: float
    noise_sigma: float = 0.0
    holidays: tuple[dt.date, ...] = ()
    rain_records: pd.DataFrame | None = None
    wet_fraction: float = 0.15
    seed: int = 0

    def __post_init__(self):
        f, g, rain = (np.asarray(a, dtype=float) for a in (self.f, self.g, self.rain))
        if f.shape != (2, 144) or g.shape != (MAX_WEEK,) or rain.shape != (len(RAIN_LABELS),):
            raise ScenarioError("multiplier arrays have the wrong shape")
        if np.any(f <= 0) or np.any(g <= 0) or np.any(rain <= 0) or self.h <= 0 or self.baseline <= 0:
            raise ScenarioError("all multipliers and the baseline must be positive")
        if not (f[0, 0] == 1.0 and g[0] == 1.0 and rain[0] == 1.0):
            raise ScenarioError("reference multipliers must be exactly 1")
        if self.noise_sigma < 0:
            raise ScenarioError("noise_sigma must be nonnegative")
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "rain", rain)


def _seeds(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def default_daily_profiles() -> np.ndarray:
    """Working-day profile with morning/noon/evening peaks and a weekend hump."""
    slot = np.arange(144)
    hour = slot / 6.0

    def bump(center, width, height):
        return height * np.exp(-0.5 * ((hour - center) / width) ** 2)

    night = 0.25 + 0.75 * (1 + np.cos(2 * np.pi * (hour - 15) / 24)) / 2
    working = night + bump(8.67, 0.6, 6.0) + bump(12.3, 0.8, 2.5) + bump(17.8, 1.0, 5.5)
    weekend = 0.8 * night + bump(15.5, 3.0, 3.5) + bump(1.0, 1.2, 0.8)
    f = np.vstack([working, weekend])
    return f / f[0, 0]


def default_weekly_curve() -> np.ndarray:
    week = np.arange(1, MAX_WEEK + 1)
    g = 1.0 + 0.35 * np.sin(2 * np.pi * (week - 12) / 52) - 0.3 * np.exp(-0.5 * ((week - 32) / 2.5) ** 2)
    return g / g[0]


def default_temporal_scenario(
    span: Span,
    baseline: float = 20.0,
    noise_sigma: float = 0.0,
    seed: int = 0,
    h: float = DEFAULT_HOLIDAY_MULTIPLIER,
    rain=DEFAULT_RAIN_MULTIPLIERS,
) -> TemporalScenario:
    holidays = tuple(d for y in span.years for d in french_public_holidays(y)
                     if span.start <= pd.Timestamp(d) < span.end)
    return TemporalScenario(
        span=span, f=default_daily_profiles(), g=default_weekly_curve(), h=h,
        rain=np.asarray(rain, dtype=float), baseline=baseline, noise_sigma=noise_sigma,
        holidays=holidays, seed=seed,
    )


def generate_rain(span: Span, wet_fraction: float = 0.15, seed: int = 0) -> pd.DataFrame:
    """Hourly rain records: dry with probability ``1 - wet_fraction``, else 1-60 min."""
    rng = np.random.default_rng(seed)
    hours = span.bins(pd.Timedelta(hours=1))
    wet = rng.random(len(hours)) < wet_fraction
    minutes = np.where(wet, rng.integers(1, 61, len(hours)), 0)
    return pd.DataFrame({"hour_start": hours, "rain_minutes": minutes.astype(int)})


def scenario_rain(scenario: TemporalScenario) -> pd.DataFrame:
    if scenario.rain_records is not None:
        return scenario.rain_records
    rain_seed = np.random.SeedSequence(scenario.seed).spawn(2)[0]
    return generate_rain(scenario.span, scenario.wet_fraction,
                         int(rain_seed.generate_state(1)[0]))


def expected_counts(scenario: TemporalScenario, ctx: CalendarContext) -> np.ndarray:
    mu = (scenario.baseline
          * scenario.f[ctx.day_type.astype(int), ctx.time_of_day.astype(int)]
          * scenario.g[ctx.week_index.astype(int) - 1]
          * np.where(ctx.holiday, scenario.h, 1.0)
          * scenario.rain[ctx.rain_level.astype(int)])
    return mu


def generate_temporal(scenario: TemporalScenario) -> tuple[UsagePanel, CalendarContext]:
    """Citywide 10-minute panel drawn from the calendar model.

    Counts are ``round(baseline * f * g * h * l * noise)`` with
    round-half-to-even and a floor at 0; ``noise`` is ``exp(sigma * N(0, 1))``
    or 1 when ``noise_sigma`` is 0.
    """
    bins = scenario.span.bins(TEN_MINUTES)
    ctx = build_calendar(bins, scenario.holidays, scenario_rain(scenario), bin_width=TEN_MINUTES)
    mu = expected_counts(scenario, ctx)
    if scenario.noise_sigma > 0:
        noise_rng = np.random.default_rng(np.random.SeedSequence(scenario.seed).spawn(2)[1])
        mu = mu * np.exp(scenario.noise_sigma * noise_rng.standard_normal(mu.size))
    counts = np.maximum(np.rint(mu), 0).astype(np.int64)[:, None]
    return UsagePanel(bins, TEN_MINUTES, ("citywide",), counts), ctx


@dataclass(frozen=True)
class FactorScenario:
    """Planted factor model for a panel of ``n_obs`` bins.

    ``uniqueness`` defaults to ``1 - communality``. ``exact=True`` makes the
    sample moments equal the population ones (orthonormalized draws), so the
    sample correlation is exactly ``L L^T + diag(uniqueness)``.
    """

    loadings: np.ndarray
    n_obs: int
    uniqueness: np.ndarray | None = None
    seed: int = 0
    exact: bool = False
    ar1: float = 0.0
    station_ids: tuple[str, ...] | None = None
    coordinates: np.ndarray | None = None

    def __post_init__(self):
        lam = np.atleast_2d(np.asarray(self.loadings, dtype=float))
        communality = np.sum(lam**2, axis=1)
        if np.any(communality > 1.0 + 1e-12):
            raise ScenarioError(f"infeasible communality {communality.max():.4f} > 1")
        psi = 1.0 - communality if self.uniqueness is None else np.asarray(self.uniqueness, dtype=float)
        psi = np.clip(psi, 0.0, None) if self.uniqueness is None else psi
        if psi.shape != (lam.shape[0],) or np.any(psi < 0):
            raise ScenarioError("uniqueness must be a nonnegative p-vector")
        implied = lam @ lam.T + np.diag(psi)
        if np.linalg.eigvalsh(implied)[0] < -1e-10:
            raise ScenarioError("implied correlation is not positive semidefinite")
        if not -1.0 < self.ar1 < 1.0:
            raise ScenarioError("ar1 coefficient must lie in (-1, 1)")
        if self.exact and self.ar1:
            raise ScenarioError("exact moments and AR(1) factors are mutually exclusive")
        if self.exact and self.n_obs <= lam.shape[0] + lam.shape[1]:
            raise ScenarioError("exact scenarios need n_obs > p + K")
        object.__setattr__(self, "loadings", lam)
        object.__setattr__(self, "uniqueness", psi)

    @property
    def shape(self) -> tuple[int, int]:
        return self.loadings.shape


@dataclass(frozen=True)
class PlantedTruth:
    loadings: np.ndarray
    uniqueness: np.ndarray
    factors: np.ndarray
    noise: np.ndarray


def planted_loadings(p: int, k: int, loading: float = 0.7) -> np.ndarray:
    """Simple-structure loadings: contiguous blocks of stations per factor."""
    lam = np.zeros((p, k))
    lam[np.arange(p), np.arange(p) * k // p] = loading
    return lam


def generate_panel(
    scenario: FactorScenario, bin_start=None
) -> tuple[StandardizedPanel, PlantedTruth]:
    p, k = scenario.shape
    q = scenario.n_obs
    rng = np.random.default_rng(scenario.seed)
    if scenario.exact:
        m = rng.standard_normal((q, k + p))
        m -= m.mean(axis=0)
        z = np.linalg.qr(m)[0] * np.sqrt(q)
        factors, unit_noise = z[:, :k], z[:, k:]
    else:
        factors = rng.standard_normal((q, k))
        if scenario.ar1:
            phi = scenario.ar1
            innov = factors.copy()
            factors[0] = innov[0]
            for t in range(1, q):
                factors[t] = phi * factors[t - 1] + np.sqrt(1 - phi**2) * innov[t]
        unit_noise = rng.standard_normal((q, p))
    noise = unit_noise * np.sqrt(scenario.uniqueness)
    x = factors @ scenario.loadings.T + noise
    panel = standardize_values(x, bin_start, scenario.station_ids)
    return panel, PlantedTruth(scenario.loadings, scenario.uniqueness, factors, noise)


@dataclass(frozen=True)
class Congruence:
    phi: np.ndarray
    match: np.ndarray
    signs: np.ndarray


def tucker_congruence_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na, nb = np.sqrt(np.sum(a**2, axis=0)), np.sqrt(np.sum(b**2, axis=0))
    if np.any(na == 0) or np.any(nb == 0):
        raise ScenarioError("congruence undefined for an all-zero loading column")
    return (a.T @ b) / np.outer(na, nb)


def congruence(recovered: np.ndarray, planted: np.ndarray) -> Congruence:
    """Per planted factor Tucker congruence with its best-matched recovered factor.

    Matching is a one-to-one assignment maximizing total absolute congruence;
    signs are flipped so that each reported congruence is nonnegative.
    """
    recovered, planted = np.atleast_2d(recovered), np.atleast_2d(planted)
    if recovered.shape[0] != planted.shape[0] or recovered.shape[1] < planted.shape[1]:
        raise ScenarioError(f"shape mismatch: {recovered.shape} vs {planted.shape}")
    phi = tucker_congruence_matrix(recovered, planted)
    rows, cols = linear_sum_assignment(-np.abs(phi))
    order = np.argsort(cols)
    match = rows[order]
    matched = phi[match, np.arange(planted.shape[1])]
    signs = np.where(matched < 0, -1.0, 1.0)
    return Congruence(np.abs(matched), match, signs)


def procrustes_error(recovered: np.ndarray, planted: np.ndarray) -> float:
    """Frobenius error after the best orthogonal alignment of ``recovered``."""
    rot, _ = linalg.orthogonal_procrustes(recovered, planted)
    return float(np.linalg.norm(recovered @ rot - planted))


@dataclass(frozen=True)
class CityScenario:
    """End-to-end synthetic city: trips, stations, weather and holidays."""

    span: Span
    n_stations: int = 30
    n_factors: int = 3
    loading: float = 0.7
    baseline: float = 4.0
    noise_sigma: float = 0.1
    station_signal: float = 0.8
    loop_fraction: float = 0.012
    overlong_fraction: float = 0.003
    wet_fraction: float = 0.15
    center: tuple[float, float] = (45.76, 4.84)
    radius_deg: float = 0.04
    seed: int = 0

    @classmethod
    def from_dict(cls, raw: dict) -> "CityScenario":
        raw = dict(raw)
        span = raw.pop("span")
        span = span if isinstance(span, Span) else Span.from_dates(span["start"], span["end"])
        if "center" in raw:
            raw["center"] = tuple(raw["center"])
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(span=span, **raw)


@dataclass
class SyntheticCity:
    trips: pd.DataFrame
    registry: StationRegistry
    rain: pd.DataFrame
    holidays: list[dt.date]
    truth: dict = field(default_factory=dict)


def synthesize_city(sc: CityScenario) -> SyntheticCity:
    """Trip log whose cleaned citywide departures follow the calendar model.

    Origin stations are drawn per 10-minute bin with probabilities
    ``w_s * exp(station_signal * X[hour, s])`` where ``X`` is a planted
    factor panel over the hourly bins. Invalid trips (short round trips and
    trips over 12 hours) are added on top, so filtering recovers the planted
    citywide counts exactly.
    """
    temporal_rng, factor_seed, station_rng, trip_rng, junk_rng = _seeds(sc.seed, 5)
    tscen = default_temporal_scenario(sc.span, sc.baseline, sc.noise_sigma,
                                      seed=int(temporal_rng.integers(2**31)))
    tscen = TemporalScenario(**{**vars(tscen), "wet_fraction": sc.wet_fraction})
    city, ctx = generate_temporal(tscen)
    rain = scenario_rain(tscen)

    p = sc.n_stations
    ids = tuple(f"S{i:03d}" for i in range(p))
    n_hours = sc.span.n_days * 24
    fscen = FactorScenario(planted_loadings(p, sc.n_factors, sc.loading), n_hours,
                           seed=int(factor_seed.integers(2**31)), station_ids=ids)
    x, truth = generate_panel(fscen)

    lat = sc.center[0] + sc.radius_deg * station_rng.uniform(-1, 1, p)
    lon = sc.center[1] + 1.4 * sc.radius_deg * station_rng.uniform(-1, 1, p)
    weights = np.exp(0.5 * station_rng.standard_normal(p))
    registry = StationRegistry(Station(s, round(float(a), 6), round(float(o), 6), f"Station {s}")
                               for s, a, o in zip(ids, lat, lon))

    logits = np.log(weights) + sc.station_signal * x.values
    prob = np.exp(logits - logits.max(axis=1, keepdims=True))
    prob /= prob.sum(axis=1, keepdims=True)
    n_bin = city.counts[:, 0]
    hour_of_bin = np.arange(city.n_bins) // 6
    per_station = trip_rng.multinomial(n_bin, prob[hour_of_bin])
    bin_idx, origin = np.nonzero(per_station)
    reps = per_station[bin_idx, origin]
    bin_idx, origin = np.repeat(bin_idx, reps), np.repeat(origin, reps)
    n = bin_idx.size
    minute = trip_rng.integers(0, 10, n)
    dep = city.bin_start[bin_idx] + pd.to_timedelta(minute, unit="min")
    dest = trip_rng.choice(p, n, p=weights / weights.sum())
    duration = np.clip(np.rint(np.exp(np.log(13.0) + 0.55 * trip_rng.standard_normal(n))), 3, 180)

    n_loop = int(round(sc.loop_fraction * n))
    n_long = int(round(sc.overlong_fraction * n))
    total_minutes = sc.span.n_days * 24 * 60
    junk_dep = sc.span.start + pd.to_timedelta(junk_rng.integers(0, total_minutes, n_loop + n_long), unit="min")
    junk_origin = junk_rng.integers(0, p, n_loop + n_long)
    junk_dest = np.concatenate([junk_origin[:n_loop], junk_rng.integers(0, p, n_long)])
    junk_duration = np.concatenate([junk_rng.integers(0, 3, n_loop), junk_rng.integers(721, 1200, n_long)])

    all_dep = dep.append(junk_dep)
    all_duration = np.concatenate([duration, junk_duration]).astype(int)
    frame = pd.DataFrame({
        "departure_time": all_dep,
        "arrival_time": all_dep + pd.to_timedelta(all_duration, unit="min"),
        "origin_station": np.asarray(ids)[np.concatenate([origin, junk_origin])],
        "destination_station": np.asarray(ids)[np.concatenate([dest, junk_dest])],
        "duration_min": all_duration.astype(float),
    })
    frame = frame.sort_values(["departure_time", "origin_station", "destination_station"],
                              kind="stable").reset_index(drop=True)
    truth_dict = {
        "seed": sc.seed,
        "n_valid_trips": int(n),
        "n_short_loops": n_loop,
        "n_overlong": n_long,
        "holiday_multiplier": tscen.h,
        "rain_multipliers": dict(zip(RAIN_LABELS, tscen.rain.tolist())),
        "baseline": tscen.baseline,
        "n_factors": sc.n_factors,
        "loadings": truth.loadings.tolist(),
        "station_ids": list(ids),
    }
    return SyntheticCity(frame, registry, rain, list(tscen.holidays), truth_dict)


def write_city(city: SyntheticCity, out_dir) -> dict[str, str]:
    """Write the city in the ingest formats; returns the file names used."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = {"trips": "trips.csv", "stations": "stations.csv",
             "weather": "weather.csv", "holidays": "holidays.txt"}
    trips = city.trips.copy()
    for col in ("departure_time", "arrival_time"):
        trips[col] = trips[col].dt.strftime("%Y-%m-%dT%H:%M")
    trips[["departure_time", "arrival_time", "origin_station", "destination_station"]].to_csv(
        out / names["trips"], index=False, lineterminator="\n")
    city.registry.to_frame().to_csv(out / names["stations"], index=False, lineterminator="\n")
    rain = city.rain.copy()
    rain["hour_start"] = rain["hour_start"].dt.strftime("%Y-%m-%dT%H:%M")
    rain.to_csv(out / names["weather"], index=False, lineterminator="\n")
    (out / names["holidays"]).write_text("".join(f"{d.isoformat()}\n" for d in city.holidays))
    with open(out / "truth.json", "w", encoding="utf-8") as fh:
        json.dump(city.truth, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return names
