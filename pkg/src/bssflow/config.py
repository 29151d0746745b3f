"""Run configuration loaded from a YAML file.

Schema (paths are relative to the config file)::

    city: Lyon
    span: {start: 2019-01-01, end: 2020-12-31}   # inclusive dates
    timezone: Europe/Paris
    inputs: {trips: trips.csv, stations: stations.csv,
             weather: weather.csv, holidays: holidays.txt}
    analyses: [temporal, efa, descriptive]
    export_dir: results
    threshold: 0.2
    seed: 0
    efa: {factors: null, pa_replicates: 100, pa_quantile: 0.99}
    periods: {spring: [03-17, 05-10]}            # optional, for durations
    temporal: {offset: 1.0}                      # log(count + offset)
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .efa import EfaConfig
from .export import LOADING_THRESHOLD
from .panel import Span

ANALYSES = ("temporal", "efa", "descriptive")
INPUT_KINDS = ("trips", "stations", "weather", "holidays")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    trips: Path
    stations: Path
    weather: Path | None
    holidays: Path | None
    span: Span
    city: str = "city"
    timezone: str | None = "Europe/Paris"
    analyses: tuple[str, ...] = ANALYSES
    efa: EfaConfig = field(default_factory=EfaConfig)
    export_dir: Path = Path("results")
    threshold: float = LOADING_THRESHOLD
    periods: dict = field(default_factory=dict)
    log_offset: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must lie in [0, 1], got {self.threshold}")
        bad = set(self.analyses) - set(ANALYSES)
        if bad:
            raise ConfigError(f"unknown analyses {sorted(bad)}")

    def check_inputs(self) -> None:
        for kind in INPUT_KINDS:
            path = getattr(self, kind)
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"{kind} file not found: {path}")

    def with_overrides(self, *, seed=None, out=None, threshold=None, factors=None,
                       pa_replicates=None, pa_quantile=None) -> "RunConfig":
        efa = self.efa
        if seed is not None:
            efa = replace(efa, seed=seed)
        if factors is not None:
            efa = replace(efa, n_factors=factors)
        if pa_replicates is not None:
            efa = replace(efa, pa_replicates=pa_replicates)
        if pa_quantile is not None:
            efa = replace(efa, pa_quantile=pa_quantile)
        return replace(
            self, efa=efa,
            export_dir=Path(out) if out is not None else self.export_dir,
            threshold=threshold if threshold is not None else self.threshold,
        )


def _date(value) -> dt.date:
    if isinstance(value, dt.date):
        return value
    try:
        return dt.date.fromisoformat(str(value))
    except ValueError as exc:
        raise ConfigError(f"bad date {value!r}") from exc


def parse_span(raw) -> Span:
    if not isinstance(raw, dict) or not {"start", "end"} <= set(raw):
        raise ConfigError("span needs 'start' and 'end' dates")
    return Span.from_dates(_date(raw["start"]), _date(raw["end"]))


def load_yaml(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    return raw


def load_config(path) -> RunConfig:
    path = Path(path)
    raw = load_yaml(path)
    base = path.parent
    inputs = raw.get("inputs") or {}
    if "trips" not in inputs or "stations" not in inputs:
        raise ConfigError("inputs must name at least 'trips' and 'stations'")

    def resolve(p):
        return None if p is None else (base / p if not Path(p).is_absolute() else Path(p))

    efa_raw = dict(raw.get("efa") or {})
    efa = EfaConfig(
        n_factors=efa_raw.pop("factors", None),
        pa_replicates=int(efa_raw.pop("pa_replicates", 100)),
        pa_quantile=efa_raw.pop("pa_quantile", EfaConfig.pa_quantile),
        seed=int(efa_raw.pop("seed", raw.get("seed", 0))),
        kaiser_normalize=bool(efa_raw.pop("kaiser_normalize", True)),
    )
    if efa_raw:
        raise ConfigError(f"unknown efa keys {sorted(efa_raw)}")
    periods = {str(k): (None if v is None else tuple(str(x) for x in v))
               for k, v in (raw.get("periods") or {}).items()}
    return RunConfig(
        trips=resolve(inputs["trips"]),
        stations=resolve(inputs["stations"]),
        weather=resolve(inputs.get("weather")),
        holidays=resolve(inputs.get("holidays")),
        span=parse_span(raw.get("span")),
        city=str(raw.get("city", "city")),
        timezone=raw.get("timezone", "Europe/Paris"),
        analyses=tuple(raw.get("analyses", ANALYSES) or ()),
        efa=efa,
        export_dir=resolve(raw.get("export_dir", "results")),
        threshold=float(raw.get("threshold", LOADING_THRESHOLD)),
        periods=periods,
        log_offset=float((raw.get("temporal") or {}).get("offset", 1.0)),
    )
