"""Command-line front end: ``bssflow {synth,ingest,fit-temporal,fit-efa,describe,report}``.

Every command reads a YAML run config (``--config``), writes below the
export directory (``--out`` overrides it) and draws randomness only from
``--seed``. Failures print one line ``error: <Kind>: <message>`` on stderr
and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import descriptive, export, ingest, panel, synthgen, temporal
from .config import ConfigError, RunConfig, load_config, load_yaml, parse_span
from .efa import EfaError, run_efa

logger = logging.getLogger("bssflow")

CACHE_DIR = "cache"
PANEL_CACHE = "panels.npz"
CLEAN_TRIPS = "trips_clean.csv"
INGEST_REPORT = "ingest_report.json"


class CliError(RuntimeError):
    pass


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_registry(cfg: RunConfig) -> ingest.StationRegistry:
    return ingest.read_stations(cfg.stations)


def _read_calendar_inputs(cfg: RunConfig):
    holidays = ingest.read_holidays(cfg.holidays, cfg.span.years) if cfg.holidays else frozenset()
    rain = ingest.read_weather(cfg.weather) if cfg.weather else None
    return holidays, rain


def _cache_path(cfg: RunConfig) -> Path:
    return cfg.export_dir / CACHE_DIR / PANEL_CACHE


def _load_cache(cfg: RunConfig) -> dict[str, panel.UsagePanel]:
    path = _cache_path(cfg)
    if not path.is_file():
        raise CliError(f"panel cache missing at {path}; run 'ingest' first")
    return panel.load_panels(path)


def cmd_ingest(cfg: RunConfig) -> dict:
    cfg.check_inputs()
    registry = _read_registry(cfg)
    trips, parse_report = ingest.parse_trips(cfg.trips, registry, cfg.timezone)
    clean, filter_report = ingest.filter_trips(trips)
    stations = registry.ids
    ten, hour = pd.Timedelta(minutes=10), pd.Timedelta(hours=1)
    panels = {
        "citywide_10min": panel.bin_trips(clean, ten, cfg.span),
        "station_hourly_departures": panel.bin_trips(clean, hour, cfg.span, True, panel.DEPARTURES, stations),
        "station_hourly_arrivals": panel.bin_trips(clean, hour, cfg.span, True, panel.ARRIVALS, stations),
    }
    cache = cfg.export_dir / CACHE_DIR
    cache.mkdir(parents=True, exist_ok=True)
    panel.save_panels(cache / PANEL_CACHE, **panels)
    out = clean.copy()
    for col in ("departure_time", "arrival_time"):
        out[col] = out[col].dt.strftime("%Y-%m-%dT%H:%M")
    out.to_csv(cache / CLEAN_TRIPS, index=False, lineterminator="\n")

    in_span = int(panels["citywide_10min"].counts.sum())
    report = {
        "city": cfg.city,
        "span": [str(cfg.span.start.date()), str((cfg.span.end - pd.Timedelta(days=1)).date())],
        "stations": len(registry),
        "parse": asdict(parse_report),
        "filter": {**asdict(filter_report), "n_removed": filter_report.n_removed,
                   "removed_pct": 100.0 * filter_report.removed_fraction},
        "trips_in_span": in_span,
    }
    _write_json(cfg.export_dir / INGEST_REPORT, report)
    print(f"ingest: {parse_report.valid} valid rows, removed {filter_report.n_removed} "
          f"({100 * filter_report.removed_fraction:.2f}%), {in_span} trips in span")
    return report


def cmd_fit_temporal(cfg: RunConfig) -> dict:
    city = _load_cache(cfg)["citywide_10min"]
    holidays, rain = _read_calendar_inputs(cfg)
    out_root = cfg.export_dir / "temporal"
    summary = {}
    for year in cfg.span.years:
        sub = city.year(year)
        ctx = panel.build_calendar(sub, holidays, rain)
        result = temporal.fit(temporal.build_design(sub, ctx, offset=cfg.log_offset))
        out = out_root / str(year)
        out.mkdir(parents=True, exist_ok=True)
        temporal.write_fit_json(result, out / "fit.json")
        temporal.profiles_frame(result, "sum-to-one").to_csv(out / "profiles.csv", index=False,
                                                             lineterminator="\n")
        temporal.profiles_frame(result, "raw").to_csv(out / "profiles_raw.csv", index=False,
                                                      lineterminator="\n")
        temporal.weekly_frame(result).to_csv(out / "weekly.csv", index=False, lineterminator="\n")
        summary[str(year)] = {
            "r_squared": result.r_squared,
            "n_parameters": result.n_parameters,
            "degrees_of_freedom": result.degrees_of_freedom,
            "holiday_multiplier": result.h_hat,
            "rain_multipliers": dict(zip(ingest.RAIN_LABELS, result.l_hat.tolist())),
            "variance_decomposition": result.variance_decomposition,
            "missing_rain_bins": ctx.missing_rain_bins,
        }
        print(f"fit-temporal {year}: R^2 = {result.r_squared:.4f}, "
              f"{result.n_parameters} parameters, df = {result.degrees_of_freedom}")
    _write_json(out_root / "summary.json", summary)
    return summary


def cmd_fit_efa(cfg: RunConfig) -> dict:
    dep = _load_cache(cfg)["station_hourly_departures"]
    registry = _read_registry(cfg)
    std = panel.standardize(dep)
    model = run_efa(std, cfg.efa)
    out = cfg.export_dir / "efa"
    export.write_efa(model, out)
    maps = export.write_loading_maps(model, registry, out / "maps", cfg.threshold)
    if std.excluded_stations:
        _write_json(out / "excluded_stations.json", std.excluded_stations)
    print(f"fit-efa: K = {model.n_factors}, total variance share = {model.total_variance_share:.4f}, "
          f"{len(maps)} loading map(s)")
    return {"n_factors": model.n_factors, "total_variance_share": model.total_variance_share}


def _read_clean_trips(cfg: RunConfig) -> pd.DataFrame:
    path = cfg.export_dir / CACHE_DIR / CLEAN_TRIPS
    if not path.is_file():
        raise CliError(f"cleaned trips missing at {path}; run 'ingest' first")
    trips = pd.read_csv(path, dtype={"origin_station": str, "destination_station": str})
    for col in ("departure_time", "arrival_time"):
        trips[col] = pd.to_datetime(trips[col], format="ISO8601")
    return trips


def cmd_describe(cfg: RunConfig) -> dict:
    trips = _read_clean_trips(cfg)
    out = cfg.export_dir / "descriptive"
    out.mkdir(parents=True, exist_ok=True)
    periods = cfg.periods or {"all": None}
    rows = descriptive.duration_stats(trips, periods)
    descriptive.duration_stats_frame(rows).to_csv(out / "duration_stats.csv", index=False,
                                                  lineterminator="\n")
    years = cfg.span.years
    result = {"duration_groups": len(rows)}
    if len(years) >= 2:
        ya, yb = years[0], years[1]
        dep = pd.DatetimeIndex(trips["departure_time"])
        weekend = np.asarray(dep.dayofweek >= 5)
        anova_rows = []
        for label, bounds in periods.items():
            in_period = descriptive.period_mask(dep, bounds)
            for d, day_type in enumerate(panel.DAY_TYPES):
                sel = in_period & (weekend == bool(d))
                a = trips["duration_min"][sel & np.asarray(dep.year == ya)]
                b = trips["duration_min"][sel & np.asarray(dep.year == yb)]
                try:
                    res = descriptive.trimmed_anova(a, b)
                except descriptive.DescriptiveError as exc:
                    logger.info("describe: ANOVA skipped for %s/%s: %s", label, day_type, exc)
                    continue
                anova_rows.append({"period": label, "day_type": day_type, "year_a": ya, "year_b": yb,
                                   "n_a": res.n_a, "n_b": res.n_b, "f_statistic": res.f_statistic,
                                   "p_value": res.p_value})
        pd.DataFrame(anova_rows).to_csv(out / "anova.csv", index=False, lineterminator="\n")

        cache = _load_cache(cfg)
        dep_p, arr_p = cache["station_hourly_departures"], cache["station_hourly_arrivals"]
        changes = descriptive.station_change(dep_p.year(ya), dep_p.year(yb), arr_p.year(ya), arr_p.year(yb))
        descriptive.station_change_frame(changes).to_csv(out / "station_change.csv", index=False,
                                                         lineterminator="\n")
        result["stations_compared"] = len(changes)

        prof = {}
        for y in (ya, yb):
            path = cfg.export_dir / "temporal" / str(y) / "profiles.csv"
            if path.is_file():
                prof[y] = pd.read_csv(path)
        if len(prof) == 2:
            corr_rows = []
            for day_type in panel.DAY_TYPES:
                try:
                    r = descriptive.profile_correlation(prof[ya][day_type].to_numpy(),
                                                        prof[yb][day_type].to_numpy())
                except descriptive.DescriptiveError:
                    continue
                corr_rows.append({"day_type": day_type, "year_a": ya, "year_b": yb, "pearson_r": r})
            pd.DataFrame(corr_rows).to_csv(out / "profile_correlation.csv", index=False,
                                           lineterminator="\n")
    print(f"describe: {len(rows)} duration group(s) written to {out}")
    return result


def _read_json(path: Path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def build_report(cfg: RunConfig) -> str:
    path = cfg.export_dir / INGEST_REPORT
    if not path.is_file():
        raise CliError(f"ingest report missing at {path}; run 'ingest' first")
    ing = _read_json(path)
    lines = [f"Bike-share usage report: {ing['city']}",
             f"Span: {ing['span'][0]} .. {ing['span'][1]}", "",
             "Data volumes",
             f"  stations in registry: {ing['stations']}",
             f"  input rows: {ing['parse']['total_rows']}",
             f"  valid rows: {ing['parse']['valid']} (malformed {ing['parse']['malformed']}, "
             f"unknown station {ing['parse']['unknown_station']}, "
             f"negative duration {ing['parse']['negative_duration']})",
             f"  removed by filters: {ing['filter']['n_removed']} ({ing['filter']['removed_pct']:.2f}%): "
             f"{ing['filter']['short_loops']} short round trips, {ing['filter']['overlong']} over 12 h",
             f"  trips in span: {ing['trips_in_span']}"]

    tpath = cfg.export_dir / "temporal" / "summary.json"
    if "temporal" in cfg.analyses and tpath.is_file():
        lines += ["", "Temporal model (log scale)"]
        for year, s in _read_json(tpath).items():
            decomposition = s["variance_decomposition"]
            shares = ", ".join(f"{g} {100 * decomposition[g]:.2f}%"
                               for g in temporal.GROUP_ORDER if g in decomposition)
            rain = ", ".join(f"{k} {s['rain_multipliers'][k]:.4f}" for k in ingest.RAIN_LABELS)
            lines += [f"  {year}: R^2 {s['r_squared']:.4f}, {s['n_parameters']} parameters, "
                      f"df {s['degrees_of_freedom']}",
                      f"    holiday multiplier {s['holiday_multiplier']:.4f}; rain {rain}",
                      f"    explained variance: {shares}"]

    mpath = cfg.export_dir / "efa" / "efa_meta.json"
    if "efa" in cfg.analyses and mpath.is_file():
        meta = _read_json(mpath)
        lines += ["", "Exploratory factor analysis",
                  f"  variables {meta['n_variables']}, observations {meta['n_observations']}",
                  f"  K = {meta['n_factors']} (parallel analysis retained "
                  f"{meta['parallel_analysis']['retained']})",
                  f"  total variance share: {100 * meta['total_variance_share']:.2f}%"]
        loadings = pd.read_csv(cfg.export_dir / "efa" / "loadings.csv", dtype={"station_id": str})
        for i, var in enumerate(meta["explained_variance"]):
            col = f"F{i + 1}"
            top = loadings.reindex(loadings[col].abs().sort_values(ascending=False, kind="stable").index)[:5]
            tops = ", ".join(f"{sid} {v:+.3f}" for sid, v in zip(top["station_id"], top[col]))
            lines.append(f"  {col}: explained {var:.3f}; top loadings {tops}")

    dpath = cfg.export_dir / "descriptive" / "duration_stats.csv"
    if "descriptive" in cfg.analyses and dpath.is_file():
        lines += ["", "Trip durations (minutes; p10 / Q1 / median / Q3 / p90)"]
        for r in pd.read_csv(dpath).itertuples(index=False):
            lines.append(f"  {r.period} {r.day_type} {r.year}: n={r.n} "
                         f"{r.p10:g} / {r.q1:g} / {r.q2:g} / {r.q3:g} / {r.p90:g}")
    return "\n".join(lines) + "\n"


def cmd_report(cfg: RunConfig) -> str:
    text = build_report(cfg)
    (cfg.export_dir / "report.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return text


def cmd_synth(config_path: Path, out: Path | None, seed: int | None) -> Path:
    """Generate a synthetic city and a run config pointing at it."""
    raw = load_yaml(config_path)
    scen_raw = dict(raw.get("scenario", raw))
    run_raw = dict(raw.get("run") or {})
    if seed is not None:
        scen_raw["seed"] = seed
    scen_raw["span"] = parse_span(scen_raw.get("span"))
    scenario = synthgen.CityScenario.from_dict(scen_raw)
    out = Path(out) if out is not None else config_path.parent / "synthetic"
    names = synthgen.write_city(synthgen.synthesize_city(scenario), out)
    span = scenario.span
    run = {
        "city": run_raw.get("city", "synthetic"),
        "span": {"start": str(span.start.date()), "end": str((span.end - pd.Timedelta(days=1)).date())},
        "timezone": run_raw.get("timezone", None),
        "inputs": names,
        "analyses": run_raw.get("analyses", ["temporal", "efa", "descriptive"]),
        "export_dir": run_raw.get("export_dir", "results"),
        "threshold": run_raw.get("threshold", 0.2),
        "seed": scenario.seed,
        "efa": run_raw.get("efa", {"pa_replicates": 100}),
        "temporal": run_raw.get("temporal", {"offset": 1.0}),
    }
    path = out / "run.yaml"
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(run, fh, sort_keys=True)
    print(f"synth: wrote synthetic city to {out} (config {path})")
    return path


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="YAML config file")
    common.add_argument("--seed", type=int, help="master random seed")
    common.add_argument("--out", type=Path, help="export directory (overrides the config)")
    common.add_argument("--threshold", type=float, help="|loading| threshold for loading maps")
    common.add_argument("--factors", type=int, help="force the number of factors")
    common.add_argument("--pa-replicates", type=int, help="parallel analysis replicates")
    common.add_argument("--pa-quantile", type=float, help="parallel analysis reference quantile")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="bssflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("ingest", "parse, clean and bin the trip log"),
        ("fit-temporal", "fit the calendar/weather model per year"),
        ("fit-efa", "factor analysis of per-station hourly departures"),
        ("describe", "duration statistics, ANOVA and station changes"),
        ("synth", "generate a synthetic city from a scenario config"),
        ("report", "write a consolidated text report"),
    ]:
        sub.add_parser(name, parents=[common], help=help_)
    return parser


COMMANDS = {
    "ingest": cmd_ingest,
    "fit-temporal": cmd_fit_temporal,
    "fit-efa": cmd_fit_efa,
    "describe": cmd_describe,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            cmd_synth(args.config, args.out, args.seed)
            return 0
        cfg = load_config(args.config).with_overrides(
            seed=args.seed, out=args.out, threshold=args.threshold, factors=args.factors,
            pa_replicates=args.pa_replicates, pa_quantile=args.pa_quantile,
        )
        COMMANDS[args.command](cfg)
    except (ConfigError, ingest.IngestError, panel.PanelError, temporal.TemporalModelError,
            EfaError, descriptive.DescriptiveError, synthgen.ScenarioError, CliError,
            OSError) as exc:
        message = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
