import datetime as dt
import io

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from bssflow import ingest
from bssflow.ingest import IngestError, RainLevel, classify_rain, filter_trips, parse_trips

from conftest import csv_source, make_trips

HEADER = "departure_time,arrival_time,origin_station,destination_station\n"


def test_parse_well_formed_row(registry):
    trips, report = parse_trips(csv_source(HEADER + "2019-03-04T08:00,2019-03-04T08:20,A,B\n"), registry)
    assert report.valid == 1 and report.skipped == 0
    assert trips.loc[0, "duration_min"] == 20.0
    assert trips.loc[0, "departure_time"] == pd.Timestamp("2019-03-04 08:00")


def test_negative_duration_is_counted(registry):
    trips, report = parse_trips(csv_source(HEADER + "2019-03-04T08:20,2019-03-04T08:00,A,B\n"), registry)
    assert len(trips) == 0
    assert report.negative_duration == 1


def test_unknown_station_is_counted(registry):
    _, report = parse_trips(csv_source(HEADER + "2019-03-04T08:00,2019-03-04T08:20,A,Z\n"), registry)
    assert report.unknown_station == 1 and report.valid == 0


def test_malformed_rows_are_counted_once(registry):
    text = HEADER + (
        "not-a-date,2019-03-04T08:20,A,B\n"
        "2019-03-04T08:00,2019-03-04T08:20,,B\n"
        "2019-03-04T08:00,garbage,Z,B\n"          # malformed and unknown: counted as malformed
        "2019-03-04T09:00,2019-03-04T09:05,C,A\n"
    )
    _, report = parse_trips(csv_source(text), registry)
    assert (report.malformed, report.unknown_station, report.valid) == (3, 0, 1)
    assert report.valid + report.skipped == report.total_rows == 4


def test_missing_column_is_fatal(registry):
    with pytest.raises(IngestError, match="lacks column"):
        parse_trips(csv_source("departure_time,arrival_time,origin_station\nx,y,z\n"), registry)


def test_unreadable_path_is_fatal(registry, tmp_path):
    with pytest.raises(IngestError, match="cannot read"):
        parse_trips(tmp_path / "nope.csv", registry)


def test_dst_durations_use_elapsed_time(registry):
    text = HEADER + (
        "2019-03-31T01:50,2019-03-31T03:10,A,B\n"   # 02:00-03:00 does not exist
        "2019-10-27T01:50,2019-10-27T02:10,A,B\n"   # ordinary 20 minutes before the fold
    )
    trips, report = parse_trips(csv_source(text), registry, timezone="Europe/Paris")
    assert report.valid == 2
    np.testing.assert_array_equal(trips["duration_min"].to_numpy(), [20.0, 20.0])
    naive, _ = parse_trips(csv_source(text), registry, timezone=None)
    assert naive.loc[0, "duration_min"] == 80.0


def test_offset_timestamps_become_local_wall_clock(registry):
    text = HEADER + "2019-07-01T06:00+00:00,2019-07-01T06:15+00:00,A,B\n"
    trips, _ = parse_trips(csv_source(text), registry, timezone="Europe/Paris")
    assert trips.loc[0, "departure_time"] == pd.Timestamp("2019-07-01 08:00")
    assert trips.loc[0, "duration_min"] == 15.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(["ok", "neg", "unknown", "badtime", "empty"]), max_size=40))
def test_valid_plus_skipped_equals_total(kinds):
    registry = ingest.StationRegistry([ingest.Station("A", 0.0, 0.0), ingest.Station("B", 0.0, 0.0)])
    row = {
        "ok": "2019-05-02T10:00,2019-05-02T10:12,A,B",
        "neg": "2019-05-02T10:12,2019-05-02T10:00,A,B",
        "unknown": "2019-05-02T10:00,2019-05-02T10:12,A,Q",
        "badtime": "2019-13-02T10:00,2019-05-02T10:12,A,B",
        "empty": "2019-05-02T10:00,2019-05-02T10:12,A,",
    }
    text = HEADER + "".join(row[k] + "\n" for k in kinds)
    _, report = parse_trips(io.StringIO(text), registry)
    assert report.valid + report.skipped == report.total_rows == len(kinds)
    assert report.valid == kinds.count("ok")
    assert report.negative_duration == kinds.count("neg")
    assert report.unknown_station == kinds.count("unknown")


def test_filter_boundary_cases():
    trips = make_trips([
        ("2019-03-04 08:00", 2, "A", "A"),     # short round trip: removed
        ("2019-03-04 08:00", 3, "A", "A"),     # 3 min round trip: kept
        ("2019-03-04 08:00", 721, "A", "B"),   # over 12 h: removed
        ("2019-03-04 08:00", 720, "A", "B"),   # exactly 12 h: kept
        ("2019-03-04 08:00", 1, "A", "B"),     # 1 min between distinct stations: kept
    ])
    kept, report = filter_trips(trips)
    assert (report.short_loops, report.overlong, report.n_kept) == (1, 1, 3)
    assert kept["duration_min"].tolist() == [3.0, 720.0, 1.0]
    again, report2 = filter_trips(kept)
    assert report2.n_removed == 0
    pd.testing.assert_frame_equal(again, kept)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1500), st.sampled_from("ABC"), st.sampled_from("ABC")), max_size=30))
def test_filter_is_idempotent_and_keeps_only_valid(rows):
    trips = make_trips([("2019-06-01 12:00", m, o, d) for m, o, d in rows])
    kept, report = filter_trips(trips)
    again, _ = filter_trips(kept)
    pd.testing.assert_frame_equal(again, kept)
    assert report.n_kept == len(kept)
    loops = (kept["duration_min"] <= 2) & (kept["origin_station"] == kept["destination_station"])
    assert not loops.any()
    assert (kept["duration_min"] <= 720).all()


@pytest.mark.parametrize("minutes,level", [
    (0, RainLevel.LOW), (15, RainLevel.LOW), (20, RainLevel.LOW), (21, RainLevel.MEDIUM),
    (25, RainLevel.MEDIUM), (40, RainLevel.MEDIUM), (41, RainLevel.HIGH), (50, RainLevel.HIGH),
    (60, RainLevel.HIGH),
])
def test_classify_rain(minutes, level):
    assert classify_rain(minutes) is level
    assert ingest.classify_rain_array([minutes])[0] == int(level)


@pytest.mark.parametrize("bad", [-1, 61, 2.5])
def test_classify_rain_rejects_bad_input(bad):
    with pytest.raises(ValueError):
        classify_rain(bad)


def test_classify_rain_is_monotone():
    levels = [int(classify_rain(m)) for m in range(61)]
    assert levels == sorted(levels)
    assert ingest.RAIN_LABELS == ("Low", "Medium", "High")


def test_read_weather_validates():
    frame = ingest.read_weather(csv_source("hour_start,rain_minutes\n2019-01-01T00:00,5\n2019-01-01T01:00,45\n"))
    assert frame["rain_minutes"].tolist() == [5, 45]
    with pytest.raises(IngestError, match="on the hour"):
        ingest.read_weather(csv_source("hour_start,rain_minutes\n2019-01-01T00:30,5\n"))
    with pytest.raises(IngestError, match=r"\[0, 60\]"):
        ingest.read_weather(csv_source("hour_start,rain_minutes\n2019-01-01T00:00,75\n"))
    with pytest.raises(IngestError, match="duplicate"):
        ingest.read_weather(csv_source("hour_start,rain_minutes\n2019-01-01T00:00,5\n2019-01-01T00:00,6\n"))


def test_read_stations_and_registry():
    reg = ingest.read_stations(csv_source("station_id,latitude,longitude,name\nX,45.7,4.8,x\nY,45.8,4.9,y\n"))
    assert reg.ids == ("X", "Y") and reg["Y"].longitude == 4.9
    with pytest.raises(IngestError, match="duplicate"):
        ingest.read_stations(csv_source("station_id,latitude,longitude,name\nX,45.7,4.8,x\nX,45.8,4.9,y\n"))
    with pytest.raises(IngestError, match="latitude"):
        ingest.read_stations(csv_source("station_id,latitude,longitude,name\nX,95,4.8,x\n"))
    other = ingest.StationRegistry([ingest.Station("Y", 0, 0), ingest.Station("Z", 1, 1)])
    merged = reg.union(other)
    assert merged.ids == ("X", "Y", "Z") and merged["Y"].latitude == 45.8


def test_read_holidays():
    dates = ingest.read_holidays(io.StringIO("# French holidays\n2019-12-25\n\n2019-01-01  # new year\n"),
                                 years=[2019])
    assert dates == {dt.date(2019, 12, 25), dt.date(2019, 1, 1)}
    with pytest.raises(IngestError, match="duplicate"):
        ingest.read_holidays(io.StringIO("2019-12-25\n2019-12-25\n"))
    with pytest.raises(IngestError, match="outside"):
        ingest.read_holidays(io.StringIO("2021-12-25\n"), years=[2019, 2020])
    with pytest.raises(IngestError, match="line 1"):
        ingest.read_holidays(io.StringIO("25/12/2019\n"))


def test_french_public_holidays():
    days = ingest.french_public_holidays(2019)
    assert len(days) == 11
    for d in [dt.date(2019, 4, 22), dt.date(2019, 5, 30), dt.date(2019, 6, 10), dt.date(2019, 7, 14)]:
        assert d in days
    assert dt.date(2020, 4, 13) in ingest.french_public_holidays(2020)


def test_trip_records_round_trip():
    trips = make_trips([("2019-03-04 08:00", 7, "A", "B")])
    records = ingest.trip_records(trips)
    assert records[0].duration_min == 7.0
    pd.testing.assert_frame_equal(ingest.trips_from_records(records), trips)
