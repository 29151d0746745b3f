import calendar
import datetime as dt

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from bssflow import panel as P
from bssflow.panel import PanelError, Span

from conftest import make_trips

TEN = pd.Timedelta(minutes=10)
HOUR = pd.Timedelta(hours=1)

EMPTY = make_trips([])


@pytest.mark.parametrize("span,width,n", [
    (Span.for_years(2019), TEN, 52560),
    (Span.for_years(2020), TEN, 52704),
    (Span.for_years(2019, 2020), HOUR, 17544),
])
def test_bin_counts_cover_span(span, width, n):
    p = P.bin_trips(EMPTY, width, span)
    assert p.n_bins == n
    assert p.counts.sum() == 0 and p.counts.shape == (n, 1)


def test_span_validation():
    with pytest.raises(PanelError, match="whole days"):
        Span(pd.Timestamp("2019-01-01 06:00"), pd.Timestamp("2019-01-02"))
    with pytest.raises(PanelError, match="divide"):
        Span.for_years(2019).bins(pd.Timedelta(minutes=7))
    s = Span.from_dates(dt.date(2019, 3, 4), dt.date(2019, 3, 10))
    assert s.n_days == 7 and s.years == [2019]


def test_departures_and_arrivals_land_in_their_bins():
    trips = make_trips([("2019-01-01 08:05", 20, "A", "B"), ("2019-01-01 08:09", 1, "B", "A")])
    span = Span.from_dates(dt.date(2019, 1, 1), dt.date(2019, 1, 1))
    dep = P.bin_trips(trips, TEN, span, per_station=True, stations=["A", "B"])
    arr = P.bin_trips(trips, TEN, span, per_station=True, direction=P.ARRIVALS, stations=["A", "B"])
    assert dep.counts[48].tolist() == [1, 1]
    assert arr.counts[48].tolist() == [0, 0]
    assert arr.counts[49, 0] == 1      # 08:10 arrival at A
    assert arr.counts[50, 1] == 1      # 08:25 arrival at B


def test_trips_outside_span_are_ignored():
    trips = make_trips([("2018-12-31 23:55", 10, "A", "B"), ("2019-01-02 00:00", 10, "A", "B"),
                        ("2019-01-01 23:59", 10, "A", "B")])
    p = P.bin_trips(trips, TEN, Span.from_dates(dt.date(2019, 1, 1), dt.date(2019, 1, 1)))
    assert p.counts.sum() == 1 and p.counts[-1, 0] == 1


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3 * 1440 - 1), st.sampled_from("ABCD")), max_size=60))
def test_citywide_equals_station_sum(rows):
    trips = make_trips([(pd.Timestamp("2019-02-01") + pd.Timedelta(minutes=m), 5, o, "A") for m, o in rows])
    span = Span.from_dates(dt.date(2019, 2, 1), dt.date(2019, 2, 3))
    city = P.bin_trips(trips, TEN, span)
    station = P.bin_trips(trips, TEN, span, per_station=True, stations=list("ABCD"))
    np.testing.assert_array_equal(city.counts[:, 0], station.counts.sum(axis=1))
    np.testing.assert_array_equal(station.citywide().counts, city.counts)
    assert city.counts.sum() == len(rows)


def test_calendar_annotations():
    bins = Span.for_years(2019).bins(TEN)
    rain = pd.DataFrame({"hour_start": pd.to_datetime(["2019-03-05 08:00"]), "rain_minutes": [50]})
    ctx = P.build_calendar(bins, [dt.date(2019, 12, 25)], rain, bin_width=TEN)
    i = bins.get_loc(pd.Timestamp("2019-03-05 08:40"))       # a Tuesday
    assert ctx.row(i) == {"time_of_day": 52, "day_type": "working", "week_index": 10,
                          "holiday": False, "rain_level": "High"}
    assert ctx.holiday[bins.get_loc(pd.Timestamp("2019-12-25 12:00"))]
    assert ctx.holiday.sum() == 144
    assert ctx.row(bins.get_loc(pd.Timestamp("2019-03-09 14:00")))["day_type"] == "weekend"
    # every other hour has no record and is taken as Low
    assert ctx.missing_rain_bins == 52560 - 6
    assert (ctx.rain_level == 2).sum() == 6


def test_weekend_bin_count_matches_calendar():
    for year in (2019, 2020):
        bins = Span.for_years(year).bins(TEN)
        ctx = P.build_calendar(bins, bin_width=TEN)
        n_days = 366 if calendar.isleap(year) else 365
        weekend_days = sum((dt.date(year, 1, 1) + dt.timedelta(days=k)).weekday() >= 5
                           for k in range(n_days))
        assert (ctx.day_type == P.WEEKEND).sum() == 144 * weekend_days


def test_week_numbering_against_iso():
    days = pd.date_range("2019-01-01", "2020-12-31", freq="D")
    ours = P.week_of_year(days)
    iso = days.isocalendar().week.to_numpy()
    differ = days[ours != iso]
    assert list(differ.strftime("%Y-%m-%d")) == ["2019-12-30", "2019-12-31"]
    assert ours[days.get_loc(pd.Timestamp("2019-12-31"))] == 53
    assert ours.min() == 1 and ours.max() == 53
    # every level of 1..53 occurs in both years
    for y in (2019, 2020):
        assert set(ours[days.year == y]) == set(range(1, 54))


def test_week_54_is_folded():
    # 2012 is a leap year starting on Sunday; 31 December forms a 54th Monday week
    assert P.week_of_year(pd.DatetimeIndex(["2012-12-31"]))[0] == 53


def test_standardize_examples():
    z = P.standardize_values(np.array([[0.0, 5.0], [2.0, 5.0]]))
    np.testing.assert_allclose(z.values[:, 0], [-1.0, 1.0])
    assert z.station_ids == ("s000",)
    assert z.excluded_stations == {"s001": "zero-variance"}
    with pytest.raises(PanelError, match="zero variance"):
        P.standardize_values(np.ones((4, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(3, 60), st.integers(1, 6))
def test_standardize_moments_and_round_trip(seed, q, p):
    rng = np.random.default_rng(seed)
    x = rng.poisson(rng.uniform(0.5, 50, p), size=(q, p)).astype(float)
    x[0] += 1.0   # avoid an all-equal column
    z = P.standardize_values(x)
    keep = [int(s[1:]) for s in z.station_ids]
    np.testing.assert_allclose(z.values.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(z.values.std(axis=0), 1.0, atol=1e-10)
    np.testing.assert_allclose(z.destandardize(), x[:, keep], rtol=1e-9, atol=1e-9)


def test_panel_csv_and_cache_round_trip(tmp_path):
    trips = make_trips([("2019-01-01 08:05", 20, "A", "B"), ("2019-01-02 09:15", 3, "B", "A")])
    span = Span.from_dates(dt.date(2019, 1, 1), dt.date(2019, 1, 2))
    dep = P.bin_trips(trips, HOUR, span, per_station=True, stations=["A", "B"])
    arr = P.bin_trips(trips, HOUR, span, per_station=True, direction=P.ARRIVALS, stations=["A", "B"])
    P.write_panel_csv(dep, tmp_path / "dep.csv")
    back = P.read_panel_csv(tmp_path / "dep.csv", HOUR)
    assert back.bin_start.equals(dep.bin_start) and back.station_ids == dep.station_ids
    np.testing.assert_array_equal(back.counts, dep.counts)

    P.save_panels(tmp_path / "c.npz", dep=dep, arr=arr)
    first = (tmp_path / "c.npz").read_bytes()
    P.save_panels(tmp_path / "c.npz", dep=dep, arr=arr)
    assert (tmp_path / "c.npz").read_bytes() == first
    loaded = P.load_panels(tmp_path / "c.npz")
    assert loaded["arr"].direction == P.ARRIVALS
    for name, orig in (("dep", dep), ("arr", arr)):
        assert loaded[name].bin_start.equals(orig.bin_start)
        np.testing.assert_array_equal(loaded[name].counts, orig.counts)


def test_cache_rejects_foreign_file(tmp_path):
    np.savez(tmp_path / "x.npz", header=np.frombuffer(b'{"magic": "other"}', dtype=np.uint8))
    with pytest.raises(PanelError, match="not a panel cache"):
        P.load_panels(tmp_path / "x.npz")


def test_panel_shape_validation():
    with pytest.raises(PanelError, match="shape"):
        P.UsagePanel(pd.date_range("2019-01-01", periods=3, freq="h"), HOUR, ("a",), np.zeros((2, 1)))
