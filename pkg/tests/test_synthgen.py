import datetime as dt

import numpy as np
import pandas as pd
import pytest

from bssflow import efa as E
from bssflow import ingest, panel as P
from bssflow import synthgen as S
from bssflow.panel import Span
from bssflow.synthgen import ScenarioError


def flat_scenario(span, baseline, **kw):
    return S.TemporalScenario(span, np.ones((2, 144)), np.ones(53), 1.0, np.ones(3), baseline, **kw)


def test_unit_multipliers_give_constant_counts():
    span = Span.from_dates(dt.date(2019, 3, 4), dt.date(2019, 3, 5))
    panel, _ = S.generate_temporal(flat_scenario(span, 12.5))
    assert np.all(panel.counts == 12)        # half-to-even
    panel, _ = S.generate_temporal(flat_scenario(span, 13.5))
    assert np.all(panel.counts == 14)


def test_full_year_shape_and_determinism():
    scen = S.default_temporal_scenario(Span.for_years(2019), baseline=10, noise_sigma=0.1, seed=4)
    a, ctx = S.generate_temporal(scen)
    b, _ = S.generate_temporal(scen)
    assert a.n_bins == 52560
    np.testing.assert_array_equal(a.counts, b.counts)
    c, _ = S.generate_temporal(S.default_temporal_scenario(Span.for_years(2019), 10, 0.1, seed=5))
    assert not np.array_equal(a.counts, c.counts)
    assert ctx.holiday.sum() == 11 * 144


def test_holiday_ratio_on_matched_bins():
    span = Span.from_dates(dt.date(2019, 4, 29), dt.date(2019, 5, 12))
    no_rain = pd.DataFrame({"hour_start": span.bins(pd.Timedelta(hours=1)), "rain_minutes": 0})
    scen = S.TemporalScenario(span, np.ones((2, 144)), np.ones(53), 0.7435, np.array([1, 0.769, 0.738]),
                              baseline=1e6, holidays=(dt.date(2019, 5, 1),), rain_records=no_rain)
    panel, ctx = S.generate_temporal(scen)
    day = panel.bin_start.normalize()
    hol = panel.counts[day == pd.Timestamp("2019-05-01"), 0]
    ref = panel.counts[day == pd.Timestamp("2019-04-30"), 0]
    np.testing.assert_allclose(hol / ref, 0.7435, rtol=1e-6)


def test_temporal_scenario_validation():
    span = Span.from_dates(dt.date(2019, 3, 4), dt.date(2019, 3, 5))
    f = np.ones((2, 144))
    f[0, 0] = 2.0
    with pytest.raises(ScenarioError, match="reference"):
        S.TemporalScenario(span, f, np.ones(53), 1.0, np.ones(3), 5.0)
    with pytest.raises(ScenarioError, match="shape"):
        S.TemporalScenario(span, np.ones((2, 24)), np.ones(53), 1.0, np.ones(3), 5.0)
    with pytest.raises(ScenarioError, match="positive"):
        S.TemporalScenario(span, np.ones((2, 144)), np.ones(53), -1.0, np.ones(3), 5.0)


def test_null_factor_panel_retains_nothing():
    panel, _ = S.generate_panel(S.FactorScenario(np.zeros((10, 1)), 1000, seed=3))
    assert E.parallel_analysis(panel, 50, seed=3).retained == 0


def test_single_factor_moments():
    panel, _ = S.generate_panel(S.FactorScenario(np.full((10, 1), 0.9), 5000, seed=8))
    r = E.correlation(panel).values
    off = r[~np.eye(10, dtype=bool)]
    assert np.all(np.abs(off - 0.81) < 0.03)


def test_exact_scenario_reproduces_population_correlation():
    lam = S.planted_loadings(9, 3, 0.6)
    panel, truth = S.generate_panel(S.FactorScenario(lam, 300, seed=1, exact=True))
    implied = lam @ lam.T + np.diag(truth.uniqueness)
    np.testing.assert_allclose(E.correlation(panel).values, implied, atol=1e-12)
    np.testing.assert_allclose(truth.factors.T @ truth.factors / 300, np.eye(3), atol=1e-12)


def test_ar1_factors_are_autocorrelated():
    _, truth = S.generate_panel(S.FactorScenario(np.full((4, 1), 0.5), 20000, seed=2, ar1=0.6))
    f = truth.factors[:, 0]
    assert np.corrcoef(f[1:], f[:-1])[0, 1] == pytest.approx(0.6, abs=0.03)
    assert f.std() == pytest.approx(1.0, abs=0.05)


def test_factor_scenario_validation():
    with pytest.raises(ScenarioError, match="infeasible communality"):
        S.FactorScenario(np.array([[0.8, 0.8]]), 100)
    with pytest.raises(ScenarioError, match="ar1"):
        S.FactorScenario(np.full((3, 1), 0.5), 100, ar1=1.0)


def test_generate_panel_is_deterministic():
    scen = S.FactorScenario(S.planted_loadings(6, 2), 200, seed=7)
    a, _ = S.generate_panel(scen)
    b, _ = S.generate_panel(scen)
    np.testing.assert_array_equal(a.values, b.values)


def test_congruence_examples():
    lam = S.planted_loadings(9, 3, 0.7)
    c = S.congruence(lam, lam)
    np.testing.assert_allclose(c.phi, 1.0)
    shuffled = -lam[:, [2, 0, 1]]
    c = S.congruence(shuffled, lam)
    np.testing.assert_allclose(c.phi, 1.0)
    assert c.match.tolist() == [1, 2, 0] and np.all(c.signs == -1)
    a = np.array([[1.0], [0.0]])
    b = np.array([[0.0], [1.0]])
    assert S.congruence(a, b).phi[0] == 0.0
    with pytest.raises(ScenarioError, match="all-zero"):
        S.tucker_congruence_matrix(np.zeros((3, 1)), lam[:3, :1])


def test_procrustes_error_ignores_rotation(rng):
    lam = rng.standard_normal((8, 2))
    q, _ = np.linalg.qr(rng.standard_normal((2, 2)))
    assert S.procrustes_error(lam @ q, lam) < 1e-12
    assert S.procrustes_error(lam + 0.1, lam) > 0.01


def test_synthetic_city_round_trip(tmp_path):
    span = Span.from_dates(dt.date(2019, 3, 4), dt.date(2019, 3, 10))
    sc = S.CityScenario(span, n_stations=8, n_factors=2, baseline=2.0, seed=1)
    city = S.synthesize_city(sc)
    names = S.write_city(city, tmp_path)
    registry = ingest.read_stations(tmp_path / names["stations"])
    trips, report = ingest.parse_trips(tmp_path / names["trips"], registry, timezone=None)
    assert report.skipped == 0
    kept, freport = ingest.filter_trips(trips)
    assert freport.short_loops == city.truth["n_short_loops"]
    assert freport.overlong == city.truth["n_overlong"]
    assert len(kept) == city.truth["n_valid_trips"]
    tscen = S.default_temporal_scenario(span, 2.0, sc.noise_sigma)
    assert P.bin_trips(kept, S.TEN_MINUTES, span).counts.sum() == city.truth["n_valid_trips"]
    assert len(ingest.read_weather(tmp_path / names["weather"])) == 7 * 24
    assert tscen.holidays == ()


def test_city_scenario_from_dict():
    sc = S.CityScenario.from_dict({"span": {"start": "2019-03-04", "end": "2019-03-10"}, "n_stations": 5})
    assert sc.n_stations == 5 and sc.span.n_days == 7
    with pytest.raises(ScenarioError, match="unknown"):
        S.CityScenario.from_dict({"span": {"start": "2019-03-04", "end": "2019-03-10"}, "bogus": 1})
