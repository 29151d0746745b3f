import io
import textwrap

import numpy as np
import pandas as pd
import pytest

from bssflow import ingest
from bssflow.panel import Span


def csv_source(text: str) -> io.StringIO:
    return io.StringIO(textwrap.dedent(text).lstrip())


@pytest.fixture
def registry():
    return ingest.StationRegistry([
        ingest.Station("A", 45.76, 4.83, "Alpha"),
        ingest.Station("B", 45.75, 4.85, "Bravo"),
        ingest.Station("C", 45.77, 4.86, "Charlie"),
    ])


@pytest.fixture
def span_2019():
    return Span.for_years(2019)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_trips(rows) -> pd.DataFrame:
    """Trip frame from (departure, duration_min, origin, destination) tuples."""
    records = []
    for dep, minutes, o, d in rows:
        dep = pd.Timestamp(dep)
        records.append(ingest.TripRecord(dep.to_pydatetime(),
                                         (dep + pd.Timedelta(minutes=minutes)).to_pydatetime(), o, d))
    return ingest.trips_from_records(records)


ACCEPTANCE_RESULTS: list[str] = []


@pytest.fixture
def record_criterion():
    """Record one acceptance line; the summary hook prints them all."""

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title}: {detail}"
        ACCEPTANCE_RESULTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
