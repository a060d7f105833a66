from __future__ import annotations

from datetime import datetime, timedelta, timezone

import pytest

from speedgov.telemetry_io import RawTripRecord
from speedgov.synth_dgp import TripDgpConfig, generate_trip_records
from speedgov.telemetry_io import write_trips

KST = timezone(timedelta(hours=9))


def make_trip(
    trip_id="t1",
    user_id="u1",
    city_id="c1",
    mode="STD",
    start=datetime(2023, 2, 1, 8, 0, tzinfo=KST),
    lat=37.5,
    lon=127.0,
    distance=1200.0,
    duration=300.0,
    speeds=(10.0, 12.0, 14.0),
) -> RawTripRecord:
    return RawTripRecord(trip_id, user_id, city_id, mode, start, lat, lon, distance, duration, tuple(speeds))


@pytest.fixture(scope="session")
def small_trips_csv(tmp_path_factory):
    """A few hundred riders of synthetic trips written to CSV."""
    records, truth = generate_trip_records(TripDgpConfig(n_users=300, seed=11))
    path = tmp_path_factory.mktemp("trips") / "trips.csv"
    write_trips(records, path)
    return path, records, truth


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
