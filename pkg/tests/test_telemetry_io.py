import math
from datetime import datetime, timedelta, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speedgov.telemetry_io import (
    COLUMNS,
    SchemaError,
    filter_valid,
    format_timestamp,
    load_trips,
    mode_counts,
    parse_speeds,
    parse_timestamp,
    write_trips,
)

from conftest import make_trip

HEADER = ",".join(COLUMNS)


def write(tmp_path, *rows, header=HEADER):
    p = tmp_path / "trips.csv"
    p.write_text("\n".join([header, *rows]) + "\n", encoding="utf-8")
    return p


def test_single_row_maps_fields(tmp_path):
    p = write(tmp_path, "t1,u1,c1,TUB,2023-02-01T08:00:00Z,37.50,127.00,1200,300,10;12;14")
    recs, errs = load_trips(p)
    assert errs == []
    (r,) = recs
    assert r.mode == "TUB"
    assert r.speeds_kmh == (10.0, 12.0, 14.0)
    assert r.start_time == datetime(2023, 2, 1, 8, tzinfo=timezone.utc)
    assert (r.distance_m, r.duration_s) == (1200.0, 300.0)


def test_empty_speed_token_is_row_error(tmp_path):
    p = write(
        tmp_path,
        "t1,u1,c1,TUB,2023-02-01T08:00:00Z,37.5,127,1200,300,10;;12",
        "t2,u1,c1,STD,2023-02-01T09:00:00Z,37.5,127,1200,300,10;11;12",
    )
    recs, errs = load_trips(p)
    assert [r.trip_id for r in recs] == ["t2"]
    assert errs[0].row == 1 and "empty" in errs[0].message


def test_non_numeric_token_reports_row(tmp_path):
    p = write(
        tmp_path,
        "t1,u1,c1,STD,2023-02-01T08:00:00Z,37.5,127,1200,300,10;11;12",
        "t2,u1,c1,STD,2023-02-01T08:00:00Z,37.5,127,1200,300,10;abc;12",
    )
    _, errs = load_trips(p)
    assert errs[0].row == 2 and "abc" in errs[0].message


def test_header_only_file(tmp_path):
    recs, errs = load_trips(write(tmp_path))
    assert recs == [] and errs == []


def test_missing_column_names_it(tmp_path):
    header = HEADER.replace(",speeds_kmh", "")
    with pytest.raises(SchemaError, match="speeds_kmh"):
        load_trips(write(tmp_path, header=header))


def test_schema_map_renames_columns(tmp_path):
    header = HEADER.replace("user_id", "rider")
    p = write(tmp_path, "t1,u9,c1,ECO,2023-02-01T08:00:00+09:00,37.5,127,1,40,1;2;3", header=header)
    recs, _ = load_trips(p, schema={"user_id": "rider"})
    assert recs[0].user_id == "u9"


def test_unknown_mode_and_naive_timestamp_are_row_errors(tmp_path):
    p = write(
        tmp_path,
        "t1,u1,c1,FAST,2023-02-01T08:00:00Z,37.5,127,1200,300,10;11;12",
        "t2,u1,c1,STD,2023-02-01T08:00:00,37.5,127,1200,300,10;11;12",
    )
    recs, errs = load_trips(p)
    assert recs == [] and [e.row for e in errs] == [1, 2]


def test_timestamp_round_trip_keeps_offset():
    ts = parse_timestamp("2023-11-30T23:30:00+09:00")
    assert ts.utcoffset() == timedelta(hours=9)
    assert format_timestamp(ts) == "2023-11-30T23:30:00+09:00"
    assert format_timestamp(parse_timestamp("2023-02-01T08:00:00Z")) == "2023-02-01T08:00:00Z"


def test_nan_token_parses_but_invalidates_waypoint():
    speeds = parse_speeds("10;nan;12;inf;-1;14")
    trip = make_trip(speeds=speeds)
    assert trip.trace().speeds_kmh == (10.0, 12.0, 14.0)


@pytest.mark.parametrize(
    "duration, speeds, kept, reason",
    [
        (29.0, (1, 2, 3, 4, 5), False, "too_short"),
        (30.0, (1, 2, 3), True, None),
        (60.0, (1, 2), False, "too_few_points"),
        (60.0, (1, math.nan, 2, 3), True, None),
        (60.0, (1, math.nan, 2), False, "too_few_points"),
    ],
)
def test_filter_rules(duration, speeds, kept, reason):
    out, rep = filter_valid([make_trip(duration=duration, speeds=speeds)])
    assert (len(out) == 1) == kept
    if reason:
        assert getattr(rep, reason) == 1 and rep.dropped_ids == ["t1"]


durations = st.floats(0, 120, allow_nan=False)
speed_lists = st.lists(st.one_of(st.floats(0, 60), st.just(math.nan), st.just(-1.0)), min_size=0, max_size=8)


@given(st.lists(st.tuples(durations, speed_lists), max_size=30))
def test_filter_partition_and_idempotence(specs):
    trips = [make_trip(trip_id=f"t{i}", duration=d, speeds=s) for i, (d, s) in enumerate(specs)]
    kept, rep = filter_valid(trips)
    assert len(kept) + rep.total == len(trips)
    again, rep2 = filter_valid(kept)
    assert again == kept and rep2.total == 0


finite_speeds = st.lists(st.floats(0, 200, allow_nan=False, allow_infinity=False), min_size=1, max_size=10)


@settings(max_examples=50)
@given(st.lists(st.tuples(finite_speeds, st.floats(-90, 90), st.floats(0, 1e5), st.sampled_from(["TUB", "STD", "ECO"])),
                min_size=1, max_size=10))
def test_write_load_round_trip_is_exact(tmp_path_factory, rows):
    trips = [
        make_trip(trip_id=f"t{i}", mode=m, lat=lat, distance=dist, speeds=s,
                  start=datetime(2023, 5, 1, 12, tzinfo=timezone(timedelta(hours=9))) + timedelta(minutes=i))
        for i, (s, lat, dist, m) in enumerate(rows)
    ]
    p = tmp_path_factory.mktemp("rt") / "t.csv"
    write_trips(trips, p)
    back, errs = load_trips(p)
    assert errs == [] and back == trips


def test_mode_counts():
    trips = [make_trip(mode=m) for m in ("TUB", "TUB", "ECO")]
    assert mode_counts(trips) == {"TUB": 2, "STD": 0, "ECO": 1}
