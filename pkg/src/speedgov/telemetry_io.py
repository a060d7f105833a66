"""Reading, validating and filtering raw trip records."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Mapping, Sequence

MODES = ("TUB", "STD", "ECO")

COLUMNS = (
    "trip_id",
    "user_id",
    "city_id",
    "mode",
    "start_time",
    "origin_lat",
    "origin_lon",
    "distance_m",
    "duration_s",
    "speeds_kmh",
)

MIN_DURATION_S = 30.0
MIN_WAYPOINTS = 3


class SchemaError(ValueError):
    """Required column missing from the input header."""


@dataclass(frozen=True)
class RowError:
    row: int  # 1-based data row index (header excluded)
    message: str


@dataclass(frozen=True)
class RawTripRecord:
    trip_id: str
    user_id: str
    city_id: str
    mode: str
    start_time: datetime
    origin_lat: float
    origin_lon: float
    distance_m: float
    duration_s: float
    speeds_kmh: tuple[float, ...]

    def trace(self, dt_s: float = 10.0) -> "SpeedTrace":
        """Speed trace over the valid (finite, non-negative) waypoints."""
        return SpeedTrace(tuple(v for v in self.speeds_kmh if _valid_speed(v)), dt_s)


@dataclass(frozen=True)
class SpeedTrace:
    speeds_kmh: tuple[float, ...]
    dt_s: float = 10.0

    def __post_init__(self):
        if self.dt_s <= 0:
            raise ValueError(f"dt_s must be positive, got {self.dt_s}")

    def __len__(self) -> int:
        return len(self.speeds_kmh)

    def reversed(self) -> "SpeedTrace":
        return SpeedTrace(self.speeds_kmh[::-1], self.dt_s)


@dataclass
class DropReport:
    too_short: int = 0
    too_few_points: int = 0
    dropped_ids: list[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.too_short + self.too_few_points

    def as_dict(self) -> dict:
        return {"too_short": self.too_short, "too_few_points": self.too_few_points}


def _valid_speed(v: float) -> bool:
    return math.isfinite(v) and v >= 0.0


def parse_timestamp(text: str) -> datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        raise ValueError(f"timestamp without UTC offset: {text!r}")
    return ts


def format_timestamp(ts: datetime) -> str:
    out = ts.isoformat()
    return out[:-6] + "Z" if out.endswith("+00:00") else out


def parse_speeds(text: str) -> tuple[float, ...]:
    tokens = text.split(";")
    speeds = []
    for i, tok in enumerate(tokens):
        tok = tok.strip()
        if not tok:
            raise ValueError(f"empty speed token at position {i}")
        try:
            speeds.append(float(tok))
        except ValueError:
            raise ValueError(f"non-numeric speed token {tok!r} at position {i}") from None
    return tuple(speeds)


def _fmt_float(x: float) -> str:
    s = repr(float(x))
    return s[:-2] if s.endswith(".0") else s


def load_trips(
    path: str | Path, schema: Mapping[str, str] | None = None
) -> tuple[list[RawTripRecord], list[RowError]]:
    """Read a trip CSV into records.

    ``schema`` maps canonical column names to the names used in the file.
    Malformed rows are returned in the error list with their 1-based row
    index rather than being silently skipped.
    """
    names = {c: (schema or {}).get(c, c) for c in COLUMNS}
    records: list[RawTripRecord] = []
    errors: list[RowError] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for canonical, actual in names.items():
            if actual not in header:
                raise SchemaError(f"missing required column {actual!r}")
        for i, row in enumerate(reader, start=1):
            try:
                records.append(_parse_row(row, names))
            except (ValueError, TypeError) as exc:
                errors.append(RowError(i, str(exc)))
    return records, errors


def _parse_row(row: Mapping[str, str], names: Mapping[str, str]) -> RawTripRecord:
    get = lambda key: row[names[key]]  # noqa: E731
    mode = get("mode").strip().upper()
    if mode not in MODES:
        raise ValueError(f"unknown mode {get('mode')!r}")
    speeds = parse_speeds(get("speeds_kmh"))
    distance = float(get("distance_m"))
    duration = float(get("duration_s"))
    if distance < 0 or duration < 0:
        raise ValueError("negative distance or duration")
    return RawTripRecord(
        trip_id=get("trip_id"),
        user_id=get("user_id"),
        city_id=get("city_id"),
        mode=mode,
        start_time=parse_timestamp(get("start_time")),
        origin_lat=float(get("origin_lat")),
        origin_lon=float(get("origin_lon")),
        distance_m=distance,
        duration_s=duration,
        speeds_kmh=speeds,
    )


def write_trips(records: Iterable[RawTripRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.trip_id,
                    r.user_id,
                    r.city_id,
                    r.mode,
                    format_timestamp(r.start_time),
                    _fmt_float(r.origin_lat),
                    _fmt_float(r.origin_lon),
                    _fmt_float(r.distance_m),
                    _fmt_float(r.duration_s),
                    ";".join(_fmt_float(v) for v in r.speeds_kmh),
                ]
            )


def filter_valid(
    trips: Sequence[RawTripRecord],
    min_duration_s: float = MIN_DURATION_S,
    min_waypoints: int = MIN_WAYPOINTS,
) -> tuple[list[RawTripRecord], DropReport]:
    """Keep trips lasting at least 30 s with at least three valid waypoints.

    Both bounds are inclusive. A waypoint is valid when finite and
    non-negative; invalid waypoints do not by themselves drop the trip.
    """
    kept = []
    report = DropReport()
    for t in trips:
        if t.duration_s < min_duration_s:
            report.too_short += 1
            report.dropped_ids.append(t.trip_id)
        elif sum(_valid_speed(v) for v in t.speeds_kmh) < min_waypoints:
            report.too_few_points += 1
            report.dropped_ids.append(t.trip_id)
        else:
            kept.append(t)
    return kept, report


def mode_counts(trips: Iterable[RawTripRecord]) -> dict[str, int]:
    c = Counter(t.mode for t in trips)
    return {m: c.get(m, 0) for m in MODES}
