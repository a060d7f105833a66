"""Point-to-point accelerations and trip-level kinematic outcomes."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .telemetry_io import RawTripRecord, SpeedTrace

KMH_PER_MS = 3.6

HARSH_THRESHOLD_MS2 = 0.5
SPEED_CAP_KMH = 25.0
CRUISE_BAND_KMH = 3.0
ZERO_SPEED_MAX_KMH = 0.5

FEATURE_COLUMNS = (
    "trip_id",
    "harsh_accel",
    "harsh_decel",
    "speeding",
    "harsh_accel_count",
    "harsh_decel_count",
    "mean_speed_kmh",
    "max_speed_kmh",
    "speed_cv",
    "cruise_frac",
    "zero_frac",
)


@dataclass(frozen=True)
class TripFeatures:
    trip_id: str
    harsh_accel: int
    harsh_decel: int
    speeding: int
    harsh_accel_count: int
    harsh_decel_count: int
    mean_speed_kmh: float
    max_speed_kmh: float
    speed_cv: float
    cruise_frac: float
    zero_frac: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ThresholdCalibration:
    percentile: float
    threshold_ms2: float
    n_pairs: int


def accelerations(trace: SpeedTrace) -> np.ndarray:
    """Accelerations in m/s^2 between consecutive waypoints (km/h input)."""
    v = np.asarray(trace.speeds_kmh, dtype=float)
    if v.size < 2:
        return np.empty(0)
    return np.diff(v) / (trace.dt_s * KMH_PER_MS)


def compute_features(
    trace: SpeedTrace,
    threshold_ms2: float = HARSH_THRESHOLD_MS2,
    speed_cap_kmh: float = SPEED_CAP_KMH,
    cruise_band_kmh: float = CRUISE_BAND_KMH,
    zero_speed_max_kmh: float | None = ZERO_SPEED_MAX_KMH,
    trip_id: str = "",
) -> TripFeatures:
    """Trip-level outcomes from one speed trace.

    Harsh events and speeding use strict inequalities. ``zero_speed_max_kmh``
    of ``None`` disables the zero-speed share (reported as 0).
    """
    v = np.asarray(trace.speeds_kmh, dtype=float)
    a = accelerations(trace)
    n_acc = int(np.count_nonzero(a > threshold_ms2))
    n_dec = int(np.count_nonzero(a < -threshold_ms2))
    if v.size == 0:
        return TripFeatures(trip_id, 0, 0, 0, 0, 0, 0.0, 0.0, 0.0, 0.0, 0.0)
    # correctly rounded mean keeps the cruise-band comparison independent of summation order
    mean = math.fsum(v) / v.size
    sd = float(np.sqrt(np.mean((v - mean) ** 2)))
    cv = sd / mean if mean > 0 and v.size > 1 else 0.0
    cruise = float(np.mean(np.abs(v - mean) <= cruise_band_kmh))
    zero = 0.0 if zero_speed_max_kmh is None else float(np.mean(v <= zero_speed_max_kmh))
    vmax = float(v.max())
    return TripFeatures(
        trip_id=trip_id,
        harsh_accel=int(n_acc > 0),
        harsh_decel=int(n_dec > 0),
        speeding=int(vmax > speed_cap_kmh),
        harsh_accel_count=n_acc,
        harsh_decel_count=n_dec,
        mean_speed_kmh=mean,
        max_speed_kmh=vmax,
        speed_cv=cv,
        cruise_frac=cruise,
        zero_frac=zero,
    )


def features_frame(
    trips: Sequence[RawTripRecord],
    threshold_ms2: float = HARSH_THRESHOLD_MS2,
    speed_cap_kmh: float = SPEED_CAP_KMH,
    cruise_band_kmh: float = CRUISE_BAND_KMH,
    zero_speed_max_kmh: float = ZERO_SPEED_MAX_KMH,
    dt_s: float = 10.0,
) -> pd.DataFrame:
    """Vectorised :func:`compute_features` over many trips, one row per trip."""
    traces = [np.asarray(t.trace(dt_s).speeds_kmh, dtype=float) for t in trips]
    lengths = np.array([len(v) for v in traces], dtype=np.int64)
    if (lengths == 0).any():
        raise ValueError("every trip needs at least one valid waypoint; run filter_valid first")
    v = np.concatenate(traces) if traces else np.empty(0)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)
    trip_of = np.repeat(np.arange(len(traces)), lengths)

    a = np.diff(v) / (dt_s * KMH_PER_MS)
    same_trip = trip_of[1:] == trip_of[:-1]
    acc_trip = trip_of[1:][same_trip]
    a = a[same_trip]
    n = len(traces)
    n_acc = np.bincount(acc_trip, weights=a > threshold_ms2, minlength=n).astype(np.int64)
    n_dec = np.bincount(acc_trip, weights=a < -threshold_ms2, minlength=n).astype(np.int64)

    if n:
        mean = np.array([math.fsum(t) for t in traces]) / lengths
        dev = v - mean[trip_of]
        sd = np.sqrt(np.add.reduceat(dev * dev, starts) / lengths)
        vmax = np.maximum.reduceat(v, starts)
        cruise = np.add.reduceat((np.abs(dev) <= cruise_band_kmh).astype(float), starts) / lengths
        zero = np.add.reduceat((v <= zero_speed_max_kmh).astype(float), starts) / lengths
    else:
        mean = sd = vmax = cruise = zero = np.empty(0)
    with np.errstate(divide="ignore", invalid="ignore"):
        cv = np.where((mean > 0) & (lengths > 1), sd / mean, 0.0)

    return pd.DataFrame(
        {
            "trip_id": [t.trip_id for t in trips],
            "harsh_accel": (n_acc > 0).astype(np.int64),
            "harsh_decel": (n_dec > 0).astype(np.int64),
            "speeding": (vmax > speed_cap_kmh).astype(np.int64),
            "harsh_accel_count": n_acc,
            "harsh_decel_count": n_dec,
            "mean_speed_kmh": mean,
            "max_speed_kmh": vmax,
            "speed_cv": cv,
            "cruise_frac": cruise,
            "zero_frac": zero,
        },
        columns=list(FEATURE_COLUMNS),
    )


def pooled_abs_accelerations(traces: Iterable[SpeedTrace]) -> np.ndarray:
    parts = [np.abs(accelerations(t)) for t in traces]
    parts = [p for p in parts if p.size]
    return np.sort(np.concatenate(parts)) if parts else np.empty(0)


def nearest_rank(sorted_values: np.ndarray, percentile: float) -> float:
    n = sorted_values.size
    # round() guards against 97.5 * 100 / 100 landing a hair above an integer
    rank = max(1, math.ceil(round(percentile * n / 100.0, 9)))
    return float(sorted_values[min(rank, n) - 1])


def calibrate_threshold(
    traces: Iterable[SpeedTrace], percentile: float = 97.5
) -> ThresholdCalibration:
    """Harsh-event threshold as a nearest-rank percentile of pooled |a|."""
    if not 0 < percentile < 100:
        raise ValueError("percentile must lie in (0, 100)")
    pooled = pooled_abs_accelerations(traces)
    if pooled.size == 0:
        raise ValueError("no acceleration pairs")
    return ThresholdCalibration(percentile, nearest_rank(pooled, percentile), int(pooled.size))


def exceedance_curve(
    traces: Iterable[SpeedTrace], thresholds: Sequence[float]
) -> list[tuple[float, float]]:
    """Share of pooled |a| strictly above each threshold."""
    pooled = pooled_abs_accelerations(traces)
    if pooled.size == 0:
        raise ValueError("no acceleration pairs")
    above = pooled.size - np.searchsorted(pooled, np.asarray(thresholds, float), side="right")
    return [(float(t), float(c) / pooled.size) for t, c in zip(thresholds, above)]


def sample_traces(
    trips: Sequence[RawTripRecord], n: int | None, seed: int = 0, dt_s: float = 10.0
) -> list[SpeedTrace]:
    """Seeded subsample of trip traces (all trips when ``n`` is None or large)."""
    if n is None or n >= len(trips):
        return [t.trace(dt_s) for t in trips]
    idx = np.sort(np.random.default_rng(seed).choice(len(trips), size=n, replace=False))
    return [trips[i].trace(dt_s) for i in idx]
