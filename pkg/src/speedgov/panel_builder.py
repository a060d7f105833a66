"""Estimation-ready trip panels.

A panel is a :class:`pandas.DataFrame` with one row per trip. Columns:

========================  =====================================================
``trip_id``, ``user_id``  keys
``city_id``               city key
``month_key``             local ``YYYY-MM`` of the trip start
``mode``                  TUB / STD / ECO
``harsh_accel`` ...       0/1 outcomes (also ``speeding``) and event counts
``tub``, ``eco``          mode dummies, STD is the base
``night``, ``weekend``    start-time context
``same_route``            origin cell seen on an earlier trip of the user
``log_consec_days``       ln(1 + consecutive riding days ending today)
``log_experience``        ln(1 + earlier trips of the user)
``post``                  1 in the ban month
``dose``                  reference-month TUB share of the city
========================  =====================================================
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .telemetry_io import RawTripRecord

log = logging.getLogger(__name__)

OUTCOMES = ("harsh_accel", "harsh_decel", "speeding")
CONTROLS = ("night", "weekend", "same_route", "log_consec_days", "log_experience")
MUNDLAK_VARS = ("tub", "eco", "night", "weekend", "same_route", "log_consec_days", "log_experience")

EARTH_RADIUS_M = 6_371_008.8


@dataclass
class DoseTable:
    doses: pd.DataFrame  # city_id, tub_share_nov, n_trips_nov
    reference_month: str
    excluded: list[str] = field(default_factory=list)

    def as_series(self) -> pd.Series:
        return self.doses.set_index("city_id")["tub_share_nov"]


def month_index(month_key) -> np.ndarray | int:
    """Months since year 0 for ``YYYY-MM`` keys; consecutive months differ by 1."""
    if isinstance(month_key, str):
        y, m = month_key.split("-")
        return int(y) * 12 + int(m) - 1
    s = pd.Series(month_key, dtype=str)
    return (s.str[:4].astype(int) * 12 + s.str[5:7].astype(int) - 1).to_numpy()


def trips_frame(trips: Sequence[RawTripRecord]) -> pd.DataFrame:
    """Trip metadata with local calendar fields taken from each timestamp's own offset."""
    return pd.DataFrame(
        {
            "trip_id": [t.trip_id for t in trips],
            "user_id": [t.user_id for t in trips],
            "city_id": [t.city_id for t in trips],
            "mode": [t.mode for t in trips],
            "start_utc": pd.to_datetime([t.start_time.timestamp() for t in trips], unit="s", utc=True),
            "local_hour": [t.start_time.hour for t in trips],
            "local_weekday": [t.start_time.weekday() for t in trips],
            "local_day": [t.start_time.date().toordinal() for t in trips],
            "month_key": [t.start_time.strftime("%Y-%m") for t in trips],
            "origin_lat": [t.origin_lat for t in trips],
            "origin_lon": [t.origin_lon for t in trips],
            "distance_m": [t.distance_m for t in trips],
            "duration_s": [t.duration_s for t in trips],
        }
    )


def grid_cells(meta: pd.DataFrame, grid_m: float = 500.0) -> pd.DataFrame:
    """Integer grid cell of each origin in a city-anchored equirectangular projection."""
    anchor = meta.groupby("city_id")[["origin_lat", "origin_lon"]].transform("mean")
    lat0 = np.radians(anchor["origin_lat"].to_numpy())
    x = EARTH_RADIUS_M * np.radians(meta["origin_lon"].to_numpy() - anchor["origin_lon"].to_numpy()) * np.cos(lat0)
    y = EARTH_RADIUS_M * np.radians(meta["origin_lat"].to_numpy() - anchor["origin_lat"].to_numpy())
    return pd.DataFrame(
        {"cell_x": np.floor(x / grid_m).astype(np.int64), "cell_y": np.floor(y / grid_m).astype(np.int64),
         "proj_x": x, "proj_y": y},
        index=meta.index,
    )


def build_covariates(
    meta: pd.DataFrame,
    features: pd.DataFrame,
    ban_month: str = "2023-12",
    grid_m: float = 500.0,
    urban_cities: Sequence[str] = (),
) -> pd.DataFrame:
    """Join trip metadata and kinematic features into panel rows with context covariates.

    Rows are returned sorted by user and start time. ``dose`` is left for
    :func:`attach_dose`.
    """
    df = meta.merge(features, on="trip_id", how="inner", validate="one_to_one")
    df = df.sort_values(["user_id", "start_utc", "trip_id"], kind="mergesort").reset_index(drop=True)

    df["tub"] = (df["mode"] == "TUB").astype(np.int64)
    df["eco"] = (df["mode"] == "ECO").astype(np.int64)
    hour = df["local_hour"]
    df["night"] = ((hour >= 22) | (hour < 6)).astype(np.int64)
    df["weekend"] = (df["local_weekday"] >= 5).astype(np.int64)
    df["urban"] = df["city_id"].isin(set(urban_cities)).astype(np.int64)

    cells = grid_cells(df, grid_m)
    df[["cell_x", "cell_y"]] = cells[["cell_x", "cell_y"]]
    df["same_route"] = df.duplicated(["user_id", "city_id", "cell_x", "cell_y"]).astype(np.int64)
    df["log_experience"] = np.log1p(df.groupby("user_id").cumcount().to_numpy())

    days = df[["user_id", "local_day"]].drop_duplicates().sort_values(["user_id", "local_day"])
    new_run = (days["user_id"] != days["user_id"].shift()) | (days["local_day"].diff() != 1)
    days["run_len"] = days.groupby(new_run.cumsum()).cumcount() + 1
    df = df.merge(days, on=["user_id", "local_day"], how="left")
    df["log_consec_days"] = np.log1p(df.pop("run_len").to_numpy())

    df["month_of_year"] = df["month_key"].str[5:7].astype(int)
    df["month_idx"] = month_index(df["month_key"])
    df["post"] = (df["month_key"] == ban_month).astype(np.int64)
    df["pre_ban"] = (df["month_idx"] < month_index(ban_month)).astype(np.int64)
    return df


def compute_mundlak(
    rows: pd.DataFrame, pre_ban_only: bool = True, variables: Sequence[str] = MUNDLAK_VARS
) -> tuple[pd.DataFrame, list[str]]:
    """Per-user means of the time-varying covariates.

    Returns ``(means, dropped_users)``; means are indexed by ``user_id`` with
    columns prefixed ``m_``. Users with no qualifying rows are dropped.
    """
    use = rows[rows["pre_ban"] == 1] if pre_ban_only else rows
    means = use.groupby("user_id")[list(variables)].mean().add_prefix("m_")
    dropped = sorted(set(rows["user_id"]) - set(means.index))
    if dropped:
        log.info("mundlak: %d users without qualifying rows dropped", len(dropped))
    return means, dropped


def attach_mundlak(rows: pd.DataFrame, means: pd.DataFrame) -> pd.DataFrame:
    out = rows.drop(columns=[c for c in means.columns if c in rows.columns])
    return out.merge(means, left_on="user_id", right_index=True, how="inner")


def city_dose(rows: pd.DataFrame, reference_month: str = "2023-11") -> DoseTable:
    ref = rows[rows["month_key"] == reference_month]
    if ref.empty:
        raise ValueError(f"no city has trips in reference month {reference_month}")
    g = ref.groupby("city_id")["tub"]
    doses = pd.DataFrame({"tub_share_nov": g.mean(), "n_trips_nov": g.size()}).reset_index()
    excluded = sorted(set(rows["city_id"]) - set(doses["city_id"]))
    if excluded:
        log.warning("cities without %s trips excluded from dose: %s", reference_month, excluded)
    return DoseTable(doses, reference_month, excluded)


def attach_dose(rows: pd.DataFrame, dose: DoseTable) -> pd.DataFrame:
    """Add ``dose``; rows in excluded cities get NaN and are skipped by estimators."""
    out = rows.drop(columns=["dose"], errors="ignore")
    out["dose"] = out["city_id"].map(dose.as_series()).astype(float)
    return out


def mean_dose(rows: pd.DataFrame) -> float:
    """Trip-weighted mean dose over rows with a defined dose."""
    d = rows["dose"].dropna()
    if d.empty:
        raise ValueError("no rows carry a dose")
    return float(d.mean())


def stratified_phase1_sample(
    rows: pd.DataFrame, cell_target: int, seed: int = 0
) -> tuple[pd.DataFrame, float]:
    """Up to ``cell_target`` pre-ban trips per (mode x month-of-year) cell, without replacement.

    Returns the sample (in panel order) and its realised TUB share.
    """
    pre = rows[rows["pre_ban"] == 1]
    rng = np.random.default_rng(seed)
    picked = []
    for mode in ("TUB", "STD", "ECO"):
        for moy in sorted(pre["month_of_year"].unique()):
            cell = np.flatnonzero(((pre["mode"] == mode) & (pre["month_of_year"] == moy)).to_numpy())
            if cell.size == 0:
                log.warning("phase-1 sample: empty cell mode=%s month=%s skipped", mode, moy)
                continue
            take = min(cell_target, cell.size)
            picked.append(cell[rng.choice(cell.size, size=take, replace=False)])
    idx = np.sort(np.concatenate(picked)) if picked else np.empty(0, dtype=np.int64)
    sample = pre.iloc[idx].copy()
    share = float(sample["tub"].mean()) if len(sample) else float("nan")
    return sample, share


def subgroup_split(
    rows: pd.DataFrame, dimension: str, window: Sequence[str]
) -> pd.Series:
    """Median split of users on a statistic computed over ``window`` months.

    ``experience`` uses the user's largest ``log_experience`` in the window
    (cumulative trips at the window end); ``night_rate`` and
    ``same_route_rate`` are within-window means. Ties at the median go to
    ``"low"``; users without window trips are ``"unassigned"``.
    """
    win = rows[rows["month_key"].isin(set(window))]
    g = win.groupby("user_id")
    if dimension == "experience":
        stat = g["log_experience"].max()
    elif dimension == "night_rate":
        stat = g["night"].mean()
    elif dimension == "same_route_rate":
        stat = g["same_route"].mean()
    else:
        raise ValueError(f"unknown subgroup dimension {dimension!r}")
    med = float(np.median(stat.to_numpy())) if len(stat) else math.nan
    labels = pd.Series("unassigned", index=pd.Index(sorted(rows["user_id"].unique()), name="user_id"))
    labels.loc[stat.index] = np.where(stat.to_numpy() > med, "high", "low")
    return labels


def aggregate_city_month(rows: pd.DataFrame, outcome: str) -> pd.DataFrame:
    """Unweighted trip mean of ``outcome`` per city-month cell."""
    g = rows.groupby(["city_id", "month_key"], sort=True)
    out = g[outcome].agg(["mean", "size"]).rename(columns={"size": "n_trips"}).reset_index()
    if "dose" in rows.columns:
        out["dose"] = out["city_id"].map(rows.groupby("city_id")["dose"].first())
    out["month_idx"] = month_index(out["month_key"])
    return out


PANEL_COLUMNS = (
    "trip_id", "user_id", "city_id", "month_key", "month_of_year", "month_idx", "mode",
    "harsh_accel", "harsh_decel", "speeding", "harsh_accel_count", "harsh_decel_count",
    "tub", "eco", "night", "weekend", "urban", "same_route", "log_consec_days",
    "log_experience", "duration_s", "post", "pre_ban", "dose",
)


def write_panel(rows: pd.DataFrame, path) -> None:
    cols = [c for c in PANEL_COLUMNS if c in rows.columns]
    rows[cols].to_csv(path, index=False, float_format="%.17g")


def read_panel(path) -> pd.DataFrame:
    return pd.read_csv(path, dtype={"trip_id": str, "user_id": str, "city_id": str, "month_key": str})
