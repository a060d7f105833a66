"""Synthetic panels with known parameters.

All randomness comes from a counter-based generator: a SplitMix64 hash of
``(seed, stream, user, trip, ...)``. A value therefore depends only on its
keys, never on generation order, so panels are reproducible and
order-independent.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta, timezone

import numpy as np
import pandas as pd
from scipy import special, stats

from .panel_builder import MUNDLAK_VARS, month_index
from .telemetry_io import RawTripRecord

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix(z: np.ndarray) -> np.ndarray:
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def counter_uniform(seed: int, stream: int, *keys) -> np.ndarray:
    """Uniforms in (0, 1) addressed by integer keys (broadcast together)."""
    with np.errstate(over="ignore"):
        h = _splitmix(np.array([seed], dtype=np.uint64))
        h = _splitmix(h ^ np.uint64(stream))
        for k in keys:
            h = _splitmix(h ^ np.asarray(k, dtype=np.int64).astype(np.uint64))
    return ((h >> np.uint64(11)).astype(float) + 0.5) * 2.0**-53


def counter_normal(seed: int, stream: int, *keys) -> np.ndarray:
    return special.ndtri(counter_uniform(seed, stream, *keys))


def _month_keys(first: str, last: str) -> list[str]:
    a, b = month_index(first), month_index(last)
    return [f"{m // 12}-{m % 12 + 1:02d}" for m in range(a, b + 1)]


def _logistic(x):
    return special.expit(x)


# ---------------------------------------------------------------------------
# Phase-I style logit panel


@dataclass
class LogitDgpConfig:
    n_users: int = 25_000
    trips_lambda: float = 1.5  # trips per user = 1 + Poisson(lambda)
    n_cities: int = 10
    first_month: str = "2023-02"
    last_month: str = "2023-11"
    const: float = -1.5
    mu_tub: float = 0.6
    mu_eco: float = -1.0
    sigma_tub: float = 0.75
    sigma_eco: float = 0.5
    gamma_het: tuple[float, float, float, float] = (-0.05, -0.1, -0.1, -0.1)  # TUBxexp, TUBxnight, TUBxroute, ECOxexp
    delta: tuple[float, ...] = (0.2, 0.1, -0.1, 0.05, 0.05)  # night, weekend, same_route, log_consec, log_exp
    mundlak: tuple[float, ...] = (0.3, -0.2, 0.0, 0.0, 0.0, 0.0, 0.0)
    city_sd: float = 0.2
    month_sd: float = 0.1
    mode_sd: float = 0.5  # user-level spread of mode propensities
    seed: int = 0


def generate_logit_panel(cfg: LogitDgpConfig) -> tuple[pd.DataFrame, dict]:
    """Simulate the random-parameters logit forward.

    Rider slopes are ``N(mu + Gamma' m_it, sigma^2)`` with one normal per
    rider held fixed across their trips; outcomes are Bernoulli draws from
    the logistic index.
    """
    s = cfg.seed
    users = np.arange(cfg.n_users)
    n_trips = 1 + stats.poisson.ppf(counter_uniform(s, 1, users), cfg.trips_lambda).astype(np.int64)
    uid = np.repeat(users, n_trips)
    tno = np.concatenate([np.arange(n) for n in n_trips])
    months = _month_keys(cfg.first_month, cfg.last_month)

    city = np.floor(counter_uniform(s, 2, users) * cfg.n_cities).astype(np.int64)[uid]
    a_tub = cfg.mode_sd * counter_normal(s, 3, users)[uid]
    a_eco = cfg.mode_sd * counter_normal(s, 4, users)[uid]
    ex = np.exp(np.column_stack([np.zeros_like(a_tub), a_tub, a_eco]))
    probs = ex / ex.sum(axis=1, keepdims=True)
    um = counter_uniform(s, 5, uid, tno)
    mode_code = (um > probs[:, 0]).astype(int) + (um > probs[:, 0] + probs[:, 1]).astype(int)
    tub = (mode_code == 1).astype(np.int64)
    eco = (mode_code == 2).astype(np.int64)

    month_pos = np.floor(counter_uniform(s, 6, uid, tno) * len(months)).astype(np.int64)
    night = (counter_uniform(s, 7, uid, tno) < 0.15).astype(np.int64)
    weekend = (counter_uniform(s, 8, uid, tno) < 2 / 7).astype(np.int64)
    same_route = ((tno > 0) & (counter_uniform(s, 9, uid, tno) < 0.35)).astype(np.int64)
    consec = 1 + stats.poisson.ppf(counter_uniform(s, 10, uid, tno), 0.5)
    log_consec = np.log1p(consec)
    log_exp = np.log1p(tno.astype(float))

    df = pd.DataFrame(
        {
            "trip_id": [f"t{u}_{t}" for u, t in zip(uid, tno)],
            "user_id": [f"u{u:06d}" for u in uid],
            "city_id": [f"c{c:02d}" for c in city],
            "month_key": [months[m] for m in month_pos],
            "mode": np.array(["STD", "TUB", "ECO"])[mode_code],
            "tub": tub,
            "eco": eco,
            "night": night,
            "weekend": weekend,
            "same_route": same_route,
            "log_consec_days": log_consec,
            "log_experience": log_exp,
        }
    )
    df["month_of_year"] = df["month_key"].str[5:7].astype(int)
    df["month_idx"] = month_index(df["month_key"])
    df["pre_ban"] = 1
    df["post"] = 0
    means = df.groupby("user_id")[list(MUNDLAK_VARS)].transform("mean")
    for v in MUNDLAK_VARS:
        df["m_" + v] = means[v].to_numpy()

    city_eff = cfg.city_sd * counter_normal(s, 11, np.arange(cfg.n_cities))
    month_eff = cfg.month_sd * counter_normal(s, 12, np.arange(len(months)))
    e_tub = counter_normal(s, 13, users)[uid]
    e_eco = counter_normal(s, 14, users)[uid]
    g = cfg.gamma_het
    b_tub = cfg.mu_tub + g[0] * log_exp + g[1] * night + g[2] * same_route + cfg.sigma_tub * e_tub
    b_eco = cfg.mu_eco + g[3] * log_exp + cfg.sigma_eco * e_eco
    W = df[["night", "weekend", "same_route", "log_consec_days", "log_experience"]].to_numpy(float)
    Z = df[["m_" + v for v in MUNDLAK_VARS]].to_numpy(float)
    index = (cfg.const + b_tub * tub + b_eco * eco + W @ np.asarray(cfg.delta) + Z @ np.asarray(cfg.mundlak)
             + city_eff[city] + month_eff[month_pos])
    p = _logistic(index)
    y = (counter_uniform(s, 15, uid, tno) < p).astype(np.int64)
    df["harsh_accel"] = y
    df["harsh_decel"] = y
    df["speeding"] = y

    truth = {
        "preset": "logit",
        "config": _jsonable(asdict(cfg)),
        "mu_tub": cfg.mu_tub,
        "mu_eco": cfg.mu_eco,
        "sigma_tub": cfg.sigma_tub,
        "sigma_eco": cfg.sigma_eco,
        "tub_x_log_experience": g[0],
        "tub_x_night": g[1],
        "tub_x_same_route": g[2],
        "eco_x_log_experience": g[3],
        "controls": dict(zip(("night", "weekend", "same_route", "log_consec_days", "log_experience"), cfg.delta)),
        "mundlak": dict(zip(["m_" + v for v in MUNDLAK_VARS], cfg.mundlak)),
        "city_effects": {f"c{c:02d}": float(x) for c, x in enumerate(city_eff)},
        "month_effects": {m: float(x) for m, x in zip(months, month_eff)},
        "n_trips": int(len(df)),
    }
    return df, truth


# ---------------------------------------------------------------------------
# Phase-II style DiD panel


@dataclass
class DidDgpConfig:
    n_users: int = 2_000
    n_cities: int = 50
    first_month: str = "2023-02"
    last_month: str = "2023-12"
    ban_month: str = "2023-12"
    reference_month: str = "2023-11"
    trips_per_month: float = 1.5  # Poisson mean per user-month
    dose_low: float = 0.05
    dose_high: float = 0.70
    baseline: dict = field(default_factory=lambda: {"harsh_accel": 0.20, "harsh_decel": 0.25, "speeding": 0.15})
    beta: dict = field(default_factory=lambda: {"harsh_accel": -0.10, "harsh_decel": -0.10, "speeding": -0.40})
    user_sd: float = 0.05
    city_sd: float = 0.03
    month_sd: float = 0.02
    night_effect: float = 0.02
    seed: int = 0


def generate_did_panel(cfg: DidDgpConfig) -> tuple[pd.DataFrame, dict]:
    """Simulate ``y = user + city + month + beta * post * dose`` as Bernoulli draws.

    Probabilities are clamped to [0.01, 0.99]. The city dose is fixed by the
    config draw and also drives each city's pre-ban TUB mode share.
    """
    s = cfg.seed
    months = _month_keys(cfg.first_month, cfg.last_month)
    users = np.arange(cfg.n_users)
    cities = np.arange(cfg.n_cities)
    dose = cfg.dose_low + (cfg.dose_high - cfg.dose_low) * counter_uniform(s, 20, cities)
    home = np.floor(counter_uniform(s, 21, users) * cfg.n_cities).astype(np.int64)

    mm, uu = np.meshgrid(np.arange(len(months)), users)
    counts = stats.poisson.ppf(counter_uniform(s, 22, uu.ravel(), mm.ravel()), cfg.trips_per_month).astype(np.int64)
    uid = np.repeat(uu.ravel(), counts)
    mpos = np.repeat(mm.ravel(), counts)
    k_in_cell = np.concatenate([np.arange(c) for c in counts]) if counts.size else np.empty(0, np.int64)
    tno = mpos * 1000 + k_in_cell
    city = home[uid]
    ban_pos = months.index(cfg.ban_month)
    post = (mpos == ban_pos).astype(np.int64)

    tub_prob = np.where(post == 1, 0.014, dose[city])
    um = counter_uniform(s, 23, uid, tno)
    tub = (um < tub_prob).astype(np.int64)
    eco = ((1 - tub) * (counter_uniform(s, 24, uid, tno) < 0.1)).astype(np.int64)
    mode = np.where(tub == 1, "TUB", np.where(eco == 1, "ECO", "STD"))
    night = (counter_uniform(s, 25, uid, tno) < 0.15).astype(np.int64)
    weekend = (counter_uniform(s, 26, uid, tno) < 2 / 7).astype(np.int64)

    df = pd.DataFrame(
        {
            "trip_id": [f"t{u}_{t}" for u, t in zip(uid, tno)],
            "user_id": [f"u{u:06d}" for u in uid],
            "city_id": [f"c{c:02d}" for c in city],
            "month_key": [months[m] for m in mpos],
            "mode": mode,
            "tub": tub,
            "eco": eco,
            "night": night,
            "weekend": weekend,
            "post": post,
            "dose": dose[city],
        }
    )
    df["month_of_year"] = df["month_key"].str[5:7].astype(int)
    df["month_idx"] = month_index(df["month_key"])
    df["pre_ban"] = (mpos < ban_pos).astype(np.int64)

    truth = {"preset": "did", "config": _jsonable(asdict(cfg)), "beta": dict(cfg.beta),
             "dose": {f"c{c:02d}": float(d) for c, d in enumerate(dose)}, "outcomes": {}}
    for j, (name, base) in enumerate(sorted(cfg.baseline.items())):
        stream = 30 + 10 * j
        a_u = cfg.user_sd * counter_normal(s, stream, users)
        e_c = cfg.city_sd * counter_normal(s, stream + 1, cities)
        g_m = cfg.month_sd * counter_normal(s, stream + 2, np.arange(len(months)))
        p = base + a_u[uid] + e_c[city] + g_m[mpos] + cfg.night_effect * night + cfg.beta[name] * post * dose[city]
        p = np.clip(p, 0.01, 0.99)
        df[name] = (counter_uniform(s, stream + 3, uid, tno) < p).astype(np.int64)
        df[name + "_count"] = df[name]
        truth["outcomes"][name] = {"baseline": base, "beta": cfg.beta[name]}
    df["harsh_accel_count"] = df.pop("harsh_accel_count")
    df["harsh_decel_count"] = df.pop("harsh_decel_count")
    df = df.drop(columns=["speeding_count"])
    truth["tau_bar"] = float(df["dose"].mean())
    return df, truth


# ---------------------------------------------------------------------------
# Raw trip records with speed traces, for end-to-end pipeline runs


@dataclass
class TripDgpConfig:
    n_users: int = 1_500
    n_cities: int = 12
    first_month: str = "2023-02"
    last_month: str = "2023-12"
    ban_month: str = "2023-12"
    trips_per_month: float = 1.2
    dose_low: float = 0.1
    dose_high: float = 0.7
    step_sd_kmh: dict = field(default_factory=lambda: {"TUB": 9.0, "STD": 7.0, "ECO": 6.0})
    cap_kmh: dict = field(default_factory=lambda: {"TUB": 32.0, "STD": 25.0, "ECO": 20.0})
    rider_sd: float = 0.25  # multiplicative rider aggressiveness (log scale)
    cities_without_reference: int = 1  # trailing cities with no trips in the month before the ban
    utc_offset_hours: int = 9
    seed: int = 0


def random_walk_trace(seed: int, key: int, n_points: int, step_sd: float, cap: float) -> np.ndarray:
    """Speed trace (km/h) from a clipped Gaussian random walk starting at rest."""
    z = counter_normal(seed, 99, np.full(n_points, key), np.arange(n_points))
    v = np.empty(n_points)
    cur = 0.0
    for i in range(n_points):
        cur = min(max(cur + step_sd * z[i], 0.0), cap)
        v[i] = cur
    return v


def generate_trip_records(cfg: TripDgpConfig) -> tuple[list[RawTripRecord], dict]:
    s = cfg.seed
    months = _month_keys(cfg.first_month, cfg.last_month)
    ban_pos = months.index(cfg.ban_month)
    cities = np.arange(cfg.n_cities)
    dose = cfg.dose_low + (cfg.dose_high - cfg.dose_low) * counter_uniform(s, 40, cities)
    lat0 = 35.0 + 2.0 * counter_uniform(s, 41, cities)
    lon0 = 127.0 + 1.5 * counter_uniform(s, 42, cities)
    no_ref = set(range(cfg.n_cities - cfg.cities_without_reference, cfg.n_cities))
    tz = timezone(timedelta(hours=cfg.utc_offset_hours))
    records: list[RawTripRecord] = []
    for u in range(cfg.n_users):
        c = int(cfg.n_cities * counter_uniform(s, 43, u)[0])
        aggr = math.exp(cfg.rider_sd * float(counter_normal(s, 44, u)[0]))
        home_lat = lat0[c] + 0.02 * float(counter_normal(s, 45, u)[0])
        home_lon = lon0[c] + 0.02 * float(counter_normal(s, 46, u)[0])
        for m_pos, mkey in enumerate(months):
            if c in no_ref and m_pos == ban_pos - 1:
                continue
            n = int(stats.poisson.ppf(counter_uniform(s, 47, u, m_pos)[0], cfg.trips_per_month))
            for k in range(n):
                key = u * 100_000 + m_pos * 1000 + k
                draws = counter_uniform(s, 48, key, np.arange(8))
                if m_pos >= ban_pos:
                    mode = "ECO" if draws[0] < 0.1 else "STD"
                else:
                    mode = "TUB" if draws[0] < dose[c] else ("ECO" if draws[0] > 0.93 else "STD")
                year, month = int(mkey[:4]), int(mkey[5:])
                day = 1 + int(draws[1] * 28)
                hour = int(draws[2] * 24)
                minute = int(draws[3] * 60)
                start = datetime(year, month, day, hour, minute, tzinfo=tz)
                # half of the trips start from the rider's home cell
                jitter = 0.0005 if draws[4] < 0.5 else 0.03
                olat = home_lat + jitter * float(counter_normal(s, 49, key)[0])
                olon = home_lon + jitter * float(counter_normal(s, 50, key)[0])
                n_pts = 2 + int(stats.poisson.ppf(draws[5], 12))
                speeds = random_walk_trace(s, key, n_pts, cfg.step_sd_kmh[mode] * aggr, cfg.cap_kmh[mode])
                speeds = np.round(speeds, 1)
                duration = 10.0 * (n_pts - 1) + float(int(draws[6] * 10))
                distance = float(round(speeds.mean() / 3.6 * duration, 1))
                records.append(
                    RawTripRecord(
                        trip_id=f"t{u:05d}_{m_pos:02d}_{k:02d}",
                        user_id=f"u{u:05d}",
                        city_id=f"c{c:02d}",
                        mode=mode,
                        start_time=start,
                        origin_lat=round(olat, 6),
                        origin_lon=round(olon, 6),
                        distance_m=distance,
                        duration_s=duration,
                        speeds_kmh=tuple(float(x) for x in speeds),
                    )
                )
    truth = {"preset": "trips", "config": _jsonable(asdict(cfg)),
             "dose": {f"c{c:02d}": float(d) for c, d in enumerate(dose)},
             "cities_without_reference": [f"c{c:02d}" for c in sorted(no_ref)]}
    return records, truth


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_jsonable(v) for v in d]
    if isinstance(d, (np.floating, np.integer)):
        return d.item()
    return d
