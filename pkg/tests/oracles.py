"""Independent brute-force reference implementations used by the tests."""

import math

import numpy as np
import pandas as pd
from scipy import linalg


def dummy_block(factors):
    """Stacked one-hot columns of every factor, redundant columns removed by pivoted QR."""
    cols = [pd.get_dummies(pd.Series(f).astype(str)).to_numpy(float) for f in factors]
    D = np.column_stack(cols)
    _, R, piv = linalg.qr(D, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > 1e-9 * d[0]))
    return D[:, np.sort(piv[:rank])]


def explicit_dummy_ols(y, X, factors):
    """OLS of y on [X, dummies]; returns (beta_X, residuals, full design, rank of dummies)."""
    D = dummy_block(factors)
    Z = np.column_stack([X, D])
    coef = linalg.solve(Z.T @ Z, Z.T @ y, assume_a="pos")
    return coef[: X.shape[1]], y - Z @ coef, Z, D.shape[1]


def brute_crv1(Z, resid, clusters, K, n_explicit):
    """Cluster sandwich on the full dummy design, looping over clusters."""
    n = Z.shape[0]
    bread = np.linalg.inv(Z.T @ Z)
    meat = np.zeros((Z.shape[1], Z.shape[1]))
    labels = sorted(set(clusters))
    for g in labels:
        idx = [i for i in range(n) if clusters[i] == g]
        s = Z[idx].T @ resid[idx]
        meat += np.outer(s, s)
    G = len(labels)
    V = G / (G - 1) * (n - 1) / (n - K) * bread @ meat @ bread
    return V[:n_explicit, :n_explicit]


def random_fe_panel(rng, n_max=1000, n_factors=None):
    n = int(rng.integers(40, n_max + 1))
    n_factors = int(rng.integers(2, 4)) if n_factors is None else n_factors
    factors = [rng.integers(0, int(rng.integers(2, 12)), n) for _ in range(n_factors)]
    k = int(rng.integers(1, 4))
    X = rng.normal(size=(n, k))
    effects = sum(rng.normal(size=f.max() + 1)[f] for f in factors)
    y = X @ rng.normal(size=k) + effects + rng.normal(size=n)
    clusters = factors[0]
    return y, X, factors, clusters


def loop_features(speeds, dt=10.0, thr=0.5, cap=25.0, band=3.0, zmax=0.5):
    """Direct-loop reimplementation sharing no code with the package."""
    n = len(speeds)
    acc = dec = 0
    for i in range(n - 1):
        a = (speeds[i + 1] - speeds[i]) / (dt * 3.6)
        if a > thr:
            acc += 1
        if a < -thr:
            dec += 1
    vmax = speeds[0]
    for v in speeds:
        if v > vmax:
            vmax = v
    mean = math.fsum(speeds) / n
    ss = 0.0
    for v in speeds:
        ss += (v - mean) ** 2
    sd = math.sqrt(ss / n)
    cv = sd / mean if (mean > 0 and n > 1) else 0.0
    cruise = sum(1 for v in speeds if abs(v - mean) <= band) / n
    zero = sum(1 for v in speeds if v <= zmax) / n
    return {
        "harsh_accel": int(acc > 0), "harsh_decel": int(dec > 0), "speeding": int(vmax > cap),
        "harsh_accel_count": acc, "harsh_decel_count": dec,
        "mean_speed_kmh": mean, "max_speed_kmh": vmax, "speed_cv": cv, "cruise_frac": cruise, "zero_frac": zero,
    }
