"""Linear probability models with absorbed fixed effects.

Fixed effects are swept out by alternating projections (iterated group
demeaning). Inference is cluster-robust (CRV1) by city, month or both.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import sparse, stats
from scipy.sparse.csgraph import connected_components

log = logging.getLogger(__name__)

CLUSTER_COLUMNS = {"city": "city_id", "month": "month_key", "user": "user_id"}


class ConvergenceError(RuntimeError):
    pass


@dataclass
class Absorbed:
    X: np.ndarray
    y: np.ndarray
    dof: int  # columns spanned by the fixed effects (intercept included)
    sweeps: int
    dof_exact: bool  # False when a conservative count was used for 3+ factors


def _codes(values) -> tuple[np.ndarray, int]:
    codes, uniques = pd.factorize(pd.Series(values), sort=True)
    return codes.astype(np.int64), len(uniques)


def fe_dof(factors: Sequence[np.ndarray]) -> tuple[int, bool]:
    """Rank of the stacked dummy matrices of ``factors``.

    Exact for one or two factors (levels minus connected components of the
    bipartite level graph); each further factor contributes its level count
    minus one, an upper bound.
    """
    if not factors:
        return 0, True
    coded = [_codes(f) for f in factors]
    if len(coded) == 1:
        return coded[0][1], True
    (c1, n1), (c2, n2) = coded[0], coded[1]
    adj = sparse.coo_matrix((np.ones(c1.size), (c1, c2 + n1)), shape=(n1 + n2, n1 + n2)).tocsr()
    n_comp, _ = connected_components(adj, directed=False)
    dof = n1 + n2 - n_comp
    for _, n in coded[2:]:
        dof += n - 1
    return dof, len(coded) <= 2


def absorb_fe(
    X: np.ndarray,
    y: np.ndarray,
    factors: Sequence[np.ndarray],
    tol: float = 1e-8,
    max_sweeps: int = 10_000,
) -> Absorbed:
    """Demean ``y`` and the columns of ``X`` with respect to every factor.

    Sweeps over the factors until the largest absolute group-mean removed in
    a full sweep is below ``tol``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    M = np.column_stack([np.asarray(y, dtype=float), X])
    if not factors:
        return Absorbed(M[:, 1:], M[:, 0], 0, 0, True)
    projs = []
    for f in factors:
        codes, n = _codes(f)
        counts = np.bincount(codes, minlength=n).astype(float)
        S = sparse.csr_matrix((np.ones(codes.size), (codes, np.arange(codes.size))), shape=(n, codes.size))
        projs.append((codes, S, counts))
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        biggest = 0.0
        for codes, S, counts in projs:
            means = (S @ M) / counts[:, None]
            M -= means[codes]
            biggest = max(biggest, float(np.abs(means).max()))
        if biggest < tol or len(projs) == 1:
            break
    else:
        raise ConvergenceError(f"alternating projections did not converge in {max_sweeps} sweeps "
                               f"(last max update {biggest:.3g})")
    dof, exact = fe_dof(factors)
    return Absorbed(M[:, 1:], M[:, 0], dof, sweeps, exact)


def _crv_meat(scores: np.ndarray, clusters: np.ndarray) -> tuple[np.ndarray, int]:
    codes, G = _codes(clusters)
    S = sparse.csr_matrix((np.ones(codes.size), (codes, np.arange(codes.size))), shape=(G, codes.size))
    sums = S @ scores
    return sums.T @ sums, G


def cluster_cov(
    resid: np.ndarray,
    X: np.ndarray,
    clusters: Sequence[np.ndarray],
    n_params: int,
    psd_fix: bool = True,
) -> tuple[np.ndarray, int]:
    """CRV1 covariance; two cluster arrays give the two-way combination.

    Each one-way term carries its own G/(G-1) factor and the shared
    (N-1)/(N-K) factor with K = ``n_params``. Two-way is
    V_a + V_b - V_ab; negative eigenvalues are clamped to zero when
    ``psd_fix``. Returns ``(cov, G)`` where G is the smallest cluster count.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    xtx = X.T @ X
    if np.linalg.matrix_rank(xtx) < xtx.shape[0]:
        raise np.linalg.LinAlgError("singular X'X")
    bread = np.linalg.inv(xtx)
    scores = X * np.asarray(resid, dtype=float)[:, None]
    small = (n - 1) / (n - n_params)

    def one_way(c):
        meat, G = _crv_meat(scores, c)
        if G < 2:
            raise ValueError("cluster-robust covariance needs at least 2 clusters")
        return G / (G - 1) * small * bread @ meat @ bread, G

    if len(clusters) == 1:
        return one_way(clusters[0])
    if len(clusters) != 2:
        raise ValueError("one or two cluster dimensions supported")
    a, b = (np.asarray(c).astype(str) for c in clusters)
    va, ga = one_way(a)
    vb, gb = one_way(b)
    vab, _ = one_way(np.char.add(np.char.add(a, "\x1f"), b))
    V = va + vb - vab
    if psd_fix:
        w, Q = np.linalg.eigh(0.5 * (V + V.T))
        if w.min() < 0:
            V = (Q * np.clip(w, 0, None)) @ Q.T
    return V, min(ga, gb)


@dataclass
class FeOls:
    names: list[str]
    coef: np.ndarray
    cov: np.ndarray
    resid: np.ndarray
    n_obs: int
    n_params: int  # explicit + absorbed (per the K convention)
    dof_fe: int
    dof_exact: bool
    n_clusters: int
    r2_overall: float
    r2_within: float
    r2_adjusted: float
    sweeps: int

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0, None))

    def tstat(self, i: int = 0) -> float:
        return float(self.coef[i] / self.se[i])

    def pvalue(self, i: int = 0) -> float:
        return float(2 * stats.t.sf(abs(self.tstat(i)), self.n_clusters - 1))

    def ci95(self, i: int = 0) -> tuple[float, float]:
        q = stats.t.ppf(0.975, self.n_clusters - 1)
        return float(self.coef[i] - q * self.se[i]), float(self.coef[i] + q * self.se[i])


def fe_ols(
    y: np.ndarray,
    X: np.ndarray,
    names: Sequence[str],
    factors: Sequence[np.ndarray],
    clusters: Sequence[np.ndarray],
    k_convention: str = "full",
    tol: float = 1e-8,
) -> FeOls:
    """OLS after absorbing ``factors``, with CRV1 covariance.

    ``k_convention`` ``"full"`` counts absorbed dof in K for the small-sample
    factor; ``"explicit"`` counts the explicit regressors only.
    """
    y = np.asarray(y, dtype=float)
    ab = absorb_fe(X, y, factors, tol=tol)
    Xt, yt = ab.X, ab.y
    xtx = Xt.T @ Xt
    if np.linalg.matrix_rank(xtx, tol=1e-10 * max(1.0, np.abs(xtx).max())) < Xt.shape[1]:
        raise np.linalg.LinAlgError("regressors collinear after absorbing fixed effects")
    coef = np.linalg.solve(xtx, Xt.T @ yt)
    resid = yt - Xt @ coef
    n = y.size
    k_explicit = Xt.shape[1]
    if k_convention == "full":
        K = k_explicit + ab.dof
    elif k_convention == "explicit":
        K = k_explicit
    else:
        raise ValueError(f"unknown k_convention {k_convention!r}")
    cov, G = cluster_cov(resid, Xt, clusters, K)
    ssr = float(resid @ resid)
    tss = float(((y - y.mean()) ** 2).sum())
    r2 = 1 - ssr / tss if tss > 0 else math.nan
    wss = float(yt @ yt)
    r2w = 1 - ssr / wss if wss > 0 else math.nan
    k_total = k_explicit + ab.dof
    r2a = 1 - (1 - r2) * (n - 1) / (n - k_total) if n > k_total else math.nan
    return FeOls(list(names), coef, cov, resid, n, K, ab.dof, ab.dof_exact, G, r2, r2w, r2a, ab.sweeps)


@dataclass(frozen=True)
class FeSpec:
    outcome: str = "harsh_accel"
    controls: tuple[str, ...] = ("night", "weekend", "same_route", "log_consec_days")
    absorb: tuple[str, ...] = ("user_id", "city_id", "month_of_year")
    cluster: str = "city"  # city | month | twoway
    k_convention: str = "full"


@dataclass
class DidFit:
    outcome: str
    beta: float
    se: float
    p: float
    ci95: tuple[float, float]
    r2_overall: float
    r2_within: float
    r2_adjusted: float
    n_obs: int
    n_users: int
    n_cities: int
    n_months: int
    n_clusters: int
    cluster: str
    tau_bar: float
    avg_city_delta_pp: float
    controls: dict = field(default_factory=dict)
    dof_fe: int = 0
    dof_exact: bool = True
    k_convention: str = "full"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci95"] = list(self.ci95)
        return d


def _cluster_arrays(panel: pd.DataFrame, mode: str) -> list[np.ndarray]:
    if mode == "twoway":
        return [panel["city_id"].to_numpy(), panel["month_key"].to_numpy()]
    if mode not in CLUSTER_COLUMNS:
        raise ValueError(f"unknown cluster mode {mode!r}")
    return [panel[CLUSTER_COLUMNS[mode]].to_numpy()]


def _estimation_rows(panel: pd.DataFrame, spec: FeSpec) -> pd.DataFrame:
    need = [spec.outcome, "post", "dose", *spec.controls, *spec.absorb, "city_id", "month_key"]
    rows = panel.dropna(subset=[c for c in dict.fromkeys(need)])
    dropped = len(panel) - len(rows)
    if dropped:
        log.info("did: %d rows without dose or covariates skipped", dropped)
    return rows


def scale_delta_pp(beta: float, tau_bar: float) -> float:
    """Average-city effect in percentage points: beta * mean dose * 100."""
    return beta * tau_bar * 100.0


def fit_did(spec: FeSpec, panel: pd.DataFrame, tau_bar: float | None = None) -> DidFit:
    """Pooled continuous-treatment DiD: outcome on post x dose with absorbed FE."""
    rows = _estimation_rows(panel, spec)
    treat = rows["post"].to_numpy(float) * rows["dose"].to_numpy(float)
    X = np.column_stack([treat] + [rows[c].to_numpy(float) for c in spec.controls])
    names = ["post_x_dose", *spec.controls]
    factors = [rows[f].to_numpy() for f in spec.absorb]
    clusters = _cluster_arrays(rows, spec.cluster)
    ab = absorb_fe(treat, np.zeros(len(rows)), factors)
    if np.linalg.norm(ab.X) <= 1e-8 * max(1.0, np.linalg.norm(treat)):
        raise ValueError("treatment absorbed by the fixed effects")
    res = fe_ols(rows[spec.outcome].to_numpy(float), X, names, factors, clusters, spec.k_convention)
    tb = float(rows["dose"].mean()) if tau_bar is None else float(tau_bar)
    beta = float(res.coef[0])
    return DidFit(
        outcome=spec.outcome,
        beta=beta,
        se=float(res.se[0]),
        p=res.pvalue(0),
        ci95=res.ci95(0),
        r2_overall=res.r2_overall,
        r2_within=res.r2_within,
        r2_adjusted=res.r2_adjusted,
        n_obs=res.n_obs,
        n_users=int(rows["user_id"].nunique()),
        n_cities=int(rows["city_id"].nunique()),
        n_months=int(rows["month_of_year"].nunique()),
        n_clusters=res.n_clusters,
        cluster=spec.cluster,
        tau_bar=tb,
        avg_city_delta_pp=scale_delta_pp(beta, tb),
        controls={n: {"coef": float(c), "se": float(s)} for n, c, s in zip(names[1:], res.coef[1:], res.se[1:])},
        dof_fe=res.dof_fe,
        dof_exact=res.dof_exact,
        k_convention=spec.k_convention,
    )


@dataclass
class EventStudyFit:
    outcome: str
    reference_month: str
    months: list[str]
    coef: dict[str, float]
    se: dict[str, float]
    p: dict[str, float]
    ci95: dict[str, tuple[float, float]]
    family_alpha: float
    n_obs: int
    n_clusters: int
    notes: list[str] = field(default_factory=list)

    def pretrend_rejections(self, ban_month: str) -> list[str]:
        return [m for m in self.months if m < ban_month and m != self.reference_month
                and self.p[m] < self.family_alpha]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "month": self.months,
                "coef": [self.coef[m] for m in self.months],
                "se": [self.se[m] for m in self.months],
                "p": [self.p[m] for m in self.months],
                "ci_low": [self.ci95[m][0] for m in self.months],
                "ci_high": [self.ci95[m][1] for m in self.months],
                "reference": [m == self.reference_month for m in self.months],
            }
        )


def fit_event_study(
    spec: FeSpec,
    panel: pd.DataFrame,
    reference_month: str = "2023-11",
    months: Sequence[str] | None = None,
    family_size: int = 4,
    alpha: float = 0.05,
) -> EventStudyFit:
    """Dose x month interactions for every month but the reference.

    ``months`` restricts the estimation window; requested months without
    observations are omitted with a note. The reference coefficient is 0.
    """
    rows = _estimation_rows(panel, spec)
    notes = []
    if months is not None:
        present = set(rows["month_key"])
        for m in months:
            if m not in present:
                notes.append(f"month {m} has no observations; omitted")
        rows = rows[rows["month_key"].isin(set(months))]
    window = sorted(rows["month_key"].unique())
    if reference_month not in window:
        raise ValueError(f"reference month {reference_month} not in the sample")
    est_months = [m for m in window if m != reference_month]
    dose = rows["dose"].to_numpy(float)
    mk = rows["month_key"].to_numpy()
    X = np.column_stack([dose * (mk == m) for m in est_months] + [rows[c].to_numpy(float) for c in spec.controls])
    names = [f"dose_x_{m}" for m in est_months] + list(spec.controls)
    res = fe_ols(rows[spec.outcome].to_numpy(float), X, names,
                 [rows[f].to_numpy() for f in spec.absorb], _cluster_arrays(rows, spec.cluster), spec.k_convention)
    coef, se, p, ci = {}, {}, {}, {}
    for i, m in enumerate(est_months):
        coef[m], se[m], p[m], ci[m] = float(res.coef[i]), float(res.se[i]), res.pvalue(i), res.ci95(i)
    coef[reference_month], se[reference_month], p[reference_month] = 0.0, 0.0, 1.0
    ci[reference_month] = (0.0, 0.0)
    return EventStudyFit(spec.outcome, reference_month, window, coef, se, p, ci, alpha / family_size,
                         res.n_obs, res.n_clusters, notes)


@dataclass
class PlaceboFit:
    fake_post: str
    trend_order: int
    beta: float
    se: float
    p: float
    ci95: tuple[float, float]
    n_obs: int
    n_clusters: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci95"] = list(self.ci95)
        return d


def fit_placebo(
    agg: pd.DataFrame,
    fake_post: str,
    trend_order: int = 1,
    ban_month: str | None = None,
    value: str = "mean",
    k_convention: str = "full",
) -> PlaceboFit:
    """Fictitious-date DiD on the city x month aggregate panel.

    City and month FE are absorbed; city-specific polynomial trends of
    ``trend_order`` enter as explicit regressors (one reference city
    dropped per power). Clustered by city.
    """
    if trend_order not in (0, 1, 2):
        raise ValueError("trend_order must be 0, 1 or 2")
    rows = agg.dropna(subset=[value, "dose"])
    if ban_month is not None:
        rows = rows[rows["month_key"] < ban_month]
    t = rows["month_idx"].to_numpy(float)
    t = t - t.mean()
    treat = (rows["month_key"].to_numpy() >= fake_post).astype(float) * rows["dose"].to_numpy(float)
    cols, names = [treat], ["fake_post_x_dose"]
    cities = sorted(rows["city_id"].unique())
    cid = rows["city_id"].to_numpy()
    for power in range(1, trend_order + 1):
        for c in cities[1:]:
            cols.append((cid == c) * t**power)
            names.append(f"trend{power}[{c}]")
    X = np.column_stack(cols)
    factors = [cid, rows["month_key"].to_numpy()]
    ab = absorb_fe(X, np.zeros(len(rows)), factors)
    if np.linalg.matrix_rank(ab.X) < X.shape[1]:
        raise ValueError("placebo design is collinear (too few months for the trend order)")
    res = fe_ols(rows[value].to_numpy(float), X, names, factors, [cid], k_convention)
    return PlaceboFit(fake_post, trend_order, float(res.coef[0]), float(res.se[0]), res.pvalue(0), res.ci95(0),
                      res.n_obs, res.n_clusters)


def city_changes(agg: pd.DataFrame, pre_months: Sequence[str], post_month: str, value: str = "mean") -> pd.DataFrame:
    """Per-city trip-weighted pre-window mean, post-month mean, change and dose."""
    pre = agg[agg["month_key"].isin(set(pre_months))]
    post = agg[agg["month_key"] == post_month]
    w = pre[value] * pre["n_trips"]
    pre_mean = w.groupby(pre["city_id"]).sum() / pre["n_trips"].groupby(pre["city_id"]).sum()
    post_mean = post.set_index("city_id")[value]
    dose = agg.groupby("city_id")["dose"].first()
    out = pd.DataFrame({"pre": pre_mean, "post": post_mean}).dropna()
    out["delta"] = out["post"] - out["pre"]
    out["dose"] = dose.reindex(out.index)
    out = out.dropna(subset=["dose"])
    out.index.name = "city_id"
    return out.sort_index()


def ols_slope_hc1(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Slope of y on x with intercept, and its HC1 standard error."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    n = x.size
    X = np.column_stack([np.ones(n), x])
    xtx_inv = np.linalg.inv(X.T @ X)
    b = xtx_inv @ X.T @ y
    e = y - X @ b
    meat = (X * (e**2)[:, None]).T @ X
    V = n / (n - 2) * xtx_inv @ meat @ xtx_inv
    return float(b[1]), float(math.sqrt(V[1, 1]))


def fit_city_continuous_did(changes: pd.DataFrame) -> dict:
    """Regress each city's pre-to-post outcome change on its dose."""
    if len(changes) < 3:
        raise ValueError("continuous DiD needs at least 3 cities")
    if np.ptp(changes["dose"].to_numpy()) == 0:
        raise ValueError("dose has no variation across cities; slope undefined")
    slope, se = ols_slope_hc1(changes["dose"].to_numpy(), changes["delta"].to_numpy())
    n = len(changes)
    p = float(2 * stats.t.sf(abs(slope / se), n - 2)) if se > 0 else 0.0
    return {"slope": slope, "se": se, "p": p, "n_cities": n}


def fit_2x2_did(changes: pd.DataFrame) -> dict:
    """High- vs low-dose (median split, ties low) difference in mean city changes."""
    med = float(np.median(changes["dose"]))
    high = changes.loc[changes["dose"] > med, "delta"].to_numpy()
    low = changes.loc[changes["dose"] <= med, "delta"].to_numpy()
    if high.size < 2 or low.size < 2:
        raise ValueError("2x2 DiD needs at least 2 cities in each dose group")
    att = float(high.mean() - low.mean())
    se = float(math.sqrt(high.var(ddof=1) / high.size + low.var(ddof=1) / low.size))
    return {"att": att, "se": se, "n_high": int(high.size), "n_low": int(low.size)}


def short_regression(panel: pd.DataFrame, outcome: str) -> tuple[float, float]:
    """Treatment-only OLS (with intercept): coefficient and R^2."""
    rows = panel.dropna(subset=[outcome, "dose", "post"])
    x = rows["post"].to_numpy(float) * rows["dose"].to_numpy(float)
    y = rows[outcome].to_numpy(float)
    X = np.column_stack([np.ones(x.size), x])
    b, *_ = np.linalg.lstsq(X, y, rcond=None)
    e = y - X @ b
    tss = float(((y - y.mean()) ** 2).sum())
    return float(b[1]), 1 - float(e @ e) / tss
