"""Random-parameters binary logit estimated by simulated maximum likelihood.

The TUB and ECO slopes are rider-specific normals whose means shift with
trip-level moderators. Every trip of a rider shares that rider's draws, so
the simulated likelihood of a rider is the draw-average of the product of
their trip probabilities.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numba
import numpy as np
import pandas as pd
from scipy import stats

from .panel_builder import CONTROLS, MUNDLAK_VARS
from .quasirandom import HaltonPlan, normal_draws_for_users

log = logging.getLogger(__name__)

INTERACTIONS = (
    ("tub", "log_experience"),
    ("tub", "night"),
    ("tub", "same_route"),
    ("eco", "log_experience"),
)
FIXED_EFFECTS = ("city_id", "month_of_year")
SIGMA_NAMES = ("sigma_tub", "sigma_eco")


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class RpLogitSpec:
    outcome: str = "harsh_accel"
    controls: tuple[str, ...] = CONTROLS
    mundlak: tuple[str, ...] = tuple("m_" + v for v in MUNDLAK_VARS)
    interactions: tuple[tuple[str, str], ...] = INTERACTIONS
    fixed_effects: tuple[str, ...] = FIXED_EFFECTS
    plan: HaltonPlan = field(default_factory=HaltonPlan)


@dataclass
class Layout:
    """Column layout of the fixed part of the index, reused for prediction."""

    names: list[str]
    fe_levels: dict[str, list[str]]  # retained (non-reference) levels per factor

    def to_dict(self) -> dict:
        return {"names": self.names, "fe_levels": self.fe_levels}


@dataclass
class LogitData:
    X: np.ndarray  # (N, k_fixed), rows grouped by user
    y: np.ndarray
    tub: np.ndarray
    eco: np.ndarray
    offsets: np.ndarray  # (U + 1,) row offsets of each user block
    user_ids: np.ndarray  # sorted unique user ids; position = draw index
    order: np.ndarray  # panel row -> data row permutation
    layout: Layout

    @property
    def n_users(self) -> int:
        return self.offsets.size - 1


def _param_name(col: str) -> str:
    return {"tub": "mu_tub", "eco": "mu_eco"}.get(col, col)


def build_design(spec: RpLogitSpec, panel: pd.DataFrame, layout: Layout | None = None) -> LogitData:
    """Fixed-part design matrix with users stored contiguously.

    Users are keyed by their position among the sorted unique ``user_id``
    values, which fixes each user's draw block independently of row order.
    FE dummies drop the first sorted level of each factor unless ``layout``
    (from a previous fit) dictates the retained levels.
    """
    cols: dict[str, np.ndarray] = {"const": np.ones(len(panel))}
    cols["mu_tub"] = panel["tub"].to_numpy(float)
    cols["mu_eco"] = panel["eco"].to_numpy(float)
    for mode, mod in spec.interactions:
        cols[f"{mode}_x_{mod}"] = panel[mode].to_numpy(float) * panel[mod].to_numpy(float)
    for c in spec.controls:
        cols[c] = panel[c].to_numpy(float)
    for c in spec.mundlak:
        cols[c] = panel[c].to_numpy(float)
    fe_levels: dict[str, list[str]] = {}
    for fe in spec.fixed_effects:
        values = panel[fe].astype(str).to_numpy()
        if layout is None:
            levels = sorted(set(values))[1:]
        else:
            levels = layout.fe_levels[fe]
        fe_levels[fe] = levels
        for lev in levels:
            cols[f"{fe}[{lev}]"] = (values == lev).astype(float)
    if layout is not None:
        missing = [n for n in layout.names if n not in cols]
        if missing:
            raise ValueError(f"panel lacks columns required by the fit: {missing}")
        names = list(layout.names)
    else:
        names = list(cols)
    X = np.column_stack([cols[n] for n in names])

    users = panel["user_id"].astype(str).to_numpy()
    user_ids, codes = np.unique(users, return_inverse=True)
    order = np.argsort(codes, kind="stable")
    counts = np.bincount(codes, minlength=user_ids.size)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return LogitData(
        X=np.ascontiguousarray(X[order]),
        y=panel[spec.outcome].to_numpy(float)[order],
        tub=cols["mu_tub"][order],
        eco=cols["mu_eco"][order],
        offsets=offsets,
        user_ids=user_ids,
        order=order,
        layout=Layout(names, fe_levels),
    )


def check_variation(data: LogitData) -> None:
    sd = data.X.std(axis=0)
    flat = [n for n, s in zip(data.layout.names, sd) if s == 0 and n != "const"]
    if flat:
        raise ValueError(f"regressors without variation: {flat}")


@numba.njit(cache=True)
def _log_logistic(u, y):
    """(log-probability of y, y - Lambda(u)) from a single exp."""
    if u >= 0.0:
        ex = math.exp(-u)
        l1 = math.log1p(ex)
        if y > 0.5:
            return -l1, y - 1.0 / (1.0 + ex)
        return -u - l1, y - 1.0 / (1.0 + ex)
    ex = math.exp(u)
    l1 = math.log1p(ex)
    if y > 0.5:
        return u - l1, y - ex / (1.0 + ex)
    return -l1, y - ex / (1.0 + ex)


@numba.njit(cache=True)
def _sim_kernel(v, tub, eco, y, offsets, e1, e2, s1, s2, want_grad):
    n = v.size
    n_users = offsets.size - 1
    R = e1.shape[1]
    ll_users = np.empty(n_users)
    g_trip = np.zeros(n)
    g_s = np.zeros(2)
    L = np.empty(R)
    w = np.empty(R)
    maxlen = 0
    for i in range(n_users):
        maxlen = max(maxlen, offsets[i + 1] - offsets[i])
    res = np.empty((maxlen, R))
    log_r = math.log(R)
    bad = -1
    for i in range(n_users):
        a = offsets[i]
        b = offsets[i + 1]
        const = 0.0
        for r in range(R):
            L[r] = 0.0
        for t in range(a, b):
            if tub[t] == 0.0 and eco[t] == 0.0:
                # governed-base trip: index does not depend on the draw
                lp, rs = _log_logistic(v[t], y[t])
                const += lp
                if want_grad:
                    g_trip[t] += rs
                continue
            for r in range(R):
                u = v[t] + s1 * e1[i, r] * tub[t] + s2 * e2[i, r] * eco[t]
                lp, rs = _log_logistic(u, y[t])
                L[r] += lp
                res[t - a, r] = rs
        m = L[0]
        for r in range(1, R):
            if L[r] > m:
                m = L[r]
        s = 0.0
        for r in range(R):
            w[r] = math.exp(L[r] - m)
            s += w[r]
        ll_users[i] = const + m + math.log(s) - log_r
        if not math.isfinite(ll_users[i]) and bad < 0:
            bad = i
        if want_grad:
            for r in range(R):
                w[r] /= s
            for t in range(a, b):
                if tub[t] == 0.0 and eco[t] == 0.0:
                    continue
                acc = 0.0
                acc1 = 0.0
                acc2 = 0.0
                for r in range(R):
                    wr = w[r] * res[t - a, r]
                    acc += wr
                    acc1 += wr * e1[i, r]
                    acc2 += wr * e2[i, r]
                g_trip[t] += acc
                g_s[0] += acc1 * tub[t]
                g_s[1] += acc2 * eco[t]
    return ll_users, g_trip, g_s, bad


@numba.njit(cache=True)
def _mean_prob_kernel(v, tub, eco, offsets, e1, e2, s1, s2):
    n_users = offsets.size - 1
    R = e1.shape[1]
    p = np.zeros(v.size)
    for i in range(n_users):
        for t in range(offsets[i], offsets[i + 1]):
            acc = 0.0
            for r in range(R):
                u = v[t] + s1 * e1[i, r] * tub[t] + s2 * e2[i, r] * eco[t]
                if u >= 0.0:
                    acc += 1.0 / (1.0 + math.exp(-u))
                else:
                    ex = math.exp(u)
                    acc += ex / (1.0 + ex)
            p[t] = acc / R
    return p


def _pairwise_sum(x: np.ndarray) -> float:
    # np.add.reduce on a contiguous float array is already pairwise, fixed order
    return float(np.add.reduce(np.ascontiguousarray(x)))


class SimulatedLikelihood:
    """Simulated log-likelihood and analytic gradient for one design."""

    def __init__(self, data: LogitData, draws: np.ndarray):
        if draws.shape[0] != data.n_users or draws.shape[2] < 2:
            raise ValueError("draws must have shape (n_users, R, 2)")
        self.data = data
        self.e1 = np.ascontiguousarray(draws[:, :, 0])
        self.e2 = np.ascontiguousarray(draws[:, :, 1])
        self.k_fixed = data.X.shape[1]

    def _run(self, theta: np.ndarray, want_grad: bool):
        theta = np.asarray(theta, dtype=float)
        beta = theta[: self.k_fixed]
        s1, s2 = theta[self.k_fixed], theta[self.k_fixed + 1]
        v = self.data.X @ beta
        out = _sim_kernel(v, self.data.tub, self.data.eco, self.data.y, self.data.offsets,
                          self.e1, self.e2, s1, s2, want_grad)
        ll_users, g_trip, g_s, bad = out
        if bad >= 0:
            raise EstimationError(f"non-finite log-likelihood for user {self.data.user_ids[bad]!r}")
        return _pairwise_sum(ll_users), g_trip, g_s

    def loglik(self, theta) -> float:
        return self._run(theta, False)[0]

    def loglik_and_grad(self, theta) -> tuple[float, np.ndarray]:
        ll, g_trip, g_s = self._run(theta, True)
        return ll, np.concatenate([self.data.X.T @ g_trip, g_s])

    def mean_probabilities(self, theta, tub=None, eco=None, X=None) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        X = self.data.X if X is None else X
        v = X @ theta[: self.k_fixed]
        return _mean_prob_kernel(
            v,
            self.data.tub if tub is None else tub,
            self.data.eco if eco is None else eco,
            self.data.offsets, self.e1, self.e2,
            theta[self.k_fixed], theta[self.k_fixed + 1],
        )


def simulated_loglik(theta, data: LogitData, draws: np.ndarray) -> float:
    return SimulatedLikelihood(data, draws).loglik(theta)


def plain_logit(X: np.ndarray, y: np.ndarray, tol: float = 1e-10, max_iter: int = 100) -> tuple[np.ndarray, float]:
    """Newton-Raphson ML for a homogeneous logit; returns (beta, loglik)."""
    beta = np.zeros(X.shape[1])

    def ll_of(b):
        u = X @ b
        return float(np.sum(y * u - np.logaddexp(0.0, u)))

    ll = ll_of(beta)
    for _ in range(max_iter):
        u = X @ beta
        p = 1.0 / (1.0 + np.exp(-u))
        g = X.T @ (y - p)
        H = (X * (p * (1 - p))[:, None]).T @ X
        step = np.linalg.solve(H, g)
        t = 1.0
        while True:
            cand = beta + t * step
            ll_new = ll_of(cand)
            if ll_new >= ll - 1e-12 or t < 1e-8:
                break
            t /= 2
        beta, ll_old, ll = cand, ll, ll_new
        if np.max(np.abs(g)) < tol or abs(ll - ll_old) < tol * (1 + abs(ll)):
            break
    return beta, ll


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float  # log-likelihood (maximised)
    grad: np.ndarray
    converged: bool
    iterations: int
    message: str
    trace: list[float]


def bfgs_maximize(
    fg,
    x0: np.ndarray,
    H0: np.ndarray,
    gtol: float = 1e-5,
    ftol: float = 1e-9,
    max_iter: int = 500,
) -> OptimResult:
    """Maximise with BFGS and backtracking (Armijo) line search.

    ``fg`` returns (value, gradient). ``H0`` is the initial inverse of the
    negative Hessian. Converged when the gradient max-norm is below ``gtol``
    and the last relative change in value is below ``ftol``.
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g = fg(x)
    H = H0.copy()
    trace = [f]
    rel = math.inf
    message = "maximum iterations reached"
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) < gtol and rel < ftol:
            message = "converged"
            it -= 1
            break
        p = H @ g
        slope = float(g @ p)
        if slope <= 0:  # lost ascent direction; restart from H0
            H = H0.copy()
            p = H @ g
            slope = float(g @ p)
        t = 1.0
        while True:
            x_new = x + t * p
            try:
                f_new, g_new = fg(x_new)
                ok = math.isfinite(f_new) and f_new >= f + 1e-4 * t * slope
            except EstimationError:
                ok = False
            if ok:
                break
            t *= 0.5
            if t < 1e-12:
                break
        if not ok:
            converged = np.max(np.abs(g)) < gtol
            message = "line search failed" + (" at a stationary point" if converged else "")
            return OptimResult(x, f, g, bool(converged), it, message, trace)
        s = x_new - x
        yv = g - g_new  # change in the negative gradient
        sy = float(s @ yv)
        if sy > 1e-12:
            rho = 1.0 / sy
            Hy = H @ yv
            H = H + (rho * rho * float(yv @ Hy) + rho) * np.outer(s, s) - rho * (np.outer(Hy, s) + np.outer(s, Hy))
        rel = abs(f_new - f) / max(1.0, abs(f_new))
        x, f, g = x_new, f_new, g_new
        trace.append(f)
    converged = np.max(np.abs(g)) < gtol and rel < ftol
    if converged:
        message = "converged"
    return OptimResult(x, f, g, bool(converged), it, message, trace)


def numerical_hessian(fg, x: np.ndarray, rel_step: float = 1e-5) -> np.ndarray:
    """Central differences of the analytic gradient, symmetrised."""
    k = x.size
    H = np.empty((k, k))
    for j in range(k):
        h = rel_step * max(1.0, abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        H[:, j] = (fg(xp)[1] - fg(xm)[1]) / (2 * h)
    return 0.5 * (H + H.T)


@dataclass
class RpLogitFit:
    names: list[str]
    estimates: np.ndarray
    se: np.ndarray
    cov: np.ndarray | None
    loglik: float
    n_trips: int
    n_users: int
    converged: bool
    iterations: int
    message: str
    grad_max: float
    layout: Layout
    settings: dict
    outcome: str
    outcome_mean: float
    raw_theta: np.ndarray  # optimiser coordinates (sigma sign as found)
    se_available: bool = True
    trace: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return int(self.settings.get("k", len(self.names)))

    @property
    def loglik_null(self) -> float:
        return self.n_trips * math.log(0.5)

    @property
    def pseudo_r2(self) -> float:
        return mcfadden_r2(self.loglik, self.n_trips)

    @property
    def aic(self) -> float:
        return aic(self.loglik, self.k)

    @property
    def bic(self) -> float:
        return bic(self.loglik, self.k, self.n_trips)

    def param(self, name: str) -> tuple[float, float]:
        i = self.names.index(name)
        return float(self.estimates[i]), float(self.se[i])

    def pvalues(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            z = self.estimates / self.se
        return 2 * stats.norm.sf(np.abs(z))

    def to_dict(self) -> dict:
        p = self.pvalues()
        return {
            "outcome": self.outcome,
            "parameters": {
                n: {"estimate": _num(e), "se": _num(s), "p": _num(pp)}
                for n, e, s, pp in zip(self.names, self.estimates, self.se, p)
            },
            "fit": {
                "loglik": self.loglik,
                "loglik_null": self.loglik_null,
                "pseudo_r2": self.pseudo_r2,
                "aic": self.aic,
                "bic": self.bic,
                "k": self.k,
                "n_trips": self.n_trips,
                "n_users": self.n_users,
                "outcome_mean": self.outcome_mean,
            },
            "convergence": {
                "converged": self.converged,
                "iterations": self.iterations,
                "message": self.message,
                "grad_max": self.grad_max,
                "se_available": self.se_available,
            },
            "settings": self.settings,
            "layout": self.layout.to_dict(),
            "raw_theta": [float(x) for x in self.raw_theta],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RpLogitFit":
        params = d["parameters"]
        names = list(params)
        est = np.array([_unnum(params[n]["estimate"]) for n in names])
        se = np.array([_unnum(params[n]["se"]) for n in names])
        conv = d["convergence"]
        return cls(
            names=names,
            estimates=est,
            se=se,
            cov=None,
            loglik=d["fit"]["loglik"],
            n_trips=d["fit"]["n_trips"],
            n_users=d["fit"]["n_users"],
            converged=conv["converged"],
            iterations=conv["iterations"],
            message=conv["message"],
            grad_max=conv["grad_max"],
            layout=Layout(d["layout"]["names"], d["layout"]["fe_levels"]),
            settings=d["settings"],
            outcome=d["outcome"],
            outcome_mean=d["fit"]["outcome_mean"],
            raw_theta=np.array(d["raw_theta"]),
            se_available=conv["se_available"],
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RpLogitFit":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else None


def _unnum(x):
    return math.nan if x is None else float(x)


def mcfadden_r2(loglik: float, n_trips: int) -> float:
    """1 - LL / LL0 with the equal-probability null LL0 = N ln 0.5."""
    return 1.0 - loglik / (n_trips * math.log(0.5))


def aic(loglik: float, k: int) -> float:
    return 2.0 * k - 2.0 * loglik


def bic(loglik: float, k: int, n: int) -> float:
    return k * math.log(n) - 2.0 * loglik


def _draws_for(data: LogitData, plan: HaltonPlan) -> np.ndarray:
    return normal_draws_for_users(plan, data.n_users)


def fit(
    spec: RpLogitSpec,
    panel: pd.DataFrame,
    fix_sigma: bool = False,
    sigma_start: float = 0.1,
    gtol: float = 1e-5,
    ftol: float = 1e-9,
    max_iter: int = 500,
    hessian: str = "numerical",
) -> RpLogitFit:
    """Simulated-ML fit of the random-parameters logit.

    Starts from plain-logit estimates for the fixed part and ``sigma_start``
    for both spreads. With ``fix_sigma`` the spreads are held at zero, which
    reduces the model to a plain logit. ``hessian`` is ``"numerical"`` or
    ``"bhhh"``.
    """
    data = build_design(spec, panel)
    check_variation(data)
    draws = _draws_for(data, spec.plan)
    sim = SimulatedLikelihood(data, draws)
    kf = sim.k_fixed

    beta0, _ = plain_logit(data.X, data.y)
    u = data.X @ beta0
    p = 1 / (1 + np.exp(-u))
    info = (data.X * (p * (1 - p))[:, None]).T @ data.X

    if fix_sigma:
        fg = lambda b: _fixed_sigma_fg(sim, b)  # noqa: E731
        x0 = beta0
        H0 = np.linalg.inv(info)
    else:
        fg = sim.loglik_and_grad
        x0 = np.concatenate([beta0, [sigma_start, sigma_start]])
        H0 = np.zeros((kf + 2, kf + 2))
        H0[:kf, :kf] = np.linalg.inv(info)
        # diagonal curvature of the spreads by a forward difference
        g_base = fg(x0)[1]
        for j in (kf, kf + 1):
            h = 1e-3
            xp = x0.copy()
            xp[j] += h
            curv = -(fg(xp)[1][j] - g_base[j]) / h
            H0[j, j] = 1.0 / curv if curv > 1e-8 else 1.0

    res = bfgs_maximize(fg, x0, H0, gtol=gtol, ftol=ftol, max_iter=max_iter)
    if not res.converged:
        log.warning("rp-logit did not converge: %s", res.message)

    se_available = True
    if hessian == "bhhh":
        A = _bhhh(sim, res.x, fix_sigma)
    elif hessian == "numerical":
        A = -numerical_hessian(fg, res.x)
    else:
        raise ValueError(f"unknown hessian option {hessian!r}")
    try:
        w = np.linalg.eigvalsh(A)
        if w.min() <= 0:
            raise np.linalg.LinAlgError("Hessian not negative definite")
        cov = np.linalg.inv(A)
        se = np.sqrt(np.diag(cov))
    except np.linalg.LinAlgError:
        cov = None
        se = np.full(res.x.size, np.nan)
        se_available = False

    theta = res.x if not fix_sigma else np.concatenate([res.x, [0.0, 0.0]])
    if fix_sigma:
        se = np.concatenate([se, [np.nan, np.nan]])
    est = theta.copy()
    est[kf:] = np.abs(est[kf:])
    names = data.layout.names + list(SIGMA_NAMES)
    k_free = kf + (0 if fix_sigma else 2)
    settings = {
        "n_draws": spec.plan.n_draws,
        "halton_skip": spec.plan.skip,
        "scramble_seed": spec.plan.scramble_seed,
        "fix_sigma": fix_sigma,
        "sigma_start": sigma_start,
        "gtol": gtol,
        "ftol": ftol,
        "hessian": hessian,
        "k": k_free,
        "interactions": [list(x) for x in spec.interactions],
        "controls": list(spec.controls),
        "mundlak": list(spec.mundlak),
        "fixed_effects": list(spec.fixed_effects),
    }
    return RpLogitFit(
        names=names,
        estimates=est,
        se=se,
        cov=cov,
        loglik=float(res.fun),
        n_trips=int(data.y.size),
        n_users=int(data.n_users),
        converged=res.converged,
        iterations=res.iterations,
        message=res.message,
        grad_max=float(np.max(np.abs(res.grad))),
        layout=data.layout,
        settings=settings,
        outcome=spec.outcome,
        outcome_mean=float(data.y.mean()),
        raw_theta=theta,
        se_available=se_available,
        trace=res.trace,
    )


def _fixed_sigma_fg(sim: SimulatedLikelihood, beta: np.ndarray):
    ll, g = sim.loglik_and_grad(np.concatenate([beta, [0.0, 0.0]]))
    return ll, g[: sim.k_fixed]


def _bhhh(sim: SimulatedLikelihood, x: np.ndarray, fix_sigma: bool) -> np.ndarray:
    """Outer product of per-user scores, by finite differences of per-user LL."""
    theta = x if not fix_sigma else np.concatenate([x, [0.0, 0.0]])
    k = x.size
    data = sim.data
    scores = np.empty((data.n_users, k))
    for j in range(k):
        h = 1e-6 * max(1.0, abs(theta[j]))
        tp, tm = theta.copy(), theta.copy()
        tp[j] += h
        tm[j] -= h
        lp = _per_user_ll(sim, tp)
        lm = _per_user_ll(sim, tm)
        scores[:, j] = (lp - lm) / (2 * h)
    return scores.T @ scores


def _per_user_ll(sim: SimulatedLikelihood, theta: np.ndarray) -> np.ndarray:
    kf = sim.k_fixed
    v = sim.data.X @ theta[:kf]
    out = _sim_kernel(v, sim.data.tub, sim.data.eco, sim.data.y, sim.data.offsets,
                      sim.e1, sim.e2, theta[kf], theta[kf + 1], False)
    return out[0]


def counterfactual_delta(fit_result: RpLogitFit, panel: pd.DataFrame, spec: RpLogitSpec | None = None) -> dict:
    """Sample-average simulated probability as observed and with TUB trips relabelled STD.

    On TUB trips the TUB dummy and its interactions are zeroed; ECO,
    controls and Mundlak means are unchanged and the same draws are used.
    """
    spec = spec or spec_from_fit(fit_result)
    data = build_design(spec, panel, layout=fit_result.layout)
    sim = SimulatedLikelihood(data, _draws_for(data, spec.plan))
    theta = fit_result.raw_theta
    p_asis = sim.mean_probabilities(theta)
    tub_cols = [i for i, n in enumerate(data.layout.names) if n == "mu_tub" or n.startswith("tub_x_")]
    X_cf = data.X.copy()
    X_cf[:, tub_cols] = 0.0
    p_cf = sim.mean_probabilities(theta, tub=np.zeros_like(data.tub), X=X_cf)
    pa, pc = float(p_asis.mean()), float(p_cf.mean())
    return {"p_asis": pa, "p_cf": pc, "delta_pp": 100.0 * (pc - pa), "n_trips": int(p_asis.size),
            "n_tub_trips": int(data.tub.sum())}


def spec_from_fit(fit_result: RpLogitFit) -> RpLogitSpec:
    s = fit_result.settings
    plan = HaltonPlan(n_draws=s["n_draws"], skip=s["halton_skip"], scramble_seed=s.get("scramble_seed"))
    return RpLogitSpec(
        outcome=fit_result.outcome,
        controls=tuple(s["controls"]),
        mundlak=tuple(s["mundlak"]),
        interactions=tuple(tuple(x) for x in s["interactions"]),
        fixed_effects=tuple(s["fixed_effects"]),
        plan=plan,
    )


def stability_test(
    fit_a: RpLogitFit | Mapping[str, tuple[float, float]],
    fit_b: RpLogitFit | Mapping[str, tuple[float, float]],
    params: Sequence[str] | None = None,
    alpha: float = 0.05,
) -> dict[str, dict]:
    """Two-sample Z test of coefficient equality across two independent fits."""
    a = _as_param_map(fit_a)
    b = _as_param_map(fit_b)
    names = params if params is not None else [n for n in a if n in b]
    out = {}
    for n in names:
        if n not in a or n not in b:
            out[n] = {"note": "parameter missing from one fit"}
            continue
        (ea, sa), (eb, sb) = a[n], b[n]
        if not (math.isfinite(sa) and math.isfinite(sb)) or sa**2 + sb**2 == 0:
            out[n] = {"note": "standard error unavailable"}
            continue
        z = (ea - eb) / math.sqrt(sa**2 + sb**2)
        p = 2 * stats.norm.sf(abs(z))
        out[n] = {"z": z, "p": p, "verdict": "unstable" if p < alpha else "stable"}
    return out


def _as_param_map(f) -> dict[str, tuple[float, float]]:
    if isinstance(f, RpLogitFit):
        return {n: (float(e), float(s)) for n, e, s in zip(f.names, f.estimates, f.se)}
    return {n: (float(v[0]), float(v[1])) for n, v in f.items()}
