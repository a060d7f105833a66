"""Post-estimation inference: multiplicity, selection bounds, permutation,
composition and decomposition checks, and the cross-phase concordance table."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import stats

log = logging.getLogger(__name__)

METHODS = ("bonferroni", "holm", "bh")


@dataclass
class CorrectionResult:
    raw: list[float]
    bonferroni: list[float]
    holm: list[float]
    bh: list[float]
    m: int
    family_alpha: float
    method: str = "bonferroni"

    @property
    def adjusted(self) -> list[float]:
        return getattr(self, self.method)

    def to_dict(self) -> dict:
        return asdict(self)


def _bonferroni(p: np.ndarray) -> np.ndarray:
    return np.minimum(p * p.size, 1.0)


def _holm(p: np.ndarray) -> np.ndarray:
    m = p.size
    order = np.argsort(p, kind="mergesort")
    stepped = np.maximum.accumulate(p[order] * (m - np.arange(m)))
    out = np.empty(m)
    out[order] = np.minimum(stepped, 1.0)
    return out


def _bh(p: np.ndarray) -> np.ndarray:
    m = p.size
    order = np.argsort(p, kind="mergesort")
    scaled = p[order] * m / np.arange(1, m + 1)
    stepped = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(stepped, 1.0)
    return out


def correct_pvalues(p: Sequence[float], method: str = "bonferroni", alpha: float = 0.05) -> CorrectionResult:
    """Bonferroni, Holm step-down and Benjamini-Hochberg step-up adjustments.

    All three are always computed; ``method`` selects :attr:`CorrectionResult.adjusted`.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    arr = np.asarray(p, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("p must be a non-empty list")
    if np.any(~np.isfinite(arr)) or np.any((arr < 0) | (arr > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    return CorrectionResult(
        raw=arr.tolist(),
        bonferroni=_bonferroni(arr).tolist(),
        holm=_holm(arr).tolist(),
        bh=_bh(arr).tolist(),
        m=int(arr.size),
        family_alpha=alpha / arr.size,
        method=method,
    )


@dataclass
class OsterResult:
    beta_short: float
    beta_full: float
    r2_short: float
    r2_full: float
    r2_max: float
    delta: float
    beta_star: float

    def to_dict(self) -> dict:
        return asdict(self)


def oster_bound(
    beta_short: float,
    beta_full: float,
    r2_short: float,
    r2_full: float,
    r2_max: float | None = None,
    delta: float = 1.0,
    r2_max_multiplier: float = 1.3,
) -> OsterResult:
    """Bias-adjusted coefficient under proportional selection on unobservables.

    ``r2_max`` defaults to ``r2_max_multiplier * r2_full``.
    """
    if not r2_full > r2_short:
        raise ValueError("r2_full must exceed r2_short")
    if r2_max is None:
        r2_max = r2_max_multiplier * r2_full
    if r2_max < r2_full:
        raise ValueError("r2_max must be at least r2_full")
    star = beta_full - delta * (beta_short - beta_full) * (r2_max - r2_full) / (r2_full - r2_short)
    return OsterResult(beta_short, beta_full, r2_short, r2_full, r2_max, delta, star)


def slope(x: np.ndarray, y: np.ndarray) -> float:
    """OLS slope of y on x with an intercept."""
    xc = x - x.mean()
    return float(xc @ (y - y.mean()) / (xc @ xc))


@dataclass
class PermutationResult:
    observed: float
    p: float
    n_perm: int
    n_extreme: int
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


def permutation_test(
    changes: pd.DataFrame,
    observed: float | None = None,
    n_perm: int = 500,
    seed: int = 0,
    n_jobs: int = 1,
) -> PermutationResult:
    """Shuffle ``dose`` across cities and recompute the slope of ``delta`` on it.

    ``changes`` is indexed (or keyed by a ``city_id`` column) by city. Rows
    are put in city order first, and replicate ``i`` permutes with a
    generator seeded by ``(seed, i)``, so the p-value depends on neither row
    order nor ``n_jobs``. Returns the add-one estimate
    (1 + #{|b_perm| >= |b_obs|}) / (1 + n_perm).
    """
    df = changes.reset_index() if "city_id" not in changes.columns else changes
    df = df.sort_values("city_id", kind="mergesort")
    if len(df) < 3:
        raise ValueError("permutation test needs at least 3 cities")
    x = df["dose"].to_numpy(float)
    y = df["delta"].to_numpy(float)
    obs = slope(x, y) if observed is None else float(observed)

    def replicate(i: int) -> float:
        rng = np.random.default_rng([seed, i])
        return slope(rng.permutation(x), y)

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            perms = np.fromiter(ex.map(replicate, range(n_perm)), float, n_perm)
    else:
        perms = np.fromiter(map(replicate, range(n_perm)), float, n_perm)
    # tolerance guards against float noise when a replicate reproduces the observed order
    hits = int(np.sum(np.abs(perms) >= abs(obs) * (1 - 1e-12)))
    return PermutationResult(obs, (1 + hits) / (1 + n_perm), n_perm, hits, seed)


def city_month_changes(
    rows: pd.DataFrame, outcome: str, pre_month: str = "2023-11", post_month: str = "2023-12"
) -> pd.DataFrame:
    """Per-city change in TUB share and in the outcome mean between two months."""
    sub = rows[rows["month_key"].isin([pre_month, post_month])]
    g = sub.groupby(["city_id", "month_key"])[["tub", outcome]].mean().unstack("month_key")
    g = g.dropna()
    return pd.DataFrame(
        {
            "d_tub_share": g[("tub", post_month)] - g[("tub", pre_month)],
            "d_outcome": g[(outcome, post_month)] - g[(outcome, pre_month)],
        }
    ).sort_index()


def dose_response_corr(changes: pd.DataFrame) -> dict:
    """Pearson correlation of city TUB-share changes with outcome changes."""
    if len(changes) < 3:
        raise ValueError("dose-response correlation needs at least 3 cities")
    x = changes["d_tub_share"].to_numpy(float)
    y = changes["d_outcome"].to_numpy(float)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValueError("zero variance in a dose-response series")
    r, p = stats.pearsonr(x, y)
    return {"pearson_r": float(r), "p": float(p), "n": int(len(changes))}


@dataclass
class CompositionResult:
    n_switchers: int
    n_never_tub: int
    mean_change_switchers: float
    mean_change_never_tub: float
    did: float
    welch_t: float
    welch_df: float
    welch_p: float
    cohens_d: float
    verdict: str
    outcome: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def cohens_d(a: np.ndarray, b: np.ndarray) -> float:
    """Mean difference over the pooled SD (n-1 weighting)."""
    na, nb = a.size, b.size
    pooled = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2)
    diff = a.mean() - b.mean()
    if pooled == 0:
        return 0.0 if diff == 0 else math.copysign(math.inf, diff)
    return float(diff / math.sqrt(pooled))


def effect_verdict(d: float) -> str:
    a = abs(d)
    if a < 0.2:
        return "negligible"
    return "small" if a < 0.5 else "medium+"


def composition_check(
    rows: pd.DataFrame, outcome: str, pre_months: Sequence[str], post_month: str
) -> CompositionResult:
    """Compare non-TUB riding changes of TUB switchers against never-TUB riders.

    Switchers rode TUB at least once in ``pre_months`` and STD/ECO at least
    once in ``post_month``; the comparison group never rode TUB and has
    STD/ECO trips both before and after. Each user's change is the post
    minus pre mean of ``outcome`` over STD/ECO trips only.
    """
    pre_set = set(pre_months)
    in_pre = rows["month_key"].isin(pre_set)
    in_post = rows["month_key"] == post_month
    non_tub = rows["tub"] == 0
    pre_means = rows[in_pre & non_tub].groupby("user_id")[outcome].mean()
    post_means = rows[in_post & non_tub].groupby("user_id")[outcome].mean()
    change = (post_means - pre_means).dropna()

    tub_pre_users = set(rows.loc[in_pre & ~non_tub, "user_id"])
    ever_tub = set(rows.loc[~non_tub, "user_id"])
    switch_ids = [u for u in change.index if u in tub_pre_users]
    never_ids = [u for u in change.index if u not in ever_tub]
    n_switch_all = len(tub_pre_users & set(post_means.index))
    if n_switch_all > len(switch_ids):
        log.info("composition: %d switchers lack pre-window STD/ECO trips and are left out",
                 n_switch_all - len(switch_ids))
    if len(switch_ids) < 2:
        raise ValueError("composition check: switcher group is empty or has a single user")
    if len(never_ids) < 2:
        raise ValueError("composition check: never-TUB group is empty or has a single user")
    a = change.loc[switch_ids].to_numpy(float)
    b = change.loc[never_ids].to_numpy(float)
    t = stats.ttest_ind(a, b, equal_var=False)
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    df = (va + vb) ** 2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1)) if va + vb > 0 else math.nan
    d = cohens_d(a, b)
    return CompositionResult(
        n_switchers=int(a.size),
        n_never_tub=int(b.size),
        mean_change_switchers=float(a.mean()),
        mean_change_never_tub=float(b.mean()),
        did=float(a.mean() - b.mean()),
        welch_t=float(t.statistic),
        welch_df=float(df),
        welch_p=float(t.pvalue),
        cohens_d=d,
        verdict=effect_verdict(d),
        outcome=outcome,
    )


@dataclass
class ReweightResult:
    delta_p1_pp: float
    tau_p1: float
    tau_uni: float
    ratio: float
    delta_reweighted_pp: float
    delta_p2_pp: float
    residual_pp: float
    reweighted_share_pct: float

    def to_dict(self) -> dict:
        return asdict(self)


def reweight_decomposition(delta_p1_pp: float, tau_p1: float, tau_uni: float, delta_p2_pp: float) -> ReweightResult:
    """Rescale a Phase-I effect from the sample TUB share to the population share."""
    if tau_p1 <= 0:
        raise ValueError("tau_p1 must be positive")
    ratio = tau_uni / tau_p1
    rw = delta_p1_pp * ratio
    share = 100.0 * rw / delta_p2_pp if delta_p2_pp != 0 else math.nan
    return ReweightResult(delta_p1_pp, tau_p1, tau_uni, ratio, rw, delta_p2_pp, delta_p2_pp - rw, share)


@dataclass
class ConcordanceRow:
    outcome: str
    subgroup: str
    phase1_pp: float
    phase2_pp: float
    ci_low_pp: float
    ci_high_pp: float
    inside_ci: bool
    gap_pp: float


@dataclass
class ConcordanceReport:
    rows: list[ConcordanceRow] = field(default_factory=list)
    notes: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"rows": [asdict(r) for r in self.rows], "notes": self.notes}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ConcordanceReport":
        d = json.loads(text)
        return cls([ConcordanceRow(**r) for r in d["rows"]], d.get("notes", {}))

    def to_markdown(self) -> str:
        lines = [
            "| Outcome | Subgroup | Phase I (pp) | Phase II (pp) | Phase II 95% CI (pp) | Inside CI | Gap (pp) |",
            "|---|---|---:|---:|---|:-:|---:|",
        ]
        for r in self.rows:
            note = f" ({self.notes[r.outcome]})" if r.outcome in self.notes else ""
            lines.append(
                f"| {r.outcome}{note} | {r.subgroup} | {r.phase1_pp:.2f} | {r.phase2_pp:.2f} | "
                f"[{r.ci_low_pp:.2f}, {r.ci_high_pp:.2f}] | {'yes' if r.inside_ci else 'no'} | {r.gap_pp:.2f} |"
            )
        return "\n".join(lines) + "\n"


def concordance_report(
    phase1: Mapping[tuple[str, str], float],
    phase2: Mapping[tuple[str, str], tuple[float, float, float]],
    notes: Mapping[str, str] | None = None,
) -> ConcordanceReport:
    """Line up Phase-I counterfactual deltas with Phase-II effects and CIs.

    Keys are ``(outcome, subgroup)``; Phase-II values are
    ``(delta_pp, ci_low_pp, ci_high_pp)``.
    """
    k1, k2 = set(phase1), set(phase2)
    if k1 != k2:
        missing = sorted(k1 ^ k2)
        raise ValueError(f"unmatched concordance keys: {missing}")
    rows = []
    for key in sorted(k1):
        d1 = float(phase1[key])
        d2, lo, hi = (float(v) for v in phase2[key])
        lo, hi = min(lo, hi), max(lo, hi)
        rows.append(ConcordanceRow(key[0], key[1], d1, d2, lo, hi, bool(lo <= d1 <= hi), d1 - d2))
    return ConcordanceReport(rows, dict(notes or {}))
