import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from statsmodels.stats.multitest import multipletests

from speedgov import inference as inf

pvals = st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=12)


@given(pvals)
def test_corrections_match_statsmodels(p):
    res = inf.correct_pvalues(p)
    for ours, method in ((res.bonferroni, "bonferroni"), (res.holm, "holm"), (res.bh, "fdr_bh")):
        ref = multipletests(p, method=method)[1]
        np.testing.assert_allclose(ours, ref, atol=1e-12)


@given(pvals)
def test_correction_orderings(p):
    res = inf.correct_pvalues(p)
    assert all(h <= b + 1e-15 for h, b in zip(res.holm, res.bonferroni))
    assert all(q <= h + 1e-15 for q, h in zip(res.bh, res.holm))
    order = np.argsort(p)
    assert np.all(np.diff(np.asarray(res.bh)[order]) >= -1e-15)


def test_correction_golden_and_errors():
    res = inf.correct_pvalues([0.0, 0.0001, 0.0083], method="holm")
    np.testing.assert_allclose(res.bonferroni, [0, 0.0003, 0.0249], atol=1e-12)
    np.testing.assert_allclose(res.holm, [0, 0.0002, 0.0083], atol=1e-12)
    np.testing.assert_allclose(res.bh, [0, 0.00015, 0.0083], atol=1e-12)
    assert res.adjusted == res.holm and res.family_alpha == pytest.approx(0.05 / 3)
    for bad in ([], [1.2], [math.nan]):
        with pytest.raises(ValueError):
            inf.correct_pvalues(bad)
    with pytest.raises(ValueError):
        inf.correct_pvalues([0.1], method="sidak")


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.01, 0.3), st.floats(0.01, 0.5), st.floats(0, 3))
def test_oster_linear_in_delta(bs, bf, r2s, gap, delta):
    r2f = r2s + gap
    one = inf.oster_bound(bs, bf, r2s, r2f, delta=1.0).beta_star
    d = inf.oster_bound(bs, bf, r2s, r2f, delta=delta).beta_star
    assert d - bf == pytest.approx(delta * (one - bf), abs=1e-9)
    assert inf.oster_bound(bs, bf, r2s, r2f, delta=0.0).beta_star == bf


def test_oster_validation():
    with pytest.raises(ValueError):
        inf.oster_bound(0.1, 0.1, 0.2, 0.2)
    with pytest.raises(ValueError):
        inf.oster_bound(0.1, 0.1, 0.1, 0.2, r2_max=0.15)


def changes_frame(n=20, seed=0, strong=True):
    rng = np.random.default_rng(seed)
    dose = rng.uniform(0.1, 0.7, n)
    delta = -0.1 * dose + (0 if strong else rng.normal(0, 0.05, n))
    return pd.DataFrame({"dose": dose, "delta": delta}, index=pd.Index([f"c{i:02d}" for i in range(n)], name="city_id"))


def test_permutation_floor_on_planted_response():
    res = inf.permutation_test(changes_frame(), n_perm=500, seed=1)
    assert res.p == pytest.approx(1 / 501) and res.n_extreme == 0


def test_permutation_determinism_threads_and_order():
    ch = changes_frame(strong=False)
    a = inf.permutation_test(ch, n_perm=300, seed=7)
    b = inf.permutation_test(ch, n_perm=300, seed=7, n_jobs=4)
    c = inf.permutation_test(ch.sample(frac=1, random_state=3), n_perm=300, seed=7)
    assert a.p == b.p == c.p
    assert 1 / 301 <= a.p <= 1
    with pytest.raises(ValueError):
        inf.permutation_test(ch.iloc[:2])


def test_permutation_matches_manual_loop():
    ch = changes_frame(8, seed=2, strong=False)
    res = inf.permutation_test(ch, n_perm=50, seed=9)
    x, y = ch["dose"].to_numpy(), ch["delta"].to_numpy()
    obs = np.polyfit(x, y, 1)[0]
    hits = 0
    for i in range(50):
        xp = np.random.default_rng([9, i]).permutation(x)
        hits += abs(np.polyfit(xp, y, 1)[0]) >= abs(obs) * (1 - 1e-12)
    assert res.p == (1 + hits) / 51


def test_city_month_changes_and_correlation():
    rows = pd.DataFrame({"city_id": list("aabbccaabbcc"),
                         "month_key": ["2023-11"] * 6 + ["2023-12"] * 6,
                         "tub": [1, 1, 1, 0, 0, 0] + [0] * 6,
                         "harsh_accel": [1, 1, 1, 0, 0, 1] + [0, 1, 0, 0, 0, 0]})
    ch = inf.city_month_changes(rows, "harsh_accel")
    assert ch.loc["a"].tolist() == [-1.0, -0.5]
    assert ch.loc["c"].tolist() == [0.0, -0.5]
    with pytest.raises(ValueError, match="zero variance"):
        inf.dose_response_corr(ch)
    ch.loc["b", "d_outcome"] = 0.0
    out = inf.dose_response_corr(ch)
    assert out["pearson_r"] == pytest.approx(np.corrcoef(ch.d_tub_share, ch.d_outcome)[0, 1])
    with pytest.raises(ValueError):
        inf.dose_response_corr(ch.iloc[:2])


def brute_cohens_d(a, b):
    ma, mb = sum(a) / len(a), sum(b) / len(b)
    ss = sum((x - ma) ** 2 for x in a) + sum((x - mb) ** 2 for x in b)
    return (ma - mb) / math.sqrt(ss / (len(a) + len(b) - 2))


samples = st.lists(st.floats(-10, 10, allow_nan=False), min_size=2, max_size=20)


@settings(max_examples=60)
@given(samples, samples, st.floats(-5, 5), st.floats(0.1, 10))
def test_cohens_d_oracle_and_invariances(a, b, shift, scale):
    a, b = np.array(a), np.array(b)
    if np.var(np.r_[a - a.mean(), b - b.mean()]) < 1e-6:
        return
    d = inf.cohens_d(a, b)
    assert d == pytest.approx(brute_cohens_d(list(a), list(b)), rel=1e-9, abs=1e-12)
    assert inf.cohens_d(a + shift, b + shift) == pytest.approx(d, rel=1e-6, abs=1e-9)
    assert inf.cohens_d(a * scale, b * scale) == pytest.approx(d, rel=1e-9, abs=1e-12)
    assert inf.cohens_d(b, a) == pytest.approx(-d, rel=1e-12, abs=1e-15)


def test_effect_verdict_cutoffs():
    assert [inf.effect_verdict(x) for x in (0.0, 0.19, 0.2, -0.49, 0.5)] == [
        "negligible", "negligible", "small", "small", "medium+"]


def composition_rows():
    rng = np.random.default_rng(4)
    rows = []
    for u in range(60):
        switcher = u < 30
        for m in ("2023-09", "2023-10", "2023-11", "2023-12"):
            pre = m != "2023-12"
            if switcher and pre:
                rows.append({"user_id": f"u{u}", "month_key": m, "tub": 1, "harsh_accel": 1})
            rows.append({"user_id": f"u{u}", "month_key": m, "tub": 0,
                         "harsh_accel": int(rng.random() < (0.3 if pre else 0.25))})
    # a never-TUB rider without post trips and a switcher without pre STD/ECO trips
    rows.append({"user_id": "late", "month_key": "2023-10", "tub": 0, "harsh_accel": 0})
    rows.append({"user_id": "pure", "month_key": "2023-10", "tub": 1, "harsh_accel": 1})
    rows.append({"user_id": "pure", "month_key": "2023-12", "tub": 0, "harsh_accel": 0})
    return pd.DataFrame(rows)


def test_composition_check_against_scipy():
    rows = composition_rows()
    pre = ["2023-09", "2023-10", "2023-11"]
    res = inf.composition_check(rows, "harsh_accel", pre, "2023-12")
    assert (res.n_switchers, res.n_never_tub) == (30, 30)
    gov = rows[rows.tub == 0]
    pre_m = gov[gov.month_key.isin(pre)].groupby("user_id").harsh_accel.mean()
    post_m = gov[gov.month_key == "2023-12"].groupby("user_id").harsh_accel.mean()
    ch = (post_m - pre_m).dropna()
    a = ch[[f"u{u}" for u in range(30)]].to_numpy()
    b = ch[[f"u{u}" for u in range(30, 60)]].to_numpy()
    ref = stats.ttest_ind(a, b, equal_var=False)
    assert res.welch_p == pytest.approx(ref.pvalue, rel=1e-12)
    assert res.welch_df == pytest.approx(ref.df, rel=1e-9)
    assert res.cohens_d == pytest.approx(brute_cohens_d(list(a), list(b)))
    with pytest.raises(ValueError, match="switcher"):
        inf.composition_check(rows[~rows.user_id.isin([f"u{u}" for u in range(30)])], "harsh_accel", pre, "2023-12")


def test_reweight_golden():
    r = inf.reweight_decomposition(-2.81, 0.4, 0.4 * 1.5897, -6.24)
    assert r.ratio == pytest.approx(1.5897)
    assert r.delta_reweighted_pp == pytest.approx(-4.467, abs=1e-3)
    assert r.residual_pp == pytest.approx(-1.773, abs=1e-3)
    assert r.reweighted_share_pct == pytest.approx(71.6, abs=0.05)
    with pytest.raises(ValueError):
        inf.reweight_decomposition(-1, 0, 0.5, -1)


def test_concordance_round_trip_and_keys():
    p1 = {("harsh_accel", "all"): -2.8, ("harsh_decel", "all"): -4.2}
    p2 = {("harsh_accel", "all"): (-6.2, -8.0, -4.4), ("harsh_decel", "all"): (-5.3, -3.0, -7.6)}
    rep = inf.concordance_report(p1, p2, {"harsh_decel": "check"})
    assert [r.inside_ci for r in rep.rows] == [False, True]
    assert rep.rows[1].ci_low_pp == -7.6
    assert inf.ConcordanceReport.from_json(rep.to_json()) == rep
    md = rep.to_markdown()
    assert md.count("\n") == 4 and "harsh_decel (check)" in md
    with pytest.raises(ValueError, match="unmatched"):
        inf.concordance_report(p1, {("harsh_accel", "all"): (0, 0, 0)})
