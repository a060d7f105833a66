import math

import numpy as np
import pandas as pd
import pytest
import statsmodels.api as sm

from speedgov import rp_logit as rl
from speedgov.quasirandom import HaltonPlan
from speedgov.synth_dgp import LogitDgpConfig, generate_logit_panel


def toy_data(X, y, tub, eco, users):
    users = np.asarray(users)
    _, codes = np.unique(users, return_inverse=True)
    assert np.all(np.diff(codes) >= 0)
    counts = np.bincount(codes)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    names = [f"x{j}" for j in range(X.shape[1])]
    return rl.LogitData(np.ascontiguousarray(X, dtype=float), np.asarray(y, float), np.asarray(tub, float),
                        np.asarray(eco, float), offsets, np.unique(users), np.arange(len(y)),
                        rl.Layout(names, {}))


def brute_loglik(theta, X, y, tub, eco, users, draws):
    """Enumerate users and draws directly in plain Python."""
    k = X.shape[1]
    beta, s1, s2 = theta[:k], theta[k], theta[k + 1]
    ids = sorted(set(users))
    total = 0.0
    for i, u in enumerate(ids):
        rows = [t for t in range(len(y)) if users[t] == u]
        avg = 0.0
        for r in range(draws.shape[1]):
            prod = 1.0
            for t in rows:
                idx = sum(X[t, j] * beta[j] for j in range(k))
                idx += s1 * draws[i, r, 0] * tub[t] + s2 * draws[i, r, 1] * eco[t]
                p = 1.0 / (1.0 + math.exp(-idx))
                prod *= p if y[t] == 1 else 1.0 - p
            avg += prod
        total += math.log(avg / draws.shape[1])
    return total


def toy():
    users = ["a", "a", "b", "b", "c", "c"]
    tub = np.array([1, 0, 1, 1, 0, 0])
    eco = np.array([0, 1, 0, 0, 1, 0])
    X = np.column_stack([np.ones(6), tub, eco, [0.2, -0.4, 1.0, 0.0, 0.5, -1.0]])
    y = np.array([1, 0, 0, 1, 1, 0])
    draws = np.array([[[0.3, -1.2], [-0.7, 0.4]], [[1.5, 0.1], [-0.2, -0.9]], [[0.0, 2.0], [0.8, -0.3]]])
    return X, y, tub, eco, users, draws


def test_three_user_hand_enumeration():
    X, y, tub, eco, users, draws = toy()
    data = toy_data(X, y, tub, eco, users)
    sim = rl.SimulatedLikelihood(data, draws)
    for theta in ([-0.3, 0.5, -0.8, 0.25, 0.9, 0.4], [0.1, -1.0, 0.3, -0.5, -1.7, 0.0]):
        theta = np.array(theta)
        assert sim.loglik(theta) == pytest.approx(brute_loglik(theta, X, y, tub, eco, users, draws), abs=1e-12)


def test_zero_spread_is_plain_logit():
    X, y, tub, eco, users, draws = toy()
    sim = rl.SimulatedLikelihood(toy_data(X, y, tub, eco, users), draws)
    beta = np.array([0.2, -0.6, 0.4, 1.1])
    u = X @ beta
    plain = float(np.sum(y * u - np.logaddexp(0, u)))
    assert sim.loglik(np.r_[beta, 0.0, 0.0]) == pytest.approx(plain, abs=1e-12)
    # a single zero draw also collapses to the plain logit at any spread
    zero = np.zeros((3, 1, 2))
    sim0 = rl.SimulatedLikelihood(toy_data(X, y, tub, eco, users), np.concatenate([zero, zero], axis=1))
    assert sim0.loglik(np.r_[beta, 3.0, -2.0]) == pytest.approx(plain, abs=1e-12)


@pytest.fixture(scope="module")
def logit_panel():
    panel, truth = generate_logit_panel(LogitDgpConfig(n_users=2000, seed=3))
    return panel, truth


SMALL_SPEC = rl.RpLogitSpec(plan=HaltonPlan(n_draws=30))


def test_gradient_matches_finite_differences(logit_panel):
    panel, _ = logit_panel
    data = rl.build_design(SMALL_SPEC, panel.iloc[:600])
    draws = rl.normal_draws_for_users(SMALL_SPEC.plan, data.n_users)
    sim = rl.SimulatedLikelihood(data, draws)
    rng = np.random.default_rng(0)
    k = data.X.shape[1] + 2
    for _ in range(10):
        theta = rng.normal(0, 0.3, k)
        _, g = sim.loglik_and_grad(theta)
        fd = np.empty(k)
        for j in range(k):
            h = 1e-6
            tp, tm = theta.copy(), theta.copy()
            tp[j] += h
            tm[j] -= h
            fd[j] = (sim.loglik(tp) - sim.loglik(tm)) / (2 * h)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-5)


def test_user_order_invariance(logit_panel):
    panel, _ = logit_panel
    sub = panel.iloc[:800]
    shuffled = sub.sample(frac=1.0, random_state=4)
    d1 = rl.build_design(SMALL_SPEC, sub)
    d2 = rl.build_design(SMALL_SPEC, shuffled, layout=d1.layout)
    theta = np.random.default_rng(1).normal(0, 0.2, d1.X.shape[1] + 2)
    draws = rl.normal_draws_for_users(SMALL_SPEC.plan, d1.n_users)
    a = rl.SimulatedLikelihood(d1, draws).loglik(theta)
    b = rl.SimulatedLikelihood(d2, draws).loglik(theta)
    assert a == pytest.approx(b, rel=1e-12)


def test_fixed_spread_matches_statsmodels(logit_panel):
    panel, _ = logit_panel
    fit = rl.fit(SMALL_SPEC, panel, fix_sigma=True)
    data = rl.build_design(SMALL_SPEC, panel)
    ref = sm.Logit(data.y, data.X).fit(disp=0, method="newton", tol=1e-12, maxiter=100)
    kf = data.X.shape[1]
    np.testing.assert_allclose(fit.estimates[:kf], ref.params, atol=1e-6)
    assert fit.loglik == pytest.approx(ref.llf, abs=1e-6)
    np.testing.assert_allclose(fit.se[:kf], ref.bse, rtol=1e-3)
    assert np.isnan(fit.se[kf:]).all() and fit.k == kf


@pytest.fixture(scope="module")
def free_fit(logit_panel):
    panel, _ = logit_panel
    return rl.fit(SMALL_SPEC, panel)


def test_free_fit_reports(free_fit, tmp_path):
    f = free_fit
    assert f.converged and f.grad_max < 1e-5
    assert all(b >= a - 1e-9 for a, b in zip(f.trace, f.trace[1:]))
    assert f.aic == pytest.approx(2 * f.k - 2 * f.loglik)
    assert f.bic == pytest.approx(f.k * math.log(f.n_trips) - 2 * f.loglik)
    assert f.pseudo_r2 == pytest.approx(1 - f.loglik / (f.n_trips * math.log(0.5)))
    assert (f.estimates[-2:] >= 0).all()
    f.save(tmp_path / "fit.json")
    back = rl.RpLogitFit.load(tmp_path / "fit.json")
    assert back.to_dict() == f.to_dict()


def test_stability_identity_and_golden(free_fit):
    same = rl.stability_test(free_fit, free_fit)
    assert all(v["z"] == 0 and v["verdict"] == "stable" for v in same.values() if "z" in v)
    res = rl.stability_test({"sigma_tub": (0.783, 0.027)}, {"sigma_tub": (0.785, 0.024)})
    assert res["sigma_tub"]["z"] == pytest.approx(-0.002 / math.hypot(0.027, 0.024))
    assert rl.stability_test({"a": (1.0, math.nan)}, {"a": (1.0, 0.1)})["a"] == {"note": "standard error unavailable"}


def test_counterfactual_without_tub_is_zero(free_fit, logit_panel):
    panel, _ = logit_panel
    no_tub = panel[panel.tub == 0]
    cf = rl.counterfactual_delta(free_fit, no_tub)
    assert cf["n_tub_trips"] == 0 and cf["delta_pp"] == 0.0


def test_counterfactual_hand_toy():
    panel = pd.DataFrame({"user_id": ["a", "a", "b"], "tub": [1, 0, 1], "eco": [0, 1, 0],
                          "night": [0, 1, 1], "harsh_accel": [1, 0, 1]})
    spec = rl.RpLogitSpec(controls=("night",), mundlak=(), interactions=(("tub", "night"),), fixed_effects=(),
                          plan=HaltonPlan(n_draws=4))
    data = rl.build_design(spec, panel)
    assert data.layout.names == ["const", "mu_tub", "mu_eco", "tub_x_night", "night"]
    theta = np.array([-0.5, 1.0, -0.2, 0.4, 0.3, 0.0, 0.0])
    fit = rl.RpLogitFit(names=data.layout.names + list(rl.SIGMA_NAMES), estimates=theta, se=np.ones(7), cov=None,
                        loglik=0.0, n_trips=3, n_users=2, converged=True, iterations=0, message="", grad_max=0.0,
                        layout=data.layout, settings={"n_draws": 4, "halton_skip": spec.plan.skip,
                                                      "interactions": [["tub", "night"]], "controls": ["night"],
                                                      "mundlak": [], "fixed_effects": []},
                        outcome="harsh_accel", outcome_mean=2 / 3, raw_theta=theta)
    lam = lambda x: 1 / (1 + math.exp(-x))  # noqa: E731
    asis = [lam(-0.5 + 1.0), lam(-0.5 - 0.2 + 0.3), lam(-0.5 + 1.0 + 0.4 + 0.3)]
    cf = [lam(-0.5), lam(-0.5 - 0.2 + 0.3), lam(-0.5 + 0.3)]
    out = rl.counterfactual_delta(fit, panel)
    assert out["p_asis"] == pytest.approx(sum(asis) / 3, abs=1e-14)
    assert out["delta_pp"] == pytest.approx(100 * (sum(cf) - sum(asis)) / 3, abs=1e-12)


def test_errors():
    panel = pd.DataFrame({"user_id": ["a", "b"], "tub": [0, 0], "eco": [0, 1], "night": [0, 1], "harsh_accel": [1, 0]})
    spec = rl.RpLogitSpec(controls=("night",), mundlak=(), interactions=(), fixed_effects=())
    with pytest.raises(ValueError, match="without variation"):
        rl.fit(spec, panel)
    with pytest.raises(ValueError):
        rl.SimulatedLikelihood(toy_data(*toy()[:5]), np.zeros((2, 3, 2)))


def test_information_criteria_helpers():
    assert rl.aic(-13659, 78) == 27474
    assert rl.bic(-13659, 78, 35602) == pytest.approx(28135.452, abs=1e-3)
    # the printed log-likelihood is rounded; a value inside its rounding interval reproduces all printed fits
    ll = -13659.1
    assert (round(rl.aic(ll, 78)), round(rl.bic(ll, 78, 35602))) == (27474, 28136)
    assert rl.mcfadden_r2(-13659, 35602) == pytest.approx(0.4465, abs=1e-4)
