import json
import math

import numpy as np
import pytest
from scipy import stats

from nptl.diagnostics import (
    CovarianceReport,
    TwoSampleReport,
    blocked_vs_nonblocked_test,
    energy_permutation_test,
    ks_permutation_test,
    ks_trend,
    sandwich_check,
    vn_bound_check,
    weighted_mean_draws,
    weighted_mean_moments,
    write_reports,
)


# ---------------------------------------------------------------- moment oracle

def test_moments_alpha_zero_is_sample_mean(rng):
    x = rng.standard_normal(50)
    m, v = weighted_mean_moments(x, rng.standard_normal(50), 0.0)
    assert abs(m - math.fsum(x) / 50) <= math.ulp(m)
    assert v == pytest.approx(np.var(x) / 51, rel=1e-12)


@pytest.mark.parametrize("blocked", [False, True])
def test_moments_constant(blocked):
    assert weighted_mean_moments(np.full(20, 1.7), np.full(20, 1.7), 3.0, blocked, 5) == (1.7, 0.0)


def test_moments_reject(rng):
    x = rng.standard_normal(10)
    with pytest.raises(ValueError):
        weighted_mean_moments(x, x, -1.0)
    with pytest.raises(ValueError):
        weighted_mean_moments(x, x[:5], 1.0)
    with pytest.raises(ValueError):
        weighted_mean_moments(x, x, 1.0, blocked=True, L=3)
    with pytest.raises(ValueError):
        weighted_mean_moments([], [], 1.0)


@pytest.mark.parametrize("L", [None, 10])
def test_moments_match_monte_carlo(rng, L):
    n, alpha, total, chunk = 200, 1.0, 10**5, 10**4
    x = rng.standard_normal(n)
    xt = 0.5 + rng.standard_normal(n)
    z = np.concatenate([x, xt])
    vals = np.concatenate([weighted_mean_draws(z, n, alpha, chunk, rng, L=L) for _ in range(total // chunk)])
    mean, var = weighted_mean_moments(x, xt, alpha, blocked=L is not None, L=L)
    assert abs(vals.mean() - mean) <= 4 * math.sqrt(var / total)
    c = vals - vals.mean()
    se_var = math.sqrt((np.mean(c**4) - np.mean(c**2) ** 2) / total)
    assert abs(vals.var() - var) <= 4 * se_var


def test_blocked_variance_differs_from_nonblocked(rng):
    # the oracle is not trivially the same law: blocking changes the spread
    x = rng.standard_normal(200)
    xt = rng.standard_normal(200)
    vb = weighted_mean_moments(x, xt, 1.0, blocked=True, L=10)[1]
    vn = weighted_mean_moments(x, xt, 1.0)[1]
    assert vb < vn


# ---------------------------------------------------------------- permutation tests

def test_ks_statistic_matches_scipy(rng):
    a = rng.standard_normal(300)
    b = rng.standard_normal(200) + 0.2
    stat, p = ks_permutation_test(a, b, 0, rng)
    assert stat == pytest.approx(stats.ks_2samp(a, b).statistic, abs=1e-12) and p == 1.0


def test_ks_detects_shift(rng):
    _, p = ks_permutation_test(rng.standard_normal(500), rng.standard_normal(500) + 0.5, 200, rng)
    assert p == pytest.approx(1 / 201)


def test_energy_detects_shift_and_accepts_null(rng):
    X = rng.standard_normal((300, 3))
    _, p_null = energy_permutation_test(X, rng.standard_normal((300, 3)), 200, rng)
    _, p_alt = energy_permutation_test(X, rng.standard_normal((300, 3)) + 0.4, 200, rng)
    assert p_null > 0.01 and p_alt < 0.01


def test_energy_matches_direct_formula(rng):
    X, Y = rng.standard_normal((40, 2)), rng.standard_normal((30, 2)) + 1
    from scipy.spatial.distance import cdist
    direct = 2 * cdist(X, Y).mean() - cdist(X, X).mean() - cdist(Y, Y).mean()
    stat, _ = energy_permutation_test(X, Y, 0, rng, block=7)
    assert stat == pytest.approx(direct, rel=1e-10)


def test_blocked_L_equal_n_not_rejected():
    for r in blocked_vs_nonblocked_test(40, 40, 1.0, 2000, seed=1, permutations=500):
        assert r.p_value > 0.01
        assert r.config["functional"] in ("tanh", "step", "cos") and r.config["L"] == 40


def test_blocked_constant_functional_ks_zero():
    r = blocked_vs_nonblocked_test(50, 10, 1.0, 1000, functionals={"const": lambda z: np.full_like(z, 0.3)},
                                   permutations=50)[0]
    assert r.value == 0.0 and r.p_value == 1.0


def test_blocked_test_fixed_t_regime():
    r = blocked_vs_nonblocked_test(50, 50, 2.0, 2000, regime="fixed-T", T=30, seed=2, permutations=300)
    assert all(x.p_value > 0.01 for x in r)
    assert r[0].config["T"] == 30 and r[0].config["regime"] == "fixed-T"


@pytest.mark.parametrize("kw", [dict(draws=999), dict(L=0), dict(L=60), dict(alpha=-1.0),
                                dict(regime="other"), dict(regime="fixed-T", L=7)])
def test_blocked_test_rejects(kw):
    args = dict(n=50, L=10, alpha=1.0, draws=1000)
    args.update(kw)
    with pytest.raises(ValueError):
        blocked_vs_nonblocked_test(**args, permutations=10)


def test_permutation_p_values_valid():
    # identical laws (L = n): level-0.01 rejections over 100 trials
    rejections = 0
    for seed in range(100):
        r = blocked_vs_nonblocked_test(20, 20, 1.0, 1000, functionals={"tanh": np.tanh}, seed=seed,
                                       permutations=199)[0]
        rejections += r.p_value <= 0.01
    print(f"rejection rate {rejections}/100")
    assert rejections <= 5


def test_trend_structure():
    out = ks_trend([20, 40], 5, 1.0, 1000, 2, seed=3)
    assert np.array(out["statistics"]).shape == (2, 2)
    assert 0 <= out["decreasing"] <= 2 and out["regime"] == "implemented"
    assert out == ks_trend([20, 40], 5, 1.0, 1000, 2, seed=3, workers=2)


# ---------------------------------------------------------------- V_n

def test_vn_alpha_zero():
    r = vn_bound_check(100, None, 10, 0.0, 10**4)
    assert r.mean == 0.0 and r.se == 0.0 and r.passed


def test_vn_bound_n100():
    r = vn_bound_check(100, None, 50, 1.0, 10**5, seed=1)
    assert r.passed and r.bound == 0.01
    assert r.ci[0] <= r.mean <= r.ci[1]


def test_vn_doubling_ordering():
    ok = 0
    for rep in range(10):
        a = vn_bound_check(100, None, 50, 1.0, 10**4, seed=2 * rep)
        b = vn_bound_check(200, None, 50, 1.0, 10**4, seed=2 * rep + 1)
        assert b.bound == a.bound / 2
        ok += b.mean < a.mean
    assert ok >= 9


def test_vn_rejects():
    with pytest.raises(ValueError):
        vn_bound_check(100, None, 10, 1.0, 9999)
    with pytest.raises(ValueError):
        vn_bound_check(100, 200, 10, 1.0, 10**4)


# ---------------------------------------------------------------- sandwich

def test_sandwich_well_specified_agree():
    r = sandwich_check(2000, 2000, seed=0, heteroscedastic=False)
    dev = r.slope_deviations()
    assert max(dev.values()) < 0.15


def test_sandwich_misspecified_closer():
    r = sandwich_check(2000, 2000, seed=0, heteroscedastic=True)
    dev = r.slope_deviations()
    assert dev["npl_vs_sandwich"] < dev["npl_vs_parametric"]
    assert r.npl_vs_sandwich < r.npl_vs_parametric


def test_sandwich_variance_scales_with_n():
    small = sandwich_check(2000, 2000, seed=4, heteroscedastic=True).npl[1, 1]
    large = sandwich_check(4000, 2000, seed=4, heteroscedastic=True).npl[1, 1]
    assert 0.8 * 2 <= small / large <= 1.2 * 2


def test_sandwich_rejects():
    with pytest.raises(ValueError):
        sandwich_check(2, 100)
    with pytest.raises(ValueError):
        sandwich_check(100, 1)


def test_covariance_report_invariants():
    good = np.eye(2)
    with pytest.raises(ValueError):
        CovarianceReport(np.array([[1.0, 0.5], [0.0, 1.0]]), good, good)
    with pytest.raises(ValueError):
        CovarianceReport(np.diag([1.0, -1.0]), good, good)


def test_two_sample_report_invariants():
    with pytest.raises(ValueError):
        TwoSampleReport("ks", 0.1, 1.5, (100, 100))
    with pytest.raises(ValueError):
        TwoSampleReport("ks", 0.1, 0.5, (99, 100))


def test_write_reports(tmp_path):
    reports = blocked_vs_nonblocked_test(20, 5, 1.0, 1000, permutations=20)
    reports.append(vn_bound_check(50, None, 10, 1.0, 10**4))
    jpath, cpath = write_reports(reports, tmp_path / "diag", "run")
    doc = json.loads(jpath.read_text())
    assert doc["format"] == "nptl-diagnostics/1" and len(doc["reports"]) == 4
    assert doc["reports"][0]["config"]["seed"] == 0
    lines = cpath.read_text().splitlines()
    assert len(lines) == 5 and "config.n" in lines[0].split(",")
