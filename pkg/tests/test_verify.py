import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from branching_clt import (
    Configuration,
    FunctionExpansion,
    RegimeError,
    Scenario,
    SimConfig,
    Thresholds,
    functional,
    limit_law_tests,
    run_scenario,
    simulate,
    split,
    stat_critical,
    stat_large,
    stat_large_critical,
    stat_small,
    theorem12_l2_check,
)
from branching_clt.particle import Trajectory, replicate_rng
from branching_clt.verify import histogram_rows

from conftest import se_mean


def eig(model, terms):
    return split(FunctionExpansion.from_coeffs(model.basis, terms))


def single_traj(t, x):
    return Trajectory({float(t): Configuration(t, np.array([[x]]))})


def sim(model, t, ext=0.0, seed=0, x0=0.0):
    times = (t,) if ext == 0 else (t, t + ext)
    return simulate(model, Configuration.single(x0), SimConfig(t + ext, times), replicate_rng(seed, 0))


# -- statistics ------------------------------------------------------------


def test_stat_small_single_particle(small_model):
    f = eig(small_model, {(2, 1): 1.0})
    x = 0.8
    phi1 = small_model.phi1(np.array([[x]]))[0]
    expected = f(np.array([[x]]))[0] / math.sqrt(phi1)
    assert stat_small(single_traj(2.0, x), small_model, f, 2.0) == pytest.approx(expected, rel=1e-14)


def test_stat_small_extinct_is_nan(small_model):
    f = eig(small_model, {(2, 1): 1.0})
    tr = Trajectory({2.0: Configuration(2.0, np.empty((0, 1)))}, extinct=True)
    assert math.isnan(stat_small(tr, small_model, f, 2.0))


def test_stat_critical_at_t1_matches_small_formula(yule):
    f = eig(yule, {(2, 1): 1.0})
    tr = sim(yule, 1.0, seed=3)
    x = tr.at(1.0)
    direct = functional(x, f) / math.sqrt(functional(x, yule.phi1))
    assert stat_critical(tr, yule, f, 1.0) == direct


@settings(max_examples=20, deadline=None)
@given(st.floats(-5, 5).filter(lambda c: abs(c) > 1e-3), st.integers(0, 50))
def test_stat_critical_linear_in_f(c, seed):
    from branching_clt import ModelSpec, OUParams
    yule = ModelSpec(OUParams(1.0, 1.0, 1), 2.0, [0.0, 0.0, 1.0])
    f = eig(yule, {(2, 1): 1.0})
    tr = sim(yule, 1.5, seed=seed)
    base = stat_critical(tr, yule, f, 1.5)
    assert stat_critical(tr, yule, split(f.scaled(c)), 1.5) == pytest.approx(c * base, rel=1e-12, abs=1e-12)


def test_stat_large_zero_extension_phi1(yule):
    f = eig(yule, {(1, 1): 1.0})
    tr = sim(yule, 1.0, seed=4)
    assert stat_large(tr, yule, f, 1.0, 0.0) == pytest.approx(0.0, abs=1e-12)


def test_stat_routing(binary4, small_model):
    crit = eig(binary4, {(2, 1): 1.0, (3, 1): 1.0})
    plain = eig(binary4, {(2, 1): 1.0})
    tr = sim(binary4, 0.5, 0.5, seed=5)
    with pytest.raises(RegimeError, match="stat_large_critical"):
        stat_large(tr, binary4, crit, 0.5, 0.5)
    with pytest.raises(RegimeError, match="stat_large"):
        stat_large_critical(tr, binary4, plain, 0.5, 0.5)
    with pytest.raises(RegimeError):
        stat_small(tr, binary4, plain, 0.5)
    with pytest.raises(RegimeError):
        stat_critical(tr, small_model, eig(small_model, {(2, 1): 1.0}), 0.5)


def test_scenario_regime_checks(small_model, binary4):
    phi1 = eig(small_model, {(1, 1): 1.0})
    with pytest.raises(RegimeError):
        Scenario(small_model, phi1, 2.0, expect="thm1.3")
    sc = Scenario(binary4, eig(binary4, {(2, 1): 1.0}), 2.0)
    assert (sc.regime, sc.theorem, sc.extension) == ("large", "thm2.1", 2.0)
    sc = Scenario(binary4, eig(binary4, {(2, 1): 1.0, (3, 1): 0.5}), 2.0, extension=1.0)
    assert sc.theorem == "thm2.3"
    with pytest.raises(ValueError):
        Scenario(binary4, eig(binary4, {(2, 1): 1.0}), 2.0, extension=0.0)
    assert Scenario(small_model, eig(small_model, {(2, 1): 1.0}), 2.0).extension == 0.0


# -- limit-law tests ---------------------------------------------------------


def test_ks_self_test_gaussian():
    rng = np.random.default_rng(20)
    ps = [limit_law_tests(rng.normal(0, math.sqrt(2.5), 1000), 2.5).ks_p_value for _ in range(200)]
    # p-values are uniform under the null: about 2 of 200 below 0.01
    assert sum(p < 0.01 for p in ps) <= 8
    assert 0.4 < np.mean(ps) < 0.6


def test_ks_rejects_exponential():
    rng = np.random.default_rng(21)
    for _ in range(20):
        rep = limit_law_tests(rng.exponential(1.0, 1000), 1.0)
        assert rep.ks_p_value < 0.01
        assert rep.verdict == "fail"


def test_report_fields_for_gaussian():
    rng = np.random.default_rng(22)
    x = rng.normal(0, 2.0, 4000)
    w = rng.exponential(1.0, 4000)
    rep = limit_law_tests(x, 4.0, w)
    assert rep.verdict == "pass"
    assert abs(rep.empirical_variance - 4.0) < 4 * rep.variance_se
    assert rep.skewness_se == pytest.approx(math.sqrt(6 / 4000), rel=0.01)
    assert rep.excess_kurtosis_se == pytest.approx(math.sqrt(24 / 4000), rel=0.01)
    assert rep.independence_corr_se == pytest.approx(1 / math.sqrt(4000), rel=0.01)


def test_dependence_detected():
    rng = np.random.default_rng(23)
    w = rng.exponential(1.0, 3000)
    x = rng.normal(0, 1, 3000) * np.sqrt(w)
    rep = limit_law_tests(x, 1.0, w)
    assert rep.checks["independence"] is False


def test_underpowered():
    rep = limit_law_tests(np.zeros(50), 1.0)
    assert rep.underpowered and rep.verdict == "underpowered"
    assert math.isnan(rep.ks_p_value)


def test_threshold_selection():
    rng = np.random.default_rng(24)
    x = rng.normal(0, 1, 2000)
    rep = limit_law_tests(x, 4.0, thresholds=Thresholds(checks=("skewness",)))
    assert set(rep.checks) == {"skewness"} and rep.verdict == "pass"


def test_histogram_rows():
    x = np.random.default_rng(25).normal(0, 1, 500)
    rows = histogram_rows(x, 1.0, bins=20)
    assert len(rows) == 20
    assert sum(r[2] for r in rows) == 500
    width = rows[0][1] - rows[0][0]
    assert sum(r[3] for r in rows) * width == pytest.approx(1.0)


# -- ensembles -------------------------------------------------------------


def test_conditioning_reconciles(small_model):
    sc = Scenario(small_model, eig(small_model, {(2, 1): 1.0}), 4.0, n_replicates=300, seed=26)
    rep = run_scenario(sc)
    used = [r for r in rep.samples if r[1] and not r[2]]
    assert rep.n_used == len(used)
    ex = rep.excluded_counts
    assert rep.n_used + ex["extinct"] + ex["capped"] + ex["not_run"] == 300
    assert all(math.isnan(r[4]) for r in rep.samples if not r[1])
    d = rep.to_dict()
    assert "samples" not in d and d["verdict"] == rep.verdict
    assert d["regime"] == "small"


def test_capped_replicates_excluded(small_model):
    sc = Scenario(small_model, eig(small_model, {(2, 1): 1.0}), 4.0, n_replicates=64, seed=27, pop_cap=15)
    rep = run_scenario(sc)
    assert rep.excluded_counts["capped"] > 0
    assert all(not r[1] for r in rep.samples if r[2])


def test_large_centering_unbiased(binary4):
    sc = Scenario(binary4, eig(binary4, {(2, 1): 1.0}), 1.0, extension=1.0, n_replicates=300,
                  x0=(2**-0.5,), seed=28)
    rep = run_scenario(sc)
    x = np.array([r[4] for r in rep.samples if r[1]])
    assert abs(x.mean()) < 4 * se_mean(x)


def test_large_critical_centering_unbiased(binary4):
    # phi_3 vanishes at x0 = 1/sqrt(2), so E <phi_3, X_t> = 0 as well
    sc = Scenario(binary4, eig(binary4, {(2, 1): 1.0, (3, 1): 1.0}), 1.0, extension=0.5,
                  n_replicates=300, x0=(2**-0.5,), seed=29)
    rep = run_scenario(sc)
    assert rep.theorem == "thm2.3"
    x = np.array([r[4] for r in rep.samples if r[1]])
    assert abs(x.mean()) < 4 * se_mean(x)


def test_l2_rejects_non_large(small_model):
    with pytest.raises(RegimeError):
        theorem12_l2_check(small_model, eig(small_model, {(2, 1): 1.0}), [1.0], 10)


def test_l2_zero_at_horizon(binary4):
    rep = theorem12_l2_check(binary4, eig(binary4, {(2, 1): 1.0}), [0.8], 20, extension=0.0, seed=30)
    assert rep.distances[0] == pytest.approx(0.0, abs=1e-12)


def test_l2_phi1_plus_phi2(binary4):
    # gamma = 1: e^{lam_1 t} <1 + phi_2, X_t> approaches W_inf
    f = eig(binary4, {(1, 1): 1.0, (2, 1): 1.0})
    rep = theorem12_l2_check(binary4, f, [0.25, 0.5, 1.0], 300, extension=1.0, seed=31)
    assert rep.monotone and rep.net_decrease
