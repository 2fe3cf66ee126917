"""Desk-scale companions to the long-horizon exit criteria.

Each compares Monte Carlo at a horizon a laptop can reach with a finite-t
oracle computed from the moment formulas, so the targets are exact rather
than asymptotic.
"""

import math

import numpy as np
import pytest

from branching_clt import (
    Configuration,
    FunctionExpansion,
    Scenario,
    SimConfig,
    Thresholds,
    functional,
    mean_Tt,
    predicted_variance,
    remark_phi1_variance,
    rho2_critical,
    run_ensemble,
    run_scenario,
    second_moment,
    theorem12_l2_check,
)

MC_SE = 4.0
MOMENT_SE = 3.0
X_ROOT = 1 / math.sqrt(2)  # phi_3 vanishes here


def coeffs(model, terms):
    return FunctionExpansion.from_coeffs(model.basis, terms)


def mc_second_moment(model, f, t, x0, n, seed):
    sim = SimConfig(t, (t,), rng_seed=seed)
    run = run_ensemble(model, Configuration.single(np.array([x0])), sim, n,
                       lambda rep, tr: functional(tr.final, f) ** 2)
    sq = np.asarray(run.rows, dtype=float)
    return sq.mean(), sq.std(ddof=1) / math.sqrt(sq.size)


@pytest.mark.slow
@pytest.mark.parametrize("which,t,x0,n", [("small", 3.0, 0.5, 3000), ("critical", 3.0, X_ROOT, 3000)])
def test_second_moment_matches_mc(which, t, x0, n, small_model, yule):
    model = small_model if which == "small" else yule
    f = coeffs(model, {(2, 1): 1.0})
    exact = second_moment(model, f, t, np.array([x0])).second_moment
    est, se = mc_second_moment(model, f, t, x0, n, seed=11)
    assert abs(est - exact) <= MOMENT_SE * se


def test_critical_ratio_of_means_approaches_rho2(yule):
    # E<f,X_t>^2 / (t E<phi_1,X_t>) - rho^2 shrinks like 1/t
    f = coeffs(yule, {(2, 1): 1.0})
    phi1 = coeffs(yule, {(1, 1): 1.0})
    rho2 = rho2_critical(yule, f)
    assert rho2 == pytest.approx(4.0, rel=1e-8)
    gaps = []
    for t in (4.0, 8.0, 16.0):
        m2 = second_moment(yule, f, t, np.zeros(1)).second_moment
        gaps.append(abs(m2 / (t * float(mean_Tt(yule, phi1, t, np.zeros(1)))) - rho2))
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] * 16 == pytest.approx(gaps[0] * 4, rel=0.1)


@pytest.mark.slow
def test_large_regime_matches_proxy_variance(binary4):
    sc = Scenario(binary4, coeffs(binary4, {(2, 1): 1.0}), 1.0, 1.0, 1000, x0=(X_ROOT,), seed=3)
    rep = run_scenario(sc, Thresholds(checks=("variance",)))
    assert rep.n_used == 1000
    assert abs(rep.empirical_variance - rep.proxy_variance) <= MC_SE * rep.variance_se


@pytest.mark.slow
def test_phi1_fluctuations_differ_from_displayed_value(binary4):
    # the centred phi_1 statistic has variance (1 - e^{-beta D}) at extension D,
    # tending to A/(-lambda_1) - 1 = 1, not A/(-lambda_1) = 2
    sc = Scenario(binary4, coeffs(binary4, {(1, 1): 1.0}), 1.0, 1.0, 1000, x0=(0.0,), seed=4)
    rep = run_scenario(sc, Thresholds(checks=("variance",)))
    assert rep.proxy_variance == pytest.approx(1 - math.exp(-4.0), rel=1e-6)
    assert abs(rep.empirical_variance - rep.proxy_variance) <= MC_SE * rep.variance_se
    assert abs(rep.empirical_variance - remark_phi1_variance(binary4)) > MC_SE * rep.variance_se


@pytest.mark.slow
def test_l2_distance_decreases(binary4):
    l2 = theorem12_l2_check(binary4, coeffs(binary4, {(2, 1): 1.0}), [0.25, 0.5, 1.0], 500,
                            extension=1.0, seed=5)
    assert l2.monotone
    assert l2.net_decrease


def test_critical_part_variance_invariant_under_other_levels(binary4):
    target = rho2_critical(binary4, coeffs(binary4, {(3, 1): 1.0}))
    for terms in ({(2, 1): 1.0, (3, 1): 1.0},
                  {(1, 1): 1.0, (2, 1): 1.0, (3, 1): 1.0},
                  {(1, 1): -2.0, (3, 1): 1.0}):
        thm, var = predicted_variance(binary4, coeffs(binary4, terms))
        assert thm == "thm2.3"
        assert var == pytest.approx(target, rel=1e-10)
