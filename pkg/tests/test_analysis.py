import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dmdbench.analysis import (
    WeightConditionError,
    admissible_lambda,
    build_weights,
    check_chainsum,
    check_lemma1,
    check_max_mgf,
    clopper_pearson,
    constant_b,
    estimate_wanes,
    fit_loglog,
    fit_rate,
    theoretical_gap_bound,
    wanes_from_gaps,
)
from dmdbench.experiment import Experiment, builtin_config
from dmdbench.solver import bregman, default_learning_rate
from oracles import bound_rhs, weights_by_recursion


def _trials(exp, n, T, **attack):
    cfg = builtin_config("diamond") if exp is None else exp.cfg
    if attack:
        cfg = {**cfg, "attack": {**cfg["attack"], **attack}}
    e = Experiment(cfg)
    return e, e.run_trials(range(n), T=T)


def _violations(exp, trajs):
    sol = exp.equilibrium
    bad = 0
    for traj in trajs:
        certs = check_lemma1(traj, sol.flow, exp.mirror.strong_convexity, traj.calendar.budget, exp.oracle.bound)
        bad += sum(not c.passed for c in certs)
    return bad


def test_lemma1_zero_noise():
    exp = Experiment(builtin_config("braess") | {"noise": {"scale": 0.0}})
    trajs = exp.run_trials(range(3), T=200)
    assert not np.any(trajs[0].z)
    assert _violations(exp, trajs) == 0


@pytest.mark.parametrize(
    "attack",
    [dict(strategy="none"), dict(strategy="burst", d=4, start=50, length=20), dict(strategy="uniform-random", d=4)],
)
def test_lemma1_sweeps(attack):
    exp, trajs = _trials(None, 100, 200, **attack)
    assert _violations(exp, trajs) == 0


def test_lemma1_terms_recomputed_by_hand():
    exp, trajs = _trials(None, 1, 60, strategy="constant", d=3)
    traj = trajs[0]
    sol = exp.equilibrium
    s_psi, L, eta = exp.mirror.strong_convexity, exp.oracle.bound, traj.eta
    certs = check_lemma1(traj, sol.flow, s_psi, 3, L)
    for t in (1, 3, 10, 59, 60):
        D = [k for k in range(1, 61) if k + min(3, 60 - k + 1) - 1 == t]
        first = min(D) if D else t
        window = [k for s in range(first, t + 1) for k in range(1, 61) if k + min(3, 60 - k + 1) - 1 == s]
        zm = max((np.linalg.norm(traj.z[r - 1]) for r in window), default=0.0)
        gaps = sum(exp.oracle.potential(traj.mu[k - 1]) - sol.potential for k in D)
        b_next = bregman(exp.mirror, traj.mu[t], sol.flow)
        b_now = bregman(exp.mirror, traj.mu[t - 1], sol.flow)
        lhs = eta * gaps - 2 * eta**2 * 3 * L**2 / s_psi + b_next - b_now
        rhs = sum(eta * traj.z[k - 1] @ (sol.flow - traj.mu[k - 1]) for k in D) + 2 * eta**2 * 3 / s_psi * zm**2
        assert certs[t - 1].lhs == pytest.approx(lhs, rel=1e-9, abs=1e-15)
        assert certs[t - 1].rhs == pytest.approx(rhs, rel=1e-9, abs=1e-15)
        assert certs[t - 1].z_max == pytest.approx(zm)


def test_lemma1_needs_noise_record():
    exp, trajs = _trials(None, 1, 10)
    traj = trajs[0]
    traj.z = None
    with pytest.raises(ValueError, match="noise"):
        check_lemma1(traj, exp.equilibrium.flow, 1.0, 1, 1.0)


def test_lemma1_empty_rounds_are_vacuous():
    exp, trajs = _trials(None, 1, 30, strategy="constant", d=3)
    certs = check_lemma1(trajs[0], exp.equilibrium.flow, exp.mirror.strong_convexity, 3, exp.oracle.bound)
    assert not certs[0].xi and certs[0].passed


@pytest.mark.parametrize("attack", [dict(strategy="none"), dict(strategy="uniform-random", d=5)])
def test_chainsum_sweeps(attack):
    exp, trajs = _trials(None, 100, 100, **attack)
    sol = exp.equilibrium
    for traj in trajs:
        assert all(check_chainsum(traj, sol.flow, exp.mirror.strong_convexity, traj.calendar.budget, exp.oracle.bound))


def test_chainsum_zero_noise():
    exp = Experiment(builtin_config("braess") | {"noise": {"scale": 0.0}})
    traj = exp.run_trials([0], T=100)[0]
    assert all(check_chainsum(traj, exp.equilibrium.flow, exp.mirror.strong_convexity, 1, exp.oracle.bound))


def test_weights_match_recursion_oracle():
    T, d, eta, sigma, s_psi = 50, 2, 0.013, 0.7, 0.5
    ws = build_weights(T, d, eta, sigma, s_psi)
    assert np.allclose(ws.weights, weights_by_recursion(T, d, eta, sigma, s_psi), rtol=1e-14)
    assert ws.ok and ws.monotone


def test_weights_default_rule_cell():
    eta = default_learning_rate(1.0, 1.0, 1.0, 2, 100, 0.05)
    ws = build_weights(100, 2, eta, 1.0, 1.0)
    assert ws.recursion_ok.all() and ws.step_ok.all() and ws.sandwich_ok.all()
    assert ws.require() is ws


def test_weights_reject_inflated_eta():
    eta = default_learning_rate(1.0, 1.0, 1.0, 2, 100, 0.05)
    ws = build_weights(100, 2, 100 * eta, 1.0, 1.0, design_eta=eta)
    assert not ws.step_ok.any()
    assert any("step-size condition fails first at t=1" in v for v in ws.violations)
    with pytest.raises(WeightConditionError, match="t=1"):
        ws.require()


@given(T=st.integers(1, 3000), d=st.integers(1, 16), eta=st.floats(1e-6, 10), sigma=st.floats(0.01, 10), s_psi=st.floats(0.01, 10))
def test_weights_hold_whenever_design_matches(T, d, eta, sigma, s_psi):
    assert build_weights(T, d, eta, sigma, s_psi).ok


def test_gap_bound_plug_in():
    d1, sigma, s_psi, kappa, d, T, delta = 1.0, 1.0, 1.0, 1.0, 1, 10_000, 0.05
    eta = default_learning_rate(d1, sigma, s_psi, d, T, delta)
    gb = theoretical_gap_bound(d1, sigma, s_psi, kappa, d, T, eta, delta)
    expected = bound_rhs(d1, sigma, s_psi, kappa, d, T, eta, delta)
    assert gb.rhs == pytest.approx(expected, rel=1e-12)
    # independently evaluated: eta = 1/sqrt(10^4 (1 + ln 20)), B = 2 + 324*9 = 2918
    eta_hand = 1 / math.sqrt(1e4 * (1 + math.log(20)))
    rhs_hand = 2 + 2 * 2918 * eta_hand**2 * 1e4 + 2 * 648 * eta_hand**2 * 10_001 * math.log(20)
    assert gb.rhs == pytest.approx(rhs_hand, rel=1e-12)
    # 2 + 1460.56 + 971.75 by hand
    assert gb.rhs == pytest.approx(2434.3094, rel=1e-7)
    assert gb.avg_gap_bound == pytest.approx(rhs_hand / (eta_hand * 1e4), rel=1e-12)
    assert gb.avg_gap_bound <= gb.rate_bound
    assert constant_b(1, 1.0) == 2918


def test_gap_bound_scaling_laws():
    args = dict(d1=0.7, sigma=0.4, sigma_psi=1.0, kappa=3.0, eta=0.01, delta=0.05)
    base = theoretical_gap_bound(d=1, T=1000, **args).rate_bound
    assert theoretical_gap_bound(d=1, T=4000, **args).rate_bound == pytest.approx(base / 2)
    assert theoretical_gap_bound(d=4, T=1000, **args).rate_bound == pytest.approx(base * 8)


@given(d=st.integers(1, 16), T=st.integers(10, 10**6), kappa=st.floats(0.1, 100), delta=st.floats(1e-4, 0.5), d1=st.floats(1e-3, 10))
def test_rate_bound_dominates_average_at_default_eta(d, T, kappa, delta, d1):
    sigma, s_psi = 0.3, 0.5
    eta = default_learning_rate(d1, sigma, s_psi, d, T, delta)
    gb = theoretical_gap_bound(d1, sigma, s_psi, kappa, d, T, eta, delta)
    assert gb.avg_gap_bound <= gb.rate_bound * (1 + 1e-9)


def test_gap_bound_rejects():
    with pytest.raises(ValueError):
        theoretical_gap_bound(1, 1, 1, 1, 1, 10, 0.1, 1.0)


def test_clopper_pearson_reference_values():
    lo, hi = clopper_pearson(200, 200)
    assert lo == pytest.approx(0.025 ** (1 / 200), rel=1e-12) and hi == 1.0
    lo, hi = clopper_pearson(0, 10)
    assert lo == 0.0 and hi == pytest.approx(1 - 0.025 ** (1 / 10), rel=1e-12)


def test_wanes_infinite_epsilon():
    est = wanes_from_gaps(np.random.default_rng(0).uniform(0, 1, 150), math.inf, 0.05)
    assert est.probability == 1.0 and est.passed
    assert est.to_dict()["epsilon"] == "inf"


def test_wanes_rejects():
    with pytest.raises(ValueError):
        wanes_from_gaps([0.1], 0.0, 0.05)
    with pytest.raises(ValueError, match="100"):
        estimate_wanes(lambda i: None, 1.0, 0.05, 99)


@given(gaps=st.lists(st.floats(0, 1), min_size=5, max_size=50), e1=st.floats(1e-6, 1), e2=st.floats(1e-6, 1))
def test_wanes_monotone_in_epsilon(gaps, e1, e2):
    lo, hi = sorted((e1, e2))
    assert wanes_from_gaps(gaps, lo, 0.05).successes <= wanes_from_gaps(gaps, hi, 0.05).successes


def test_wanes_theoretical_and_tight(diamond_exp):
    exp = diamond_exp
    T = 2000
    trajs = exp.run_trials(range(200), T=T)
    eta = exp.eta(T)
    theory = theoretical_gap_bound(exp.design_radius, exp.oracle.sigma, exp.mirror.strong_convexity, exp.oracle.kappa, 1, T, eta, 0.05)
    by_index = {i: t for i, t in enumerate(trajs)}
    est = estimate_wanes(by_index.__getitem__, theory.rate_bound, 0.05, 200, theory.rate_bound)
    assert est.probability == 1.0 and est.passed
    gaps = [t.mean_flow_gap for t in trajs]
    tight = wanes_from_gaps(gaps, 0.25 * float(np.median(gaps)), 0.05)
    assert tight.probability < 0.95 and not tight.passed


def test_fit_rate_synthetic_power_law():
    horizons = [256, 512, 1024, 2048, 4096, 8192]
    fit = fit_rate(lambda T: [3.7 * T**-0.5] * 5, horizons)
    assert fit.slope == pytest.approx(-0.5, abs=1e-6)
    assert fit.stderr < 1e-6


def test_fit_rate_rejects():
    with pytest.raises(ValueError, match="grid length"):
        fit_rate(lambda T: [1.0], [256, 512, 1024])
    with pytest.raises(ValueError, match="128"):
        fit_rate(lambda T: [1.0], [64, 256, 512, 1024])
    with pytest.raises(ValueError, match="noise"):
        fit_loglog([1, 2, 3, 4], [1.0, 0.0, 1.0, 1.0])


def test_max_mgf_zero_lambda(asymmetric_oracle):
    rep = check_max_mgf(asymmetric_oracle, 1, [0.0], 10_000, np.random.default_rng(0))
    assert rep.estimates == [1.0] and rep.passed


@pytest.mark.parametrize("d, frac", [(1, 1.0), (8, 0.5)])
def test_max_mgf_passes(asymmetric_oracle, d, frac):
    lam = frac * admissible_lambda(d, asymmetric_oracle.sigma)
    rep = check_max_mgf(asymmetric_oracle, d, [-lam, lam], 10_000, np.random.default_rng(1))
    assert rep.passed


def test_max_mgf_rejects(asymmetric_oracle):
    lam = 1.01 * admissible_lambda(1, asymmetric_oracle.sigma)
    with pytest.raises(ValueError, match="admissible"):
        check_max_mgf(asymmetric_oracle, 1, [lam], 10_000, np.random.default_rng(0))
    with pytest.raises(ValueError):
        check_max_mgf(asymmetric_oracle, 1, [0.0], 100, np.random.default_rng(0))
