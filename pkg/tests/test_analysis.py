import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hosgd.analysis import (bound_terms, check_gradient_norm_lower_bound,
                            check_second_moment_bound, check_smoothing_inequalities,
                            random_points, sample_unit_ball, second_moment_bounds,
                            smoothed_grad_gap_mc, smoothed_grad_mc, smoothed_value_mc,
                            theoretical_bound)
from hosgd.core import AssumptionConstants, RunConfig, mu_default
from hosgd.objectives import Constant, Linear, make_quadratic, make_sigmoid_regression

ONE = AssumptionConstants(L=1.0)


@pytest.fixture(scope="module")
def sigmoid():
    return make_sigmoid_regression(10, 200, 0.1, data_seed=3)


# --- ball sampling ---------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(key=st.integers(0, 2**63), d=st.integers(1, 50))
def test_ball_draws_inside(key, d):
    U = sample_unit_ball(key, d, 200)
    assert U.shape == (200, d)
    assert np.all(np.linalg.norm(U, axis=1) <= 1.0)
    assert np.array_equal(sample_unit_ball(key, d, 200), U)


def test_ball_d1_uniform():
    u = sample_unit_ball(0, 1, 100_000)[:, 0]
    assert abs(u.mean()) <= 0.01
    assert u.min() >= -1 and u.max() <= 1
    assert np.mean(u ** 2) == pytest.approx(1 / 3, abs=0.01)


def test_ball_d2_second_moment():
    U = sample_unit_ball(1, 2, 100_000)
    assert np.mean(np.sum(U * U, axis=1)) == pytest.approx(0.5, abs=0.01)


# --- smoothed value and gradient ---------------------------------------------------------

def test_smoothed_value_constant():
    est = smoothed_value_mc(Constant(4, 3.25), np.ones(4), 0.3, 2000, key=0)
    assert est.value_mean == 3.25 and est.std_error == 0.0


def test_smoothed_value_quadratic_closed_form():
    est = smoothed_value_mc(make_quadratic(2), np.array([0.4, -1.2]), 0.1, 100_000, key=1)
    closed = 0.1 ** 2 * 2 / (2 * 4)
    assert closed == pytest.approx(0.0025, rel=1e-15)
    assert abs(est.gap_mean - closed) <= 3 * est.std_error


def test_smoothed_value_linear():
    a = np.array([1.0, -2.0, 0.5])
    x = np.array([0.3, 0.1, -0.7])
    est = smoothed_value_mc(Linear(a), x, 0.5, 10_000, key=2)
    # antithetic pairs cancel the odd term up to rounding
    assert abs(est.value_mean - a @ x) <= 3 * est.std_error + 1e-12


def test_smoothed_value_requires_samples():
    with pytest.raises(ValueError):
        smoothed_value_mc(make_quadratic(2), np.zeros(2), 0.1, 999, key=0)
    with pytest.raises(ValueError):
        smoothed_grad_mc(make_quadratic(2), np.zeros(2), 0.1, 9999, key=0)


def test_smoothed_grad_constant_is_zero():
    est = smoothed_grad_mc(Constant(5, 1.0), np.zeros(5), 0.1, 10_000, key=0)
    assert np.array_equal(est.grad_mean, np.zeros(5))


def test_smoothed_grad_linear():
    a = np.linspace(-1.0, 1.0, 10)
    est = smoothed_grad_mc(Linear(a), np.zeros(10), 0.01, 100_000, key=4)
    assert np.all(np.abs(est.grad_mean - a) <= 3 * est.grad_std_error)
    assert est.std_error == pytest.approx(np.linalg.norm(est.grad_std_error))


def test_smoothed_grad_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    est = smoothed_grad_mc(make_quadratic(3), x, 0.1, 100_000, key=5)
    assert np.all(np.abs(est.grad_mean - x) <= 3 * est.grad_std_error)


def test_gap_estimator_is_exactly_zero_for_linear():
    gap, se = smoothed_grad_gap_mc(Linear([1.0, 2.0, -1.0]), np.ones(3), 0.2, 5000, key=0)
    assert np.allclose(gap, 0.0, atol=1e-12)


# --- inequality checks ---------------------------------------------------------------------

def test_smoothing_example_quadratic_d2():
    rep = check_smoothing_inequalities(make_quadratic(2), 0.1, ONE, 5, key=0, n_samples=20_000)
    assert rep.passed
    for row in rep.rows:
        assert row["value_gap"] == pytest.approx(0.0025, rel=0.05)
        # quadratic smoothing leaves the gradient unchanged
        assert row["grad_gap"] <= 1e-12


@pytest.mark.parametrize("mu", [0.2, 0.1, 0.05, 0.01])
def test_smoothing_inequalities_quadratic_50_points(mu):
    rep = check_smoothing_inequalities(make_quadratic(10, 1.0), mu, ONE, 50, key=3, n_samples=2000)
    assert rep.passed, rep.witness


def test_smoothing_check_reports_violation():
    # a deliberately wrong L makes the value bound false
    rep = check_smoothing_inequalities(make_quadratic(3, 1.0), 0.2, AssumptionConstants(L=0.01),
                                       3, key=0, n_samples=4000)
    assert not rep.passed
    assert rep.witness is not None and "x" in rep.witness
    assert "failed" in rep.note
    json.dumps(rep.to_dict())


def test_smoothing_gaps_shrink_on_sigmoid():
    obj = make_sigmoid_regression(10, 200, 0.1, data_seed=3)
    points = random_points(9, 5, 10, scale=2 / math.sqrt(10))
    for p, x in enumerate(points):
        vals, grads = [], []
        for mu in (0.2, 0.1, 0.05):
            # common draws across mu so the ratios are not swamped by noise
            vals.append(abs(smoothed_value_mc(obj, x, mu, 100_000, key=40 + p).gap_mean))
            grads.append(np.linalg.norm(smoothed_grad_gap_mc(obj, x, mu, 100_000, key=40 + p)[0]))
        for a, b in zip(vals, vals[1:]):
            assert a / b >= 3.8          # quadratic in mu: ideal ratio 4
        for a, b in zip(grads, grads[1:]):
            assert a / b >= 2.0          # at least linear in mu


def test_second_moment_bounds_formula():
    c = AssumptionConstants(L=2.0, sigma=3.0)
    fo, zo = second_moment_bounds(5.0, d=7, B=2, m=3, mu=0.1, constants=c)
    assert fo == pytest.approx(5.0 + 9.0 / 6)
    assert zo == pytest.approx(2 * 12 / 6 * 5.0 + 2 * 7 * 9 / 6 + 0.01 * 4 * 49 / 2)


def test_second_moment_deterministic_fo_is_tight():
    x = np.array([1.0, 2.0, -1.0])
    rep = check_second_moment_bound(make_quadratic(3), x, 0.01, 1, 1, ONE, 1000, key=0)
    fo = rep.rows[0]
    assert fo["case"] == "fo"
    assert fo["mean_sq_norm"] == pytest.approx(6.0, rel=1e-14) and fo["bound"] == 6.0
    assert rep.passed


def test_second_moment_linear_zo():
    d = 6
    a = np.arange(1.0, d + 1)
    rep = check_second_moment_bound(Linear(a), np.zeros(d), 0.01, 1, 1, ONE, 20_000, key=1)
    zo = rep.rows[1]
    # E[d^2 (a.v)^2] = d ||a||^2
    assert abs(zo["mean_sq_norm"] - d * (a @ a)) <= 3 * zo["std_error"]
    assert rep.passed


def test_second_moment_sigmoid(sigmoid):
    pts = random_points(5, 3, 10, scale=2 / math.sqrt(10))
    sigma2 = max(sigmoid.gradient_variance(x) for x in pts)
    c = AssumptionConstants(L=sigmoid.L_estimate, sigma=math.sqrt(sigma2))
    for j, x in enumerate(pts):
        rep = check_second_moment_bound(sigmoid, x, 1e-3, 4, 2, c, 2000, key=10 + j)
        assert rep.passed, rep.witness


def test_gradient_norm_lower_bound(sigmoid):
    c = AssumptionConstants(L=sigmoid.L_estimate)
    for j, x in enumerate(random_points(2, 5, 10)):
        assert check_gradient_norm_lower_bound(sigmoid, x, 0.05, c, 20_000, key=j).passed


# --- bound ------------------------------------------------------------------------------------

def _bound_cfg(**kw):
    base = dict(d=10, m=1, B=1, tau=1, mu=1e-3, N=100)
    base.update(kw)
    return RunConfig(**base)


def test_bound_tau_one_examples():
    rep = theoretical_bound(_bound_cfg(), AssumptionConstants(L=1.0, sigma=0.0, f_star=0.0), 1.0)
    assert rep.rhs_total == pytest.approx(0.4, rel=1e-15)
    assert len(rep.term_breakdown) == 2
    rep = theoretical_bound(_bound_cfg(), AssumptionConstants(L=1.0, sigma=1.0, f_star=0.0), 1.0)
    assert rep.rhs_total == pytest.approx(0.6, rel=1e-15)


@settings(max_examples=100, deadline=None)
@given(L=st.floats(1e-3, 1e3), sigma=st.floats(0, 10), gap=st.floats(0, 100),
       d=st.integers(1, 1000), B=st.integers(1, 16), m=st.integers(1, 16),
       N=st.integers(1, 10**6), tau=st.integers(2, 64))
def test_bound_terms_nonnegative_and_gated(L, sigma, gap, d, B, m, N, tau):
    one = bound_terms(L, sigma, gap, d, B, m, N, 1)
    many = bound_terms(L, sigma, gap, d, B, m, N, tau)
    assert len(one) == 2 and len(many) == 10
    assert all(v >= 0 for _, v in many)
    r = math.sqrt(B * m * N)
    assert math.isclose(math.fsum(v for _, v in one), 4 * L * gap / r + 2 * sigma ** 2 / r,
                        rel_tol=1e-12, abs_tol=1e-300)
    assert math.fsum(v for _, v in many) > math.fsum(v for _, v in one) * (1 - 1e-15) + 0.0
    assert dict(many)["zo_dL2_period"] == dict(many)["zo_dL2_period_b"]


def test_bound_tau_gt_one_is_larger():
    c = AssumptionConstants(L=1.0, sigma=1.0)
    one = theoretical_bound(_bound_cfg(), c, 1.0).rhs_total
    eight = theoretical_bound(_bound_cfg(tau=8), c, 1.0).rhs_total
    assert eight > one


def test_bound_term_values_by_hand():
    terms = dict(bound_terms(L=2.0, sigma=3.0, f_gap=5.0, d=4, B=1, m=1, N=100, tau=4))
    r = 10.0
    assert terms["fo_initial_gap"] == pytest.approx(4 * 2 * 5 / r)
    assert terms["fo_variance"] == pytest.approx(2 * 9 / (r * 4))
    assert terms["zo_L2_over_d_tau"] == pytest.approx(4 * 4 / (4 * r * 4))
    assert terms["zo_L2_over_dN"] == pytest.approx(4 * 4 / (4 * 100 * r))
    assert terms["zo_dL2_period"] == pytest.approx(4 * 4 / r * 0.75)
    assert terms["zo_dL2_over_N_tau"] == pytest.approx(4 * 4 / (100 * r * 4))
    assert terms["zo_d_variance_period"] == pytest.approx(4 * 4 * 9 / r * 0.75)
    assert terms["zo_d_variance_over_N_tau"] == pytest.approx(4 * 4 * 9 / (100 * r * 4))


def test_bound_preconditions():
    c = AssumptionConstants(L=1.0, sigma=0.0)
    N = 1601
    ok = theoretical_bound(_bound_cfg(N=N, mu=mu_default(10, N), step_schedule="theorem_default"), c, 1.0)
    assert ok.preconditions_met == (True, True, True)
    assert ok.N_min == 1601 and ok.step_size == pytest.approx(1 / math.sqrt(N))
    rep = theoretical_bound(_bound_cfg(N=100, mu=1.0, step_schedule=0.5), c, 1.0)
    assert rep.preconditions_met == (False, False, False)


def test_bound_report_json_roundtrip():
    rep = theoretical_bound(_bound_cfg(tau=3), AssumptionConstants(L=1.0, sigma=0.5), 2.0)
    data = json.loads(json.dumps(rep.to_dict()))
    assert [t["name"] for t in data["terms"]] == [n for n, _ in rep.term_breakdown]
    assert math.isclose(data["rhs_total"], math.fsum(t["value"] for t in data["terms"]))
    assert set(data["preconditions_met"]) == {"step_size", "mu", "N"}


def test_bound_rejects_bad_arguments():
    with pytest.raises(ValueError):
        bound_terms(0.0, 1.0, 1.0, 2, 1, 1, 10, 1)
    with pytest.raises(ValueError):
        AssumptionConstants(L=-1.0)
