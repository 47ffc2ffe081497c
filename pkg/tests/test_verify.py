import numpy as np
import pytest

import oracle_series as oracle
from rbmlab.geometry import Ball, Box
from rbmlab.rbm import PathParams
from rbmlab.semigroup import builtin_function
from rbmlab.verify import (
    CheckPoint,
    InequalityReport,
    PowerLawFit,
    analytic_lambda1,
    check_contraction,
    check_gaussian_tail,
    check_gradient_commutation,
    check_local_time_moment,
    check_spectral_decay,
    check_variance_bound,
    fit_gradient_exponent,
    fit_lambda1,
    fit_ondiagonal_exponent,
)


def interval():
    return Box(np.array([0.0]), np.array([1.0]))


def disk():
    return Ball(np.array([0.0, 0.0]), 1.0)


# ---------------------------------------------------------------------------
# report plumbing


def test_power_law_fit_needs_four_points():
    with pytest.raises(ValueError):
        PowerLawFit(
            exponent=-0.5, log_constant=0.0, r_squared=0.99, t_range=(0.01, 0.1), n_points=3
        )


def test_report_all_passed_property():
    pt = CheckPoint(inputs={}, lhs=0.0, rhs=1.0, lhs_stderr=0.0, rhs_stderr=0.0, passed=True)
    rep = InequalityReport(
        test_name="demo", test_points=[pt], violation_count=0, worst_margin=-1.0
    )
    assert rep.all_passed
    rep2 = InequalityReport(
        test_name="demo", test_points=[pt], violation_count=1, worst_margin=0.5
    )
    assert not rep2.all_passed


def test_analytic_lambda1():
    assert analytic_lambda1(interval()) == pytest.approx(np.pi**2)
    slab = Box(np.array([0.0, 0.0]), np.array([1.0, 2.0]))
    assert analytic_lambda1(slab) == pytest.approx(np.pi**2 / 4.0)


# ---------------------------------------------------------------------------
# pathwise contraction


@pytest.mark.parametrize("dom", [interval(), disk()], ids=["interval", "disk"])
def test_contraction_has_no_violations(dom):
    p = PathParams(step_h=1e-3, horizon_T=0.05, n_paths=100, master_seed=5)
    rep = check_contraction(dom, 8, p)
    assert rep.all_passed
    assert rep.violation_count == 0
    assert rep.worst_margin < 0
    assert rep.tolerance == 1e-12
    assert len(rep.test_points) == 8


# ---------------------------------------------------------------------------
# commutation and variance inequalities


def test_gradient_commutation_points():
    dom = interval()
    fs = [builtin_function(dom, n) for n in ("one", "coord0", "cos1_x0")]
    xs = [[0.5], [0.5], [0.3]]
    ts = [0.05, 0.1, 0.1]
    p = PathParams(step_h=1e-3, n_paths=4000, master_seed=11)
    rep = check_gradient_commutation(dom, fs, xs, ts, p)
    assert rep.all_passed
    # constant f: both sides are exactly zero
    pt = rep.test_points[0]
    assert pt.lhs == 0.0 and pt.rhs == 0.0
    # linear f: the right side is exactly |grad f| = 1, the left is damped
    pt = rep.test_points[1]
    assert pt.rhs == pytest.approx(1.0, abs=1e-12)
    assert pt.lhs < 1.0


def test_variance_bound_points():
    dom = interval()
    fs = [builtin_function(dom, n) for n in ("one", "cos1_x0", "cos2_x0")]
    xs = [[0.5], [0.3], [0.3]]
    ts = [0.1, 0.1, 0.05]
    p = PathParams(step_h=1e-3, n_paths=4000, master_seed=12)
    rep = check_variance_bound(dom, fs, xs, ts, p)
    assert rep.all_passed
    assert rep.test_points[0].lhs == 0.0 and rep.test_points[0].rhs == 0.0
    # cos mode 1 at x=0.3, t=0.1: analytic slack is about 0.11
    pt = rep.test_points[1]
    assert pt.rhs - pt.lhs > 0.05


# ---------------------------------------------------------------------------
# power-law fits (smoke level; the tight versions live in the acceptance run)


def test_fit_window_validation():
    p = PathParams(step_h=1e-3, n_paths=10)
    with pytest.raises(ValueError):
        fit_ondiagonal_exponent(interval(), [0.01, 0.02, 0.03, 0.04], p)
    with pytest.raises(ValueError):
        fit_ondiagonal_exponent(interval(), [0.2, 0.3, 0.4, 0.5, 0.6], p)
    with pytest.raises(ValueError):
        fit_gradient_exponent(interval(), [0.01, 0.02, 0.015, 0.03, 0.04], p)


def test_ondiagonal_exponent_near_minus_half():
    p = PathParams(step_h=1e-4, n_paths=20000, master_seed=31)
    t_list = np.geomspace(0.004, 0.04, 5)
    fit = fit_ondiagonal_exponent(interval(), t_list, p, workers=4)
    assert -0.75 < fit.exponent < -0.25
    assert fit.r_squared > 0.9
    assert fit.n_points == 5
    assert fit.t_range == (pytest.approx(0.004), pytest.approx(0.04))


def test_gradient_exponent_near_minus_one():
    p = PathParams(step_h=1e-4, n_paths=20000, master_seed=32)
    t_list = np.geomspace(0.004, 0.04, 5)
    fit = fit_gradient_exponent(interval(), t_list, p, workers=4)
    assert -1.4 < fit.exponent < -0.6
    assert fit.r_squared > 0.9


# ---------------------------------------------------------------------------
# gaussian tail


def tail_pairs(t, q_values, y=0.35):
    out = []
    for q in q_values:
        rho = np.sqrt(q * t)
        out.append((np.array([y + rho]), np.array([y])))
    return out


def test_gaussian_tail_fit():
    t = 0.02
    pairs = tail_pairs(t, np.linspace(2.0, 6.0, 12))
    # one pair below the window: dropped silently, not fitted
    pairs.append((np.array([0.35 + np.sqrt(0.5 * t)]), np.array([0.35])))
    p = PathParams(step_h=2e-4, n_paths=20000, master_seed=101)
    tail = check_gaussian_tail(interval(), t, pairs, p, workers=4)
    assert len(tail.q_values) == 12
    assert tail.fitted_c > 0
    assert tail.passed
    assert all(1.0 <= q <= 10.0 for q in tail.q_values)
    assert len(tail.residuals) == len(tail.noise) == 12


def test_gaussian_tail_needs_enough_pairs():
    t = 0.02
    pairs = tail_pairs(t, [2.0, 3.0, 4.0])
    p = PathParams(step_h=1e-3, n_paths=2000, master_seed=42)
    with pytest.raises(ValueError):
        check_gaussian_tail(interval(), t, pairs, p)


# ---------------------------------------------------------------------------
# local time moments


def test_local_time_moment_grid():
    p = PathParams(step_h=1e-3, n_paths=5000, master_seed=43)
    rep, c_fit = check_local_time_moment(interval(), [0.0, 0.5, 1.0], [0.1, 0.5, 1.0], p)
    assert rep.all_passed
    assert np.isfinite(c_fit) and c_fit > 0
    # sigma = 0 rows are exactly 1 regardless of the paths
    seen = 0
    for pt in rep.test_points:
        if pt.inputs["kind"] == "bound" and pt.inputs["sigma"] == 0.0:
            assert pt.lhs == pytest.approx(1.0, abs=1e-12)
            seen += 1
    assert seen == 3


def test_local_time_moment_validation():
    p = PathParams(step_h=1e-3, n_paths=10)
    with pytest.raises(ValueError):
        check_local_time_moment(interval(), [-0.5], [0.5], p)
    with pytest.raises(ValueError):
        check_local_time_moment(interval(), [1.0], [0.5, 0.2], p)
    with pytest.raises(ValueError):
        check_local_time_moment(interval(), [1.0], [0.5, 2.0], p)


# ---------------------------------------------------------------------------
# spectral decay


def test_fit_lambda1_on_interval():
    dom = interval()
    f = builtin_function(dom, "cos1_x0")
    p = PathParams(step_h=2e-4, n_paths=4000, master_seed=47)
    lam = fit_lambda1(dom, f, p, workers=4)
    assert lam == pytest.approx(np.pi**2, rel=0.12)


def test_fit_lambda1_requires_mean_zero():
    dom = interval()
    with pytest.raises(ValueError):
        fit_lambda1(dom, builtin_function(dom, "bump"), PathParams(step_h=1e-3))


def test_spectral_decay_box():
    dom = interval()
    f = builtin_function(dom, "cos1_x0")
    p = PathParams(step_h=5e-5, n_paths=4000, master_seed=53)
    rep = check_spectral_decay(dom, f, [0.02, 0.05], p, workers=4)
    assert rep.all_passed
    for pt in rep.test_points:
        assert pt.inputs["lambda1"] == pytest.approx(np.pi**2)


def test_spectral_decay_disk_needs_lambda1():
    dom = disk()
    f = builtin_function(dom, "bump0")
    p = PathParams(step_h=1e-3, n_paths=100)
    with pytest.raises(ValueError):
        check_spectral_decay(dom, f, [0.05, 0.1], p)


def test_spectral_decay_disk_with_known_eigenvalue():
    dom = disk()
    f = builtin_function(dom, "bump0")
    p = PathParams(step_h=1e-3, n_paths=2000, master_seed=54)
    lam = oracle.disk_lambda1(1.0)
    rep = check_spectral_decay(dom, f, [0.05, 0.1], p, lambda1=lam, quadrature_cells=10, workers=4)
    assert rep.all_passed
