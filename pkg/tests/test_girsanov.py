import json
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from jumpsupport import coefficients as cf
from jumpsupport.errors import ConfigurationError, ModelError, QuadratureWarning
from jumpsupport.girsanov import (
    DensityRecord,
    EvolutionScenario,
    ScalarField,
    accumulate_log_density,
    check_consistency,
    gap_ensemble,
    ito_gap_ensemble,
    keystone_sigma,
    martingale_check,
    path_independence_gap,
    pide_residual,
    pide_terms,
)
from jumpsupport.jump_sde import InitialLaw, TimeGrid, draw_noise, solve_strong
from jumpsupport.random_measures import DiscreteLevyMeasure, Region, UniformBoxLevyMeasure

from builders import INV_E, KEYSTONE_SIGMA, empty_measure, keystone, point_mass, sine_consistent


def zero_rho(x):
    return np.zeros(np.shape(x))


def simple_scenario(rho=zero_rho, lam=0.5, mass=2.0, sigma=1.0, horizon=1.0, step=2.0 ** -6, nu=None):
    nu = nu if nu is not None else DiscreteLevyMeasure([0.5], [mass])
    return EvolutionScenario(1, cf.zero_drift(1), cf.constant_diffusion([[sigma]]), cf.additive_jump([[1.0]]),
                             nu, cf.constant_tilt(lam), rho, InitialLaw.dirac([0.0]), horizon, step,
                             jump_state_independent=True)


def one_path(scen, seed=1, sid=0):
    problem = scen.problem()
    noise = problem.noise(seed, sid)
    path = solve_strong(problem.coeffs, noise, scen.initial.mean)
    return noise, path, accumulate_log_density(path, noise, scen.rho, scen.lambda_fn, scen.intensity)


# --- scalar fields


def test_builtin_fields_pass_derivative_check():
    pts = np.linspace(-2, 2, 7)[:, None] * np.ones(2)
    ScalarField.quadratic([[2.0, 0.5], [0.5, 1.0]], [1.0, -1.0]).check_derivatives(pts)
    ScalarField.linear([1.0, 2.0]).check_derivatives(pts)


def test_wrong_gradient_rejected():
    good = ScalarField.quadratic([[1.0]])
    bad = ScalarField(good.value, lambda x: 2 * np.asarray(x), good.hessian, 1, "bad")
    with pytest.raises(ModelError, match="gradient"):
        bad.check_derivatives([[1.0]])


# --- log density


def test_log_density_is_signed_term_sum():
    _, _, rec = one_path(simple_scenario(rho=cf.constant_drift([0.3])))
    t = rec.terms
    assert np.array_equal(rec.log_density, -t[:, 0] - 0.5 * t[:, 1] - t[:, 2] - t[:, 3])


def test_near_unit_tilt_without_drift_change_is_negligible():
    for sid in range(20):
        _, _, rec = one_path(simple_scenario(lam=1 - 1e-12, mass=5.0), sid=sid)
        assert np.max(np.abs(rec.log_density)) <= 1e-9


def test_constant_rho_closed_form():
    c = 0.7
    noise, _, rec = one_path(simple_scenario(rho=cf.constant_drift([c]), nu=empty_measure(), lam=0.5))
    w = np.concatenate([[0.0], np.cumsum(noise.brownian_increments[:, 0])])
    expected = -c * w - 0.5 * c ** 2 * noise.grid.nodes
    assert np.allclose(rec.log_density, expected, rtol=0, atol=1e-12)


def test_half_tilt_compensator_term():
    m = 3.0
    _, _, rec = one_path(simple_scenario(lam=0.5, mass=m))
    assert rec.terms[-1, 3] == pytest.approx(m / 2, rel=1e-12)
    jumps = rec.terms[-1, 2] / np.log(0.5)
    assert jumps == pytest.approx(round(jumps), abs=1e-9)


def test_density_csv(tmp_path):
    _, _, rec = one_path(simple_scenario())
    rec.to_csv(tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "time,log_density,term1,term2,term3,term4"
    assert len(lines) == rec.times.size + 1


def test_deterministic_scenario_has_unit_density():
    scen = simple_scenario(sigma=0.0, nu=empty_measure())
    res = martingale_check(scen, 200, [0.5, 1.0], 0)
    assert np.all(res.means == 1.0)
    assert np.all(res.stderrs == 0.0)
    assert res.passed


def test_martingale_for_combined_tilt():
    scen = simple_scenario(rho=lambda x: np.tanh(x) + 0.3, lam=0.4, mass=2.0)
    res = martingale_check(scen, 10_000, [0.5, 1.0], 5)
    assert res.passed


def test_missing_compensator_term_is_detected():
    m, lam = 2.0, 0.5
    scen = simple_scenario(lam=lam, mass=m)
    res = martingale_check(scen, 10_000, [1.0], 3, omit_compensator=True)
    assert not res.passed
    # without the compensator the mean is exp(m (1 - lam) t)
    assert abs(res.means[0] - np.exp(m * (1 - lam))) <= 4 * res.stderrs[0]


def test_rho_bound_enforced():
    scen = simple_scenario(rho=lambda x: 10 * np.ones(np.shape(x)))
    with pytest.raises(ModelError):
        martingale_check(replace(scen, rho_bound=1.0), 100, [1.0], 0)


def test_tilt_margin_enforced():
    with pytest.raises(ModelError):
        martingale_check(simple_scenario(lam=1 - 1e-12), 100, [1.0], 0)


# --- residual of the integro-differential condition


def test_constant_field_has_zero_residual():
    r = pide_residual(ScalarField.constant(3.0, 1), None, cf.constant_diffusion([[1.0]]),
                      cf.additive_jump([[1.0]]), UniformBoxLevyMeasure(Region.interval(0.1, 1.0), 1.0), [0.4])
    assert r == 0.0


@pytest.mark.parametrize("x", [-1.5, 0.0, 2.0])
@pytest.mark.parametrize("s", [0.3, KEYSTONE_SIGMA])
def test_point_mass_residual_by_hand(x, s):
    a = -0.5
    t = pide_terms(ScalarField.linear([-1.0]), [[a]], cf.constant_diffusion([[s]]), cf.additive_jump([[1.0]]),
                   point_mass(), [x])
    # grad v = -1, Hessian 0, v(x + 1) - v(x) = -1
    hand = {"trace": 0.0, "rho_sq": 0.5 * s * s, "drift": -a * x, "jump": 2 * INV_E - 1.0}
    for k, val in hand.items():
        assert t[k] == pytest.approx(val, rel=1e-12, abs=1e-300)


def test_quadratic_terms_match_finite_differences():
    q = np.array([[1.5, 0.4], [0.4, 0.8]])
    v = ScalarField.quadratic(q, [0.2, -0.3])
    sig = np.array([[0.7, 0.1], [0.0, 0.5]])
    A = np.array([[-1.0, 0.2], [0.0, -2.0]])
    x = np.array([0.3, -0.6])
    t = pide_terms(v, A, cf.constant_diffusion(sig), cf.zero_jump(2), empty_measure(), x)
    h = 1e-3
    e = np.eye(2) * h
    grad = np.array([(v.value(x + ei) - v.value(x - ei)) / (2 * h) for ei in e])
    hess = np.array([[(v.value(x + ei + ej) - v.value(x + ei - ej) - v.value(x - ei + ej) + v.value(x - ei - ej))
                      / (4 * h * h) for ej in e] for ei in e])
    fd = {
        "trace": 0.5 * np.trace(sig @ sig.T @ hess),
        "rho_sq": 0.5 * np.sum((sig.T @ grad) ** 2),
        "drift": x @ A @ grad,
    }
    for k, val in fd.items():
        assert t[k] == pytest.approx(val, rel=1e-5)


def test_keystone_sigma_is_the_scalar_root():
    root = brentq(lambda s: 0.5 * s * s + 2 * np.exp(-1.0) - 1.0, 0.1, 2.0, xtol=1e-15)
    assert root == pytest.approx(KEYSTONE_SIGMA, rel=1e-14)
    assert keystone_sigma() == pytest.approx(KEYSTONE_SIGMA, rel=1e-14)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), x=st.floats(-5, 5))
def test_residual_affine_in_operator(a, b, x):
    args = (ScalarField.linear([-1.0]),)
    rest = (cf.constant_diffusion([[0.5]]), cf.additive_jump([[1.0]]), point_mass(), [x])
    r0 = pide_residual(*args, [[0.0]], *rest)
    ra = pide_residual(*args, [[a]], *rest)
    rb = pide_residual(*args, [[b]], *rest)
    rab = pide_residual(*args, [[a + b]], *rest)
    assert rab - r0 == pytest.approx((ra - r0) + (rb - r0), abs=1e-12)


def test_coarse_quadrature_warns():
    nu = UniformBoxLevyMeasure(Region.interval(0.1, 3.0), 1.0, n_nodes=2)
    with pytest.warns(QuadratureWarning):
        t = pide_terms(ScalarField.quadratic([[1.0]]), None, cf.constant_diffusion([[1.0]]),
                       cf.additive_jump([[3.0]]), nu, [0.5])
    assert not t["quadrature_converged"]


def test_fine_quadrature_is_silent():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        t = pide_terms(ScalarField.linear([-1.0]), None, cf.constant_diffusion([[1.0]]),
                       cf.additive_jump([[1.0]]), UniformBoxLevyMeasure(Region.interval(0.1, 1.0), 1.0), [0.5])
    assert t["quadrature_converged"]


# --- consistency


def test_keystone_is_consistent():
    s = keystone()
    pts = np.linspace(-2, 2, 9)[:, None]
    rep = check_consistency(s.v, s.sigma, s.rho, s.f, s.lambda_fn, pts, s.intensity)
    assert rep.e1_max_residual == 0.0
    assert rep.e2_max_residual <= 1e-15
    assert rep.e3_max_residual <= 1e-14
    assert rep.structural_violations == []


def test_shifted_tilt_shows_in_e2():
    s = keystone()
    rep = check_consistency(s.v, s.sigma, s.rho, s.f, cf.constant_tilt(INV_E + 0.01), [[0.0], [1.0]], s.intensity)
    assert rep.e2_max_residual == pytest.approx(0.01, rel=1e-12)
    assert rep.e2_x_spread == 0.0


def test_tilt_outside_unit_interval_reported():
    s = keystone()
    rep = check_consistency(s.v, s.sigma, s.rho, s.f, cf.constant_tilt(1.5), [[0.0]], s.intensity)
    assert rep.structural_violations == [{"mark": [1.0], "lambda": 1.5}]


def test_consistency_json(tmp_path):
    s = keystone()
    rep = check_consistency(s.v, s.sigma, s.rho, s.f, s.lambda_fn, [[0.0], [1.0]], s.intensity)
    rep.to_json(tmp_path / "c.json")
    data = json.loads((tmp_path / "c.json").read_text())
    assert set(data) >= {"e1_max_residual", "e2_max_residual", "e3_max_residual", "e3_residuals"}


# --- path-independence gaps


def test_keystone_gap_is_at_rounding_level():
    gaps = gap_ensemble(keystone(), 200, 4)
    assert np.max(gaps) < 1e-11


def test_single_path_gap_matches_batch():
    s = keystone()
    _, path, rec = one_path(s, seed=4)
    gap, t = path_independence_gap(path, rec, s.v)
    assert gap < 1e-11
    assert 0.0 <= t <= 1.0


def test_perturbed_rho_breaks_path_independence():
    gaps = gap_ensemble(keystone(rho_shift=0.2), 200, 4)
    assert np.median(gaps) > 1e-3


@pytest.mark.parametrize("step", [2.0 ** -6, 2.0 ** -8])
def test_gap_equals_integrated_residual(step):
    # gap minus the time integral of the residual along the path vanishes as dt -> 0
    raw = gap_ensemble(sine_consistent(step), 300, 9)
    corrected = gap_ensemble(sine_consistent(step), 300, 9, residual_corrected=True)
    assert np.median(corrected) < 0.2 * np.median(raw)


def test_corrected_gap_shrinks_with_step():
    meds = [np.median(gap_ensemble(sine_consistent(h), 300, 9, residual_corrected=True)) for h in (2.0 ** -6, 2.0 ** -8)]
    assert meds[1] < meds[0]


@pytest.mark.parametrize("v", [ScalarField.linear([-1.0]), ScalarField.quadratic([[1.0]], [0.5])])
def test_ito_gap_shrinks_with_step(v):
    s = replace(sine_consistent(), v=v, A=[[-0.5]])
    meds = [np.median(ito_gap_ensemble(s.with_step(h), 300, 2)) for h in (2.0 ** -6, 2.0 ** -7, 2.0 ** -8)]
    assert meds[0] > meds[1] > meds[2]


def test_grid_mismatch_rejected():
    s = simple_scenario()
    noise = draw_noise(s.intensity, 1.0, 0.1, 1, 0, 0)
    other = draw_noise(s.intensity, 1.0, 0.05, 1, 0, 1)
    path = solve_strong(s.problem().coeffs, other, [0.0])
    with pytest.raises(ConfigurationError):
        accumulate_log_density(path, noise, s.rho, s.lambda_fn, s.intensity)


def test_record_fields():
    rec = DensityRecord(np.array([0.0, 1.0]), np.zeros((2, 4)))
    assert np.array_equal(rec.log_density, np.zeros(2))
    assert rec.flagged_node is None
    assert TimeGrid.build(1.0, 0.5).n_intervals == 2
