import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq
from scipy.stats import binom

from jumpsupport import coefficients as cf
from jumpsupport.errors import ConfigurationError
from jumpsupport.jump_sde import InitialLaw, SDEProblem
from jumpsupport.random_measures import DiscreteLevyMeasure
from jumpsupport.rng import Substream, stream_key
from jumpsupport.support_probe import (
    BallQuery,
    HitEstimate,
    check_reachability,
    clopper_pearson,
    estimate_hit_probability,
    grid_centers,
    scan_support,
    write_scan_csv,
)

from builders import coeffs_1d, empty_measure, symmetric_uniform, upward_problem


def binom_oracle(k, n, alpha):
    """Two-sided exact bounds by root finding on the binomial CDF."""
    lo = 0.0 if k == 0 else brentq(lambda p: binom.sf(k - 1, n, p) - alpha / 2, 1e-15, 1 - 1e-15, xtol=1e-15)
    hi = 1.0 if k == n else brentq(lambda p: binom.cdf(k, n, p) - alpha / 2, 1e-15, 1 - 1e-15, xtol=1e-15)
    return lo, hi


# --- Clopper-Pearson


@pytest.mark.parametrize("n", [1, 10, 10_000])
def test_zero_hits_closed_form(n):
    lo, hi = clopper_pearson(0, n, 0.05)
    assert lo == 0.0
    assert hi == pytest.approx(1 - 0.025 ** (1 / n), rel=1e-10)


@pytest.mark.parametrize("n", [1, 10, 10_000])
def test_all_hits_closed_form(n):
    lo, hi = clopper_pearson(n, n, 0.05)
    assert hi == 1.0
    assert lo == pytest.approx(0.025 ** (1 / n), rel=1e-10)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 500), frac=st.floats(0.0, 1.0), alpha=st.sampled_from([0.001, 0.05, 0.2]))
def test_bounds_match_binomial_oracle(n, frac, alpha):
    k = int(round(frac * n))
    lo, hi = clopper_pearson(k, n, alpha)
    olo, ohi = binom_oracle(k, n, alpha)
    assert lo == pytest.approx(olo, abs=1e-9)
    assert hi == pytest.approx(ohi, abs=1e-9)
    assert lo <= k / n <= hi


def test_interval_coverage():
    rng = np.random.default_rng(4)
    p, n = 0.03, 400
    hits = rng.binomial(n, p, size=2000)
    covered = [lo <= p <= hi for lo, hi in (clopper_pearson(int(k), n, 0.05) for k in hits)]
    assert np.mean(covered) >= 0.95


@pytest.mark.parametrize("hits,trials,alpha", [(-1, 10, 0.05), (11, 10, 0.05), (0, 0, 0.05), (1, 10, 1.0)])
def test_invalid_interval_arguments(hits, trials, alpha):
    with pytest.raises(ConfigurationError):
        clopper_pearson(hits, trials, alpha)


# --- hit estimates


def test_deterministic_path_hits_every_time():
    prob = SDEProblem(coeffs_1d(cf.constant_drift([1.0])), empty_measure(), InitialLaw.dirac([0.0]), 1.0, 0.01)
    est = estimate_hit_probability(prob, BallQuery([1.0], 0.1, 1.0), 200, 0.05, 1)
    assert est.hits == est.trials == 200
    assert est.verdict == "support evidence"


def test_unreachable_ball_has_small_upper_bound():
    est = estimate_hit_probability(upward_problem(0.75), BallQuery([-1.0], 0.25, 1.0), 10_000, 0.05, 2)
    assert est.hits == 0
    assert est.cp_upper < 4e-4
    assert est.verdict == "no evidence at resolution"


def test_scan_of_constant_start_at_time_zero():
    prob = SDEProblem(coeffs_1d(), empty_measure(), InitialLaw.dirac([0.0]), 1.0, 0.1)
    ests = scan_support(prob, 0.0, grid_centers(-1.0, 1.0, 0.5), 0.25, 100, 0.05, 0)
    assert [e.hits for e in ests] == [0, 0, 100, 0, 0]


def test_scan_shares_one_ensemble():
    prob = upward_problem(0.75)
    centers = grid_centers(0.0, 2.0, 0.5)
    scan = scan_support(prob, 1.0, centers, 0.25, 2000, 0.01, 7)
    for c, e in zip(centers, scan):
        single = estimate_hit_probability(prob, BallQuery(c, 0.25, 1.0), 2000, 0.01, 7)
        assert (single.hits, single.trials) == (e.hits, e.trials)


def test_scan_requires_enough_paths():
    with pytest.raises(ConfigurationError):
        scan_support(upward_problem(), 1.0, [[0.0]], 0.25, 99, 0.05, 0)


def test_failure_fraction_invalidates_estimate():
    q = BallQuery([0.0], 0.25, 1.0)
    est = HitEstimate(q, 5, 90, 5 / 90, 0.01, 0.1, 0.05, n_failed=10)
    assert not est.valid
    assert est.verdict.startswith("invalid")


def test_grid_centers_two_dimensional():
    c = grid_centers(-1.0, 1.0, 1.0, 2)
    assert c.shape == (9, 2)
    assert grid_centers(-3.0, 3.0, 0.5).shape == (13, 1)


def test_scan_csv(tmp_path):
    ests = scan_support(upward_problem(0.75), 1.0, grid_centers(0.0, 1.0, 0.5), 0.25, 200, 0.05, 3)
    write_scan_csv(ests, tmp_path / "scan.csv")
    lines = (tmp_path / "scan.csv").read_text().splitlines()
    assert lines[0] == "center_1,radius,t,hits,trials,cp_lower,cp_upper"
    assert len(lines) == 4


# --- reachability


def test_reachability_finds_witness():
    nu = DiscreteLevyMeasure([-1.0, -0.5, 0.5, 1.0], [0.25] * 4)
    res = check_reachability(cf.additive_jump([[1.0]]), nu, [0.0], [-1.0], 0.25, 200,
                             stream_key(0, 0, Substream.JUMP_MARKS))
    assert res.found
    assert res.witness[0] == -1.0


def test_reachability_reports_non_disproof():
    nu = DiscreteLevyMeasure([-1.0, -0.5, 0.5, 1.0], [0.25] * 4)
    res = check_reachability(cf.abs_jump([[1.0]]), nu, [0.0], [-1.0], 0.25, 200,
                             stream_key(0, 0, Substream.JUMP_MARKS))
    assert not res.found
    assert res.min_distance == pytest.approx(1.25)
    assert "not a disproof" in res.summary


def test_reachability_on_uniform_marks():
    res = check_reachability(cf.additive_jump([[1.0]]), symmetric_uniform(), [5.0], [0.5], 0.1, 1000,
                             stream_key(1, 0, Substream.JUMP_MARKS))
    assert res.found
    assert abs(res.witness[0] - 0.5) < 0.1
