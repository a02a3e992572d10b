import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jumpsupport import coefficients as cf
from jumpsupport.errors import ConfigurationError, ModelError, NumericError
from jumpsupport.random_measures import (
    DiscreteLevyMeasure,
    MarkedPointPattern,
    MarkSpace,
    Region,
    UniformBoxLevyMeasure,
    compensated_integral,
    poisson_chi_square,
    sample_prm,
    thin_to_tilted,
)
from jumpsupport.rng import RngStreamKey, Substream, stream_key

from builders import symmetric_uniform


def key(i, seed=7):
    return stream_key(seed, i, Substream.JUMP_TIMES)


def patterns(nu, n, horizon=1.0, seed=7, region=None):
    return [sample_prm(nu, region, horizon, key(i, seed)) for i in range(n)]


# --- rng


def test_identical_keys_reproduce_draws():
    a = RngStreamKey(3, 9, Substream.BROWNIAN).generator().standard_normal(5)
    b = RngStreamKey(3, 9, Substream.BROWNIAN).generator().standard_normal(5)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("other", [(4, 9, 0), (3, 10, 0), (3, 9, 1)])
def test_distinct_keys_give_distinct_streams(other):
    a = RngStreamKey(3, 9, Substream.BROWNIAN).generator().random(4)
    b = RngStreamKey(*other).generator().random(4)
    assert not np.array_equal(a, b)


def test_key_rejects_out_of_range_seed():
    with pytest.raises(ConfigurationError):
        RngStreamKey(-1, 0, Substream.BROWNIAN)
    with pytest.raises(ConfigurationError):
        RngStreamKey(2 ** 64, 0, Substream.BROWNIAN)


# --- regions and measures


def test_mark_space_rejects_region_with_origin():
    with pytest.raises(ConfigurationError):
        MarkSpace(1, Region.interval(-1.0, 1.0))


def test_discrete_measure_rejects_atom_at_origin():
    with pytest.raises(ConfigurationError):
        DiscreteLevyMeasure([0.0, 1.0], [1.0, 1.0])


def test_overlapping_boxes_rejected():
    with pytest.raises(ConfigurationError):
        UniformBoxLevyMeasure(Region.boxes([(0.1, 1.0), (0.5, 2.0)]), 1.0)


@settings(max_examples=40, deadline=None)
@given(cuts=st.lists(st.floats(0.15, 0.95), min_size=1, max_size=4, unique=True))
def test_mass_additive_over_disjoint_pieces(cuts):
    nu = UniformBoxLevyMeasure(Region.interval(0.1, 1.0), 2.5)
    edges = [0.1] + sorted(cuts) + [1.0]
    pieces = [nu.mass(Region.interval(a, b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]
    assert sum(pieces) == pytest.approx(nu.total_mass(), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(weights=st.lists(st.floats(0.0, 5.0), min_size=2, max_size=6))
def test_discrete_mass_additive(weights):
    atoms = np.arange(1, len(weights) + 1, dtype=float)
    nu = DiscreteLevyMeasure(atoms, weights)
    left = nu.mass(Region.interval(0.5, len(weights) / 2 + 0.25))
    right = nu.mass(Region.interval(len(weights) / 2 + 0.5, len(weights) + 1.0))
    assert left + right == pytest.approx(sum(weights), rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("nu", [symmetric_uniform(1.7), DiscreteLevyMeasure([1.0, -2.0], [0.3, 0.9])])
def test_quadrature_of_one_is_mass(nu):
    assert nu.quadrature(lambda u: np.ones(u.shape[0])) == pytest.approx(nu.total_mass(), rel=1e-12)


def test_second_moment_of_symmetric_uniform():
    # density 1/1.8 on two intervals of length 0.9: 2 * (1 - 0.001) / 3 / 1.8
    nu = symmetric_uniform()
    assert nu.second_moment() == pytest.approx(2 * 0.999 / 3 / 1.8, rel=1e-12)
    assert np.isfinite(nu.second_moment())


def test_two_dimensional_box_quadrature():
    nu = UniformBoxLevyMeasure(Region.boxes([((0.1, 0.1), (1.0, 2.0))]), density=2.0, n_nodes=8)
    # int u1 * u2 over the box times density 2
    exact = 2.0 * (1 - 0.01) / 2 * (4 - 0.01) / 2
    assert nu.quadrature(lambda u: u[:, 0] * u[:, 1]) == pytest.approx(exact, rel=1e-12)


# --- sample_prm


def test_empty_region_gives_empty_pattern():
    nu = symmetric_uniform()
    pat = sample_prm(nu, Region.empty(1), 1.0, key(0))
    assert len(pat) == 0


def test_nonpositive_horizon_rejected():
    with pytest.raises(ConfigurationError):
        sample_prm(symmetric_uniform(), None, 0.0, key(0))


def test_infinite_mass_rejected():
    nu = DiscreteLevyMeasure([1.0], [1.0])
    nu.weights = np.array([np.inf])
    with pytest.raises(ConfigurationError):
        sample_prm(nu, None, 1.0, key(0))


def test_count_and_mark_means():
    nu = UniformBoxLevyMeasure(Region.interval(1.0, 2.0), 2.0)
    pats = patterns(nu, 100_000, seed=101)
    counts = np.array([len(p) for p in pats])
    assert abs(counts.mean() - 2.0) <= 3 * np.sqrt(2.0 / 100_000)
    marks = np.concatenate([p.marks[:, 0] for p in pats])
    assert abs(marks.mean() - 1.5) <= 3 * marks.std(ddof=1) / np.sqrt(marks.size)


def test_counts_pass_chi_square():
    nu = DiscreteLevyMeasure([0.5, 2.0], [1.0, 2.0])
    counts = [len(p) for p in patterns(nu, 10_000, horizon=0.7, seed=5)]
    _, p, _, _ = poisson_chi_square(counts, 3.0 * 0.7)
    assert p > 0.001


def test_chi_square_rejects_wrong_mean():
    nu = DiscreteLevyMeasure([1.0], [2.0])
    counts = [len(p) for p in patterns(nu, 10_000, seed=6)]
    _, p, _, _ = poisson_chi_square(counts, 2.3)
    assert p < 0.001


def test_pattern_is_sorted_and_in_region():
    region = Region.interval(0.1, 0.5)
    for p in patterns(symmetric_uniform(5.0), 200, region=region):
        assert np.all(np.diff(p.times) > 0)
        assert np.all((p.times > 0) & (p.times <= 1.0))
        assert np.all(region.contains(p.marks))


def test_pattern_rejects_ties_and_foreign_marks():
    with pytest.raises(ConfigurationError):
        MarkedPointPattern(1.0, [0.2, 0.2], [[1.0], [1.0]])
    with pytest.raises(ConfigurationError):
        MarkedPointPattern(1.0, [0.2], [[3.0]], Region.interval(0.1, 1.0))


def test_identical_key_gives_identical_pattern(tmp_path):
    nu = symmetric_uniform(4.0)
    a = sample_prm(nu, None, 2.0, key(3))
    b = sample_prm(nu, None, 2.0, key(3))
    a.to_csv(tmp_path / "a.csv")
    b.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "time,mark_1"


# --- thinning


def test_keep_all_boundary_probe():
    nu = DiscreteLevyMeasure([1.0], [10.0])
    removed = total = 0
    for i in range(10_000):
        p = sample_prm(nu, None, 1.0, key(i, 9))
        q = thin_to_tilted(p, cf.constant_tilt(1 - 1e-12), key(i, 9))
        total += len(p)
        removed += len(p) - len(q)
    assert total > 99_000
    assert removed == 0


def test_half_thinning_halves_count():
    nu = DiscreteLevyMeasure([1.0], [4.0])
    kept = np.array([len(thin_to_tilted(sample_prm(nu, None, 1.0, key(i, 10)), cf.constant_tilt(0.5), key(i, 10)))
                     for i in range(100_000)])
    assert abs(kept.mean() - 2.0) <= 3 * kept.std(ddof=1) / np.sqrt(kept.size)


def test_identity_tilt_count_matches_quadrature():
    m = 3.0
    nu = UniformBoxLevyMeasure(Region.interval(1e-9, 1.0 - 1e-9), m)
    kept = np.array([len(thin_to_tilted(sample_prm(nu, None, 1.0, key(i, 11)), cf.identity_tilt, key(i, 11)))
                     for i in range(20_000)])
    expected = nu.tilted(cf.identity_tilt).total_mass()
    assert expected == pytest.approx(m / 2, rel=1e-9)
    assert abs(kept.mean() - m / 2) <= 3 * kept.std(ddof=1) / np.sqrt(kept.size)


def test_tilt_outside_unit_interval_names_mark():
    pat = MarkedPointPattern(1.0, [0.3, 0.6], [[0.5], [2.0]])
    with pytest.raises(ModelError, match=r"\[2\.0\]"):
        thin_to_tilted(pat, lambda u: u[:, 0], key(0))


# --- compensated integrals


def test_zero_integrand_gives_zero():
    pat = sample_prm(symmetric_uniform(3.0), None, 1.0, key(1))
    out = compensated_integral(pat, lambda t, u: np.zeros(np.shape(t)), symmetric_uniform(3.0), 1.0)
    assert out == 0.0


def test_unit_integrand_gives_count_minus_mass():
    nu = DiscreteLevyMeasure([1.0, 2.0], [0.75, 0.5])
    pat = sample_prm(nu, None, 2.0, key(2))
    out = compensated_integral(pat, lambda t, u: np.ones(np.shape(t)), nu, 2.0)
    assert out == len(pat) - 1.25 * 2.0


def test_compensated_integral_has_mean_zero():
    nu = symmetric_uniform(2.0)

    def integrand(t, u):
        return np.sin(3 * t) * u[:, 0] + np.cos(u[:, 0])

    vals = np.array([compensated_integral(sample_prm(nu, None, 1.0, key(i, 12)), integrand, nu, 1.0)
                     for i in range(10_000)])
    assert abs(vals.mean()) <= 3 * vals.std(ddof=1) / np.sqrt(vals.size)


def test_non_finite_integrand_reports_event():
    pat = MarkedPointPattern(1.0, [0.25], [[0.5]])
    with pytest.raises(NumericError, match="0.25"):
        compensated_integral(pat, lambda t, u: 1.0 / (u[:, 0] - 0.5), DiscreteLevyMeasure([2.0], [1.0]), 1.0)


def test_horizon_beyond_pattern_rejected():
    pat = MarkedPointPattern(1.0, [], [])
    with pytest.raises(ConfigurationError):
        compensated_integral(pat, lambda t, u: np.ones(np.shape(t)), DiscreteLevyMeasure([1.0], [1.0]), 2.0)
