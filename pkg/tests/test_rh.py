import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.core.errors import ContractError, InvariantError, ResolutionError
from src.core.funcspace import FunctionSpec, linear_exponential_weights
from src.core.haar import DyadicInterval, DyadicMap, DyadicRational, haar_coefficients
from src.core.homeo import largest_admissible_eta
from src.core.rh import (RHRestrictor, cell_moments, coupled_difference, delta_field, delta_i, dirichlet_weights,
                         dyadic_point, expectation_field, in_neighbourhood, locate, martingale_check,
                         phi_inverse_partition, read_restrictor_json, sample_tau, split_expectation, validate_type,
                         w_vectors, write_restrictor_json, y_cells)

DEPTH = 6
HALF = DyadicRational(1, 1)
QUARTER = DyadicRational(1, 2)


@pytest.fixture
def table(standard_function):
    return haar_coefficients(standard_function, DEPTH)


@pytest.fixture
def eta(table):
    return 0.999 * largest_admissible_eta(table)


def three_cells() -> list:
    return [DyadicInterval(1, 1), DyadicInterval(3, 2), DyadicInterval(4, 2)]


def test_dyadic_point_reduces_to_odd_form():
    assert dyadic_point(4, 3) == HALF
    assert dyadic_point(6, 3) == DyadicRational(3, 2)
    assert dyadic_point(0, 3) is None and dyadic_point(8, 3) is None


def test_restrictor_invariants():
    with pytest.raises(InvariantError):
        RHRestrictor(3, DyadicMap.filled(3, 0.5), DyadicMap.filled(3, 0.0), [DyadicInterval(1, 0)], -1, 1.0)
    with pytest.raises(InvariantError):
        RHRestrictor.unrestricted(3, partition=[DyadicInterval(1, 1)])
    with pytest.raises(InvariantError):
        RHRestrictor.unrestricted(3, partition=[DyadicInterval(1, 3)] + [DyadicInterval(k, 3) for k in range(2, 9)])
    with pytest.raises(InvariantError):
        RHRestrictor.unrestricted(3, m=-2)


def test_partition_geometry():
    r = RHRestrictor.unrestricted(DEPTH, partition=three_cells())
    assert r.centers == [QUARTER, DyadicRational(5, 3), DyadicRational(7, 3)]
    assert r.boundary_points == [HALF, DyadicRational(3, 2)]


def test_nesting_and_degeneracy():
    r = RHRestrictor.unrestricted(4)
    narrowed = r.with_bounds({HALF: (0.0, 0.5)})
    assert narrowed.nests_in(r) and not r.nests_in(narrowed)
    assert narrowed.interval(HALF) == (0.0, 0.5)
    assert not narrowed.fully_degenerate()
    flat = RHRestrictor(4, DyadicMap.filled(4, 0.1), DyadicMap.filled(4, 0.1), r.partition, 3, 1.0)
    assert flat.fully_degenerate() and flat.is_degenerate(QUARTER)


def test_restrictor_json_roundtrip(tmp_path):
    r = RHRestrictor.unrestricted(DEPTH, partition=three_cells(), m=2, delta=0.625)
    r = r.with_bounds({HALF: (0.0, 0.0), DyadicRational(3, 2): (0.25, 0.25), QUARTER: (-0.5, 0.0)})
    write_restrictor_json(r, tmp_path / "restrictor.json")
    back = read_restrictor_json(tmp_path / "restrictor.json")
    assert back.lower == r.lower and back.upper == r.upper
    assert back.partition == r.partition and (back.m, back.delta) == (2, 0.625)


def test_sample_tau_stays_in_intervals():
    r = RHRestrictor.unrestricted(5).with_bounds({HALF: (0.2, 0.2), QUARTER: (-0.5, 0.0)})
    tau = sample_tau(r, 3)
    assert tau[HALF] == 0.2
    assert -0.5 <= tau[QUARTER] <= 0.0
    assert np.all(np.abs(tau.values) <= 1.0)
    assert sample_tau(r, 3) == tau


def test_preimages_of_constant_function_are_the_cells(constant_function):
    table = haar_coefficients(constant_function, DEPTH)
    r = RHRestrictor.unrestricted(DEPTH, partition=three_cells())
    r = r.with_bounds({HALF: (1.0, 1.0), DyadicRational(3, 2): (-1.0, -1.0)})
    assert phi_inverse_partition(r, table, 0.1) == [(0.0, 0.5), (0.5, 0.75), (0.75, 1.0)]


def test_preimages_follow_theta():
    table = haar_coefficients(FunctionSpec.builtin("haar", 0.5, 1, 0), DEPTH)
    # q at 1/2 is a^2 = 1/4, so theta(1/2) = 1/2 + 0.5 * 0.25 * 1
    r = RHRestrictor.unrestricted(DEPTH, partition=[DyadicInterval(1, 1), DyadicInterval(2, 1)])
    r = r.with_bounds({HALF: (1.0, 1.0)})
    intervals = phi_inverse_partition(r, table, 0.5)
    np.testing.assert_allclose(intervals, [(0.0, 0.625), (0.625, 1.0)])


def test_preimages_need_degenerate_boundaries(table, eta):
    r = RHRestrictor.unrestricted(DEPTH, partition=three_cells())
    with pytest.raises(InvariantError):
        phi_inverse_partition(r, table, eta)
    assert validate_type(r, table, eta)[0].startswith("boundary dyadic")


def test_y_cells_and_locate():
    r = RHRestrictor.unrestricted(4, partition=[DyadicInterval(1, 1), DyadicInterval(2, 1)], delta=0.8)
    intervals = [(0.0, 0.5), (0.5, 1.0)]
    assert y_cells(r, intervals) == [0, 1]
    assert y_cells(r.with_type(delta=1.0), intervals) == []
    np.testing.assert_array_equal(locate(intervals, [0.0, 0.49, 0.5, 1.0]), [0, 0, 1, 1])


@pytest.mark.parametrize("i, l, n, expected", [(0, 4, 5, True), (4, 0, 5, True), (2, 0, 5, False), (3, 3, 5, True)])
def test_in_neighbourhood_wraps(i, l, n, expected):
    assert in_neighbourhood(i, l, n) is expected


def test_unrestricted_restrictor_has_type_one(table, eta):
    r = RHRestrictor.unrestricted(DEPTH)
    assert validate_type(r, table, eta) == []
    loose = r.with_bounds({QUARTER: (0.0, 1.0)})
    assert any("is restricted" in v for v in validate_type(loose, table, eta))
    misaligned = r.with_type(m=2).with_bounds({HALF: (-0.9, -0.65)})
    assert any("not a dyadic interval" in v for v in validate_type(misaligned, table, eta))


def test_expectation_of_constant_is_exact(constant_function):
    table = haar_coefficients(constant_function, DEPTH)
    estimates = expectation_field(constant_function, table, RHRestrictor.unrestricted(DEPTH), 0.1,
                                  [0.0, 0.3, 1.0], samples=64, seed=1)
    assert [e.mean for e in estimates] == [0.3, 0.3, 0.3]
    assert all(e.stderr == 0.0 and e.samples == 64 for e in estimates)


def test_expectation_is_thread_independent(standard_function, table, eta):
    r = RHRestrictor.unrestricted(DEPTH)
    xs = np.linspace(0, 1, 7)
    single = expectation_field(standard_function, table, r, eta, xs, samples=600, seed=4, threads=1)
    pooled = expectation_field(standard_function, table, r, eta, xs, samples=600, seed=4, threads=3)
    assert single == pooled


def test_too_few_samples_is_a_contract_error(standard_function, table, eta):
    with pytest.raises(ContractError):
        expectation_field(standard_function, table, RHRestrictor.unrestricted(DEPTH), eta, [0.5], samples=1, seed=0)


def test_delta_vanishes_for_constant_function(constant_function):
    table = haar_coefficients(constant_function, DEPTH)
    field = delta_field(constant_function, table, RHRestrictor.unrestricted(DEPTH), 0.1,
                        {0: np.linspace(0, 1, 9)}, samples=128, seed=2)
    np.testing.assert_array_equal(field.delta[0], 0.0)
    np.testing.assert_array_equal(field.delta_stderr[0], 0.0)


def test_delta_vanishes_for_degenerate_center(standard_function, table, eta):
    r = RHRestrictor.unrestricted(DEPTH).with_bounds({HALF: (0.3, 0.3)})
    np.testing.assert_array_equal(delta_i(standard_function, table, r, 0, eta, np.linspace(0, 1, 9), 256, 5), 0.0)


def test_delta_needs_a_large_cell(standard_function, table, eta):
    r = RHRestrictor.unrestricted(DEPTH, partition=[DyadicInterval(1, 1), DyadicInterval(2, 1)], delta=1.0)
    r = r.with_bounds({HALF: (0.0, 0.0)})
    with pytest.raises(ContractError):
        delta_field(standard_function, table, r, eta, {0: [0.25]}, samples=16, seed=0)


def test_split_halves_average_to_the_expectation(standard_function, table, eta):
    r = RHRestrictor.unrestricted(DEPTH)
    xs = np.linspace(0.05, 0.95, 5)
    split = split_expectation(standard_function, table, r, 0, eta, xs, samples=4000, seed=8)
    direct = expectation_field(standard_function, table, r, eta, xs, samples=4000, seed=9)
    for combined, plus_se, minus_se, estimate in zip(split.combined, split.plus_stderr, split.minus_stderr, direct):
        tolerance = 5.0 * (0.5 * (plus_se + minus_se) + estimate.stderr) + 1e-12
        assert abs(combined - estimate.mean) <= tolerance


def test_zeroth_moment_is_the_integral_of_delta(standard_function, table, eta):
    r = RHRestrictor.unrestricted(DEPTH)
    moments = cell_moments(standard_function, table, r, eta, u_max=2, samples=300, seed=6)
    assert list(moments) == [0]
    cell = moments[0]
    assert cell.top == 4 and cell.mean.shape == (9,) and cell.covariance.shape == (9, 9)
    field = delta_field(standard_function, table, r, eta, {0: cell.nodes}, samples=300, seed=6)
    weights = linear_exponential_weights(cell.nodes, np.array([0.0]))[:, 0].real
    assert cell.mean[0] == pytest.approx(weights @ field.delta[0], rel=1e-9, abs=1e-12)
    assert np.all(np.diag(cell.covariance) >= -1e-15)


def test_w_vectors(standard_function, table, eta):
    r = RHRestrictor.unrestricted(DEPTH)
    cell = cell_moments(standard_function, table, r, eta, u_max=3, samples=200, seed=3)[0]
    w0 = w_vectors(cell, 0.25, 2)
    assert w0.value.imag == 0.0 and w0.stderr_re >= 0.0
    plus = w_vectors(cell, 0.25, 3, s=1, t=4, kind="wplus")
    minus = w_vectors(cell, 0.25, 3, s=1, t=4, kind="wminus")
    assert minus.value == plus.value.conjugate()
    assert w_vectors(cell, 0.25, 3, kind="w0", delta=0.5, near=True).value == 0j
    with pytest.raises(ContractError):
        w_vectors(cell, 0.25, 3, kind="wplus")
    with pytest.raises(ResolutionError):
        w_vectors(cell, 0.25, 4)


def test_slope_identity_holds(table, eta):
    report = martingale_check(table, RHRestrictor.unrestricted(DEPTH), eta, samples=4000, seed=12)
    assert report.means.shape == (2 ** DEPTH,)
    assert report.max_z <= 5.0
    assert report.max_deviation <= 0.1


@pytest.mark.slow
def test_slope_identity_holds_with_many_samples(table, eta):
    report = martingale_check(table, RHRestrictor.unrestricted(DEPTH), eta, samples=100_000, seed=13)
    assert report.max_z <= 5.0 and report.max_deviation <= 0.02


def test_slope_identity_needs_unrestricted_family(table, eta):
    r = RHRestrictor.unrestricted(DEPTH).with_bounds({HALF: (0.0, 1.0)})
    with pytest.raises(ContractError):
        martingale_check(table, r, eta, samples=16, seed=0)


def test_moments_are_empty_without_large_cells(standard_function, table, eta):
    r = RHRestrictor.unrestricted(DEPTH, partition=[DyadicInterval(1, 1), DyadicInterval(2, 1)], delta=1.0)
    r = r.with_bounds({HALF: (0.0, 0.0)})
    assert cell_moments(standard_function, table, r, eta, u_max=2, samples=16, seed=0) == {}
    assert math.isclose(sum(b - a for a, b in phi_inverse_partition(r, table, eta)), 1.0)


@settings(max_examples=15)
@given(st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=1, max_size=6),
       st.integers(min_value=0, max_value=2 ** 16))
def test_expectation_preserves_pointwise_order(xs, seed):
    tent = FunctionSpec.builtin("tent")
    table = haar_coefficients(tent, DEPTH)
    eta = 0.999 * largest_admissible_eta(table)
    r = RHRestrictor.unrestricted(DEPTH)
    lower = expectation_field(tent.rescaled(0.5, 0.0), table, r, eta, xs, samples=40, seed=seed)
    upper = expectation_field(tent, table, r, eta, xs, samples=40, seed=seed)
    for low, high in zip(lower, upper):
        assert low.mean <= high.mean + 1e-12


def test_coupled_difference_of_a_restrictor_with_itself_is_zero(standard_function, table, eta):
    r = RHRestrictor.unrestricted(DEPTH).with_bounds({HALF: (0.0, 0.5)})
    xs = np.linspace(0, 1, 5)
    mean, stderr = coupled_difference(standard_function, table, r, r, eta, xs, np.eye(5), samples=300, seed=2)
    np.testing.assert_array_equal(mean, 0.0)
    np.testing.assert_array_equal(stderr, 0.0)


def test_coupled_difference_matches_separate_expectations(standard_function, table, eta):
    start = RHRestrictor.unrestricted(DEPTH)
    end = start.with_bounds({HALF: (0.5, 1.0)})
    xs = np.array([0.2, 0.45, 0.7])
    mean, stderr = coupled_difference(standard_function, table, start, end, eta, xs, np.eye(3), samples=3000, seed=8)
    before = expectation_field(standard_function, table, start, eta, xs, samples=3000, seed=9)
    after = expectation_field(standard_function, table, end, eta, xs, samples=3000, seed=10)
    for k in range(3):
        tolerance = 5.0 * (stderr[k] + before[k].stderr + after[k].stderr) + 1e-12
        assert abs(mean[k] - (after[k].mean - before[k].mean)) <= tolerance


def test_coupled_difference_checks_shapes(standard_function, table, eta):
    r = RHRestrictor.unrestricted(DEPTH)
    with pytest.raises(ContractError):
        coupled_difference(standard_function, table, r, RHRestrictor.unrestricted(DEPTH - 1), eta, [0.5],
                           np.ones(1), samples=16, seed=0)
    with pytest.raises(ContractError):
        coupled_difference(standard_function, table, r, r, eta, [0.5], np.ones(2), samples=16, seed=0)


def test_dirichlet_weights_integrate_the_kernel():
    nodes = np.linspace(0.1, 0.7, 41)
    xi, order = 0.2, 3
    z = np.arange(1, order + 1)
    exact = 0.6 + np.sum((np.sin(2 * np.pi * z * (0.7 - xi)) - np.sin(2 * np.pi * z * (0.1 - xi))) / (np.pi * z))
    assert np.sum(dirichlet_weights(nodes, order, xi)) == pytest.approx(exact, abs=1e-12)
    np.testing.assert_allclose(dirichlet_weights(nodes, 0, xi), linear_exponential_weights(nodes, [0.0])[:, 0].real)
