import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from src.core.errors import AdmissibilityError, ContractError, DomainError, InvariantError
from src.core.funcspace import FunctionSpec
from src.core.haar import DyadicInterval, DyadicMap, haar_coefficients
from src.core.homeo import (DyadicHomeomorphism, ThetaMap, build_psi_inverse, check_holder, derivative_bound_check,
                            derivative_profile, eval_forward, eval_inverse, forward_batch, is_admissible,
                            largest_admissible_eta, locality_restrict, lp_norms, read_dyadic_map_csv,
                            read_homeomorphism_csv, refine_levels, theta_from_tau, write_dyadic_map_csv,
                            write_homeomorphism_csv)

DEPTH = 8


def admissible_thetas(depth: int = DEPTH):
    return arrays(np.float64, (2 ** depth - 1,), elements=st.floats(min_value=0.375, max_value=0.625))


def test_midpoint_theta_gives_identity():
    h = build_psi_inverse(ThetaMap.midpoint(14), 14)
    np.testing.assert_array_equal(h.inv_breakpoints, h.grid)
    assert h == DyadicHomeomorphism.identity(14)


def test_theta_outside_range_is_rejected():
    with pytest.raises(InvariantError):
        ThetaMap(2, [0.5, 0.2, 0.5])


def test_breakpoints_must_be_increasing():
    with pytest.raises(InvariantError):
        DyadicHomeomorphism(1, [0.0, 1.0, 1.0])
    with pytest.raises(InvariantError):
        DyadicHomeomorphism(1, [0.1, 0.5, 1.0])


def test_first_level_split():
    theta = DyadicMap(2, [0.25, 0.5, 0.75])
    h = build_psi_inverse(theta, 2)
    np.testing.assert_allclose(h.inv_breakpoints, [0.0, 0.125, 0.25, 0.8125, 1.0])
    with pytest.raises(ContractError):
        build_psi_inverse(theta, 3)


@settings(max_examples=25)
@given(admissible_thetas(), st.integers(min_value=0, max_value=3), st.data())
def test_locality(values, rank, data):
    theta = ThetaMap(DEPTH, values)
    k = data.draw(st.integers(min_value=1, max_value=2 ** rank))
    interval = DyadicInterval(k, rank)
    h = build_psi_inverse(theta, DEPTH)
    sub = build_psi_inverse(locality_restrict(theta, interval), DEPTH - rank)
    span = 2 ** (DEPTH - rank)
    piece = h.inv_breakpoints[(k - 1) * span:k * span + 1]
    np.testing.assert_allclose(piece, piece[0] + (piece[-1] - piece[0]) * sub.inv_breakpoints, atol=1e-12)


@settings(max_examples=25)
@given(admissible_thetas(), arrays(np.float64, (50,), elements=st.floats(min_value=0.0, max_value=1.0)))
def test_forward_inverse_roundtrip(values, y):
    h = build_psi_inverse(ThetaMap(DEPTH, values), DEPTH)
    np.testing.assert_allclose(eval_inverse(h, eval_forward(h, y)), y, atol=1e-12)
    np.testing.assert_allclose(eval_forward(h, eval_inverse(h, y)), y, atol=1e-12)


@settings(max_examples=25)
@given(admissible_thetas())
def test_holder_bounds_hold_for_admissible_theta(values):
    report = check_holder(build_psi_inverse(ThetaMap(DEPTH, values), DEPTH))
    assert report.passed and report.pairwise_passed
    assert report.first_failing_level is None


def test_holder_reports_first_failing_level():
    theta = DyadicMap(3, [0.5, 0.25, 0.5, 0.5, 0.5, 0.5, 0.5])
    report = check_holder(build_psi_inverse(theta, 3), eta_admissible=False)
    assert not report.passed and report.first_failing_level == 2
    assert report.pairwise_passed is None


def test_forward_batch_matches_single_rows():
    rng = np.random.default_rng(3)
    thetas = [ThetaMap(6, rng.uniform(0.3, 0.7, 63)) for _ in range(4)]
    rows = np.array([build_psi_inverse(t, 6).inv_breakpoints for t in thetas])
    batched = refine_levels(np.tile([0.0, 1.0], (4, 1)),
                            (np.array([t.level(j) for t in thetas]) for j in range(1, 7)))
    np.testing.assert_array_equal(rows, batched)
    y = rng.random(30)
    expected = np.array([eval_forward(build_psi_inverse(t, 6), y) for t in thetas])
    np.testing.assert_allclose(forward_batch(rows, y), expected, atol=1e-15)


def test_domain_is_checked():
    h = DyadicHomeomorphism.identity(3)
    with pytest.raises(DomainError):
        eval_forward(h, 1.2)
    with pytest.raises(DomainError):
        eval_inverse(h, -0.1)


def test_admissibility(standard_function):
    table = haar_coefficients(standard_function, 8)
    eta = 0.999 * largest_admissible_eta(table)
    assert is_admissible(table, eta)
    assert not is_admissible(table, 1.01 * largest_admissible_eta(table))
    assert not is_admissible(table, 0.0)


def test_theta_from_tau_checks_range(standard_function):
    table = haar_coefficients(standard_function, 8)
    with pytest.raises(DomainError):
        theta_from_tau(table, DyadicMap.filled(8, 1.5), 0.1)
    with pytest.raises(AdmissibilityError):
        theta_from_tau(table, DyadicMap.filled(8, 1.0), 4.0 * largest_admissible_eta(table))


@settings(max_examples=15)
@given(arrays(np.float64, (2 ** DEPTH - 1,), elements=st.floats(min_value=-1.0, max_value=1.0)))
def test_derivative_bound_for_admissible_eta(tau):
    f_table = haar_coefficients(FunctionSpec.builtin("haar_series", 5, 6), DEPTH)
    eta = 0.999 * largest_admissible_eta(f_table)
    h = build_psi_inverse(theta_from_tau(f_table, DyadicMap(DEPTH, tau), eta), DEPTH)
    report = derivative_bound_check(h, f_table, eta)
    assert report.passed, report.worst_excess



def test_lp_norms_of_identity_are_one():
    norms = lp_norms(DyadicHomeomorphism.identity(5), (1.0, 2.0))
    assert norms["inverse"] == pytest.approx({1.0: 1.0, 2.0: 1.0})
    assert norms["forward"] == pytest.approx({1.0: 1.0, 2.0: 1.0})


def test_derivative_profile_integrates_to_one():
    rng = np.random.default_rng(9)
    h = build_psi_inverse(ThetaMap(7, rng.uniform(0.25, 0.75, 127)), 7)
    assert np.mean(derivative_profile(h)) == pytest.approx(1.0, abs=1e-14)


def test_csv_persistence(tmp_path):
    rng = np.random.default_rng(1)
    theta = ThetaMap(4, rng.uniform(0.3, 0.7, 15))
    h = build_psi_inverse(theta, 4)
    write_homeomorphism_csv(h, tmp_path / "phi.csv")
    assert read_homeomorphism_csv(tmp_path / "phi.csv") == h
    write_dyadic_map_csv(theta, tmp_path / "theta.csv")
    assert read_dyadic_map_csv(tmp_path / "theta.csv") == theta
    padded = read_dyadic_map_csv(tmp_path / "theta.csv", depth=5, default=0.5)
    assert padded.truncated(4) == theta and np.all(padded.level(5) == 0.5)


@given(admissible_thetas(), st.integers(min_value=1, max_value=DEPTH - 1))
def test_coarser_builds_are_subsamples_of_finer_ones(values, n):
    theta = ThetaMap(DEPTH, values)
    fine = build_psi_inverse(theta, DEPTH)
    coarse = build_psi_inverse(theta, n)
    np.testing.assert_array_equal(fine.inv_breakpoints[::2 ** (DEPTH - n)], coarse.inv_breakpoints)
