import csv
import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from src.config.settings import MAX_MAGNITUDE_CLASS
from src.core.errors import ContractError, DomainError, InvariantError, PrecisionError
from src.core.funcspace import (FunctionSpec, GridFunction, dirichlet_kernel, eval_function, parse_function,
                                partial_sum, trig_block_sum)
from src.core.haar import DyadicInterval, DyadicRational, haar_coefficients
from src.core.homeo import DyadicHomeomorphism, check_holder, derivative_bound_check, largest_admissible_eta
from src.core.reducer import (Calibration, CrossCheck, ErrorLedger, ReductionConfig, StepReport, assemble_instance,
                              binary_blocks, collapse_stage, cross_check_step, decay_slope, derive_seed,
                              e_set_corrections, evaluate_result, final_homeomorphism, improvement_factor,
                              magnitude_class_block, magnitude_class_w0, reduce_step, rescale_function, run_pipeline,
                              smoothness_class, snap_restrictor, split_partition, verification_orders,
                              write_evaluation_csv, write_ledger_csv, write_reports_json, xi_grid)
from src.core.rh import RHRestrictor, validate_type
from src.core.signsolver import hypothesis_bounds, validate_instance

HALF = DyadicRational(1, 1)
DEPTH = 8


def quarters(delta: float = 0.4) -> RHRestrictor:
    """Four quarter cells with their boundary dyadics pinned at tau = 0."""
    partition = [DyadicInterval(k, 2) for k in range(1, 5)]
    pinned = {HALF: (0.0, 0.0), DyadicRational(1, 2): (0.0, 0.0), DyadicRational(3, 2): (0.0, 0.0)}
    return RHRestrictor.unrestricted(DEPTH, partition=partition, delta=delta).with_bounds(pinned)


@pytest.fixture
def scaled(standard_function):
    f, _ = rescale_function(standard_function)
    return f


@pytest.fixture
def scaled_table(scaled):
    return haar_coefficients(scaled, DEPTH)


@pytest.fixture
def loose_config(tiny_config, scaled_table):
    """tiny_config with an admissible eta for the standard function and no precision gate."""
    return replace(tiny_config, eta=0.999 * largest_admissible_eta(scaled_table), u_max=2,
                   precision_fraction=math.inf)


def make_report(m: int, error: float, signed: float = None, delta: float = 1.0) -> StepReport:
    rows = [{"u": 1, "r": 1, "xi": 0.0, "error": error, "signed": error if signed is None else signed, "budget": 0.0}]
    return StepReport(0, m, delta, 1, 1, 0.0, 0.0, 0.0, 0.0, rows)


def haar_config(seed: int = 7, threads: int = 1) -> ReductionConfig:
    """A single top-level Haar coefficient: only tau(1/2) moves phi."""
    return ReductionConfig(depth=DEPTH, eta=0.25, u_max=2, m_max=1, delta_min=2.0 ** -4, mc_samples=300, seed=seed,
                           threads=threads)


def test_binary_blocks():
    assert binary_blocks(4, 3) == []
    assert binary_blocks(5, 3) == [(4, 0)]
    assert binary_blocks(7, 3) == [(4, 1), (6, 0)]
    with pytest.raises(ContractError):
        binary_blocks(8, 3)


@given(st.integers(min_value=1, max_value=8).flatmap(
    lambda u: st.tuples(st.just(u), st.integers(min_value=2 ** (u - 1), max_value=2 ** u - 1))),
    st.floats(min_value=0.0, max_value=1.0))
def test_binary_blocks_rebuild_the_dirichlet_kernel(ur, x):
    u, r = ur
    total = dirichlet_kernel(2 ** (u - 1), x)
    for t, s in binary_blocks(r, u):
        total += 2.0 * trig_block_sum(t, s, x, "plus").real
    assert total == pytest.approx(dirichlet_kernel(r, x), abs=1e-8)


def test_magnitude_classes():
    assert magnitude_class_w0(1, 0.25) == 1
    assert magnitude_class_w0(1, 1.0 / 16) == 4
    assert magnitude_class_w0(3, 0.5) == 1
    assert magnitude_class_block(1, 0, 1.0 / 16) == 16
    assert magnitude_class_block(6, 0, 0.5) == 2
    assert magnitude_class_block(6, 5, 0.5) == 1


def test_smoothness_class():
    assert smoothness_class(FunctionSpec.builtin("const", 0.3), 0.1) == MAX_MAGNITUDE_CLASS
    # the tent has slope 2, so omega(2^-8) = 2^-7 and 2^(7/5) = 2.64
    assert smoothness_class(FunctionSpec.builtin("tent"), 2.0 ** -10) == 2


def test_xi_grid():
    np.testing.assert_array_equal(xi_grid(1, 3), np.arange(8) / 8)
    assert len(xi_grid(2, 40)) == 64
    grid = xi_grid(10, 1, subsample_above=8)
    assert len(grid) == 1024 and grid[1] == 4 / 4096


def test_verification_orders():
    assert verification_orders(1) == [1]
    assert verification_orders(3) == [4, 5, 7]


def test_config_validation_and_roundtrip():
    with pytest.raises(DomainError):
        ReductionConfig(depth=8, delta_min=2.0 ** -6)
    with pytest.raises(DomainError):
        ReductionConfig(depth=8, delta_min=0.1, sign_strategy="random")
    with pytest.raises(DomainError):
        ReductionConfig(depth=8, delta_min=0.1, u_max=0)
    config = ReductionConfig(depth=8, delta_min=0.1, seed=5)
    assert ReductionConfig.from_dict(json.loads(json.dumps(config.to_dict()))) == config


def test_derive_seed():
    assert derive_seed(1, 0, 2) == derive_seed(1, 0, 2)
    assert derive_seed(1, 0, 2) != derive_seed(1, 0, 3)
    assert 0 <= derive_seed(2 ** 40, 7) < 2 ** 63


def test_rescaling():
    f, rescaling = rescale_function(FunctionSpec.builtin("lacunary", 1, 0.0))
    assert rescaling.scale == pytest.approx(0.5) and rescaling.offset == pytest.approx(0.0, abs=1e-12)
    low, high = np.min(eval_function(f, np.linspace(0, 1, 65))), np.max(eval_function(f, np.linspace(0, 1, 65)))
    assert low == pytest.approx(-0.5) and high == pytest.approx(0.5)
    g, rescaling = rescale_function(FunctionSpec.builtin("const", 0.3))
    assert (rescaling.offset, rescaling.scale) == (0.3, 1.0)
    np.testing.assert_array_equal(eval_function(g, np.linspace(0, 1, 5)), 0.0)


def test_quarters_restrictor_has_type(scaled_table, loose_config):
    assert validate_type(quarters(), scaled_table, loose_config.eta) == []


def test_assembly_of_constant_function_is_zero(constant_function, tiny_config):
    table = haar_coefficients(constant_function, DEPTH)
    assembly = assemble_instance(RHRestrictor.unrestricted(DEPTH), constant_function, table, tiny_config.eta,
                                 [1, 2, 3], tiny_config)
    assert assembly.c1 == 0.0 and assembly.cells == [0]
    assert assembly.instance.n == 1 and assembly.instance.size == 8 + 16 * 3 + 32 * 7
    assert not np.any(assembly.instance.values)


def test_assembled_instance_meets_hypotheses(scaled, scaled_table, loose_config):
    assembly = assemble_instance(quarters(), scaled, scaled_table, loose_config.eta, [1, 2], loose_config)
    inst = assembly.instance
    assert inst.n == 4 and inst.size == 8 + 16 * 3
    assert assembly.c1 > 0.0
    assert validate_instance(inst) == []
    assert len(inst.labels) == inst.size and inst.labels[0].startswith("w0 u=1")


def test_noisy_entries_raise_precision_error(scaled, scaled_table, loose_config):
    config = replace(loose_config, precision_fraction=1e-9, mc_samples=64)
    with pytest.raises(PrecisionError) as info:
        assemble_instance(quarters(), scaled, scaled_table, config.eta, [1], config)
    assert "cell=" in info.value.entry
    assert info.value.exit_code == 2


def test_assembly_needs_a_large_cell(scaled, scaled_table, loose_config):
    with pytest.raises(ContractError):
        assemble_instance(quarters(delta=0.5), scaled, scaled_table, loose_config.eta, [1], loose_config)


def test_reduce_step_halves_every_center(scaled, scaled_table, loose_config):
    r = quarters()
    outcome = reduce_step(r, scaled, scaled_table, loose_config)
    reduced = outcome.restrictor
    assert reduced.m == 0 and reduced.nests_in(r)
    for d in r.centers:
        a, b = reduced.interval(d)
        assert b - a == 1.0 and a in (-1.0, 0.0)
    assert validate_type(reduced, scaled_table, loose_config.eta) == []
    report = outcome.report
    assert (report.m, report.cells, report.entries) == (-1, 4, outcome.assembly.instance.size)
    assert {row["u"] for row in report.rows} == {1, 2}
    assert report.to_dict()["max_error"] == report.max_error


def test_reduce_step_is_deterministic(scaled, scaled_table, loose_config):
    first = reduce_step(quarters(), scaled, scaled_table, loose_config)
    second = reduce_step(quarters(), scaled, scaled_table, loose_config)
    np.testing.assert_array_equal(first.signs, second.signs)
    assert first.report.to_dict() == second.report.to_dict()


def test_reduce_step_checks_the_type(scaled, scaled_table, loose_config):
    r = quarters().with_bounds({DyadicRational(1, 4): (0.0, 1.0)})
    with pytest.raises(InvariantError):
        reduce_step(r, scaled, scaled_table, loose_config)


def test_greedy_strategy_also_halves(constant_function, tiny_config):
    config = replace(tiny_config, sign_strategy="greedy")
    table = haar_coefficients(constant_function, DEPTH)
    outcome = reduce_step(RHRestrictor.unrestricted(DEPTH), constant_function, table, config)
    assert outcome.restrictor.interval(HALF) == (-1.0, 0.0)
    assert outcome.report.solver_constant == 0.0 and outcome.report.max_error == 0.0


def test_collapse_then_split(constant_function, tiny_config):
    table = haar_coefficients(constant_function, DEPTH)
    collapsed, reports = collapse_stage(RHRestrictor.unrestricted(DEPTH), constant_function, table, tiny_config)
    assert len(reports) == 2 and [report.m for report in reports] == [-1, 0]
    assert reports[0].truncation_budget == pytest.approx(0.5 ** (1 / 22))
    assert collapsed.is_degenerate(HALF) and collapsed.interval(HALF) == (-0.75, -0.75)
    refined = split_partition(collapsed, constant_function, table, tiny_config.eta)
    assert refined.partition == (DyadicInterval(1, 1), DyadicInterval(2, 1))
    assert (refined.m, refined.delta) == (-1, 0.625)
    with pytest.raises(ContractError):
        split_partition(RHRestrictor.unrestricted(DEPTH), constant_function, table, tiny_config.eta)


def test_snap_restrictor():
    r = RHRestrictor.unrestricted(4).with_bounds({HALF: (0.0, 0.5)})
    assert snap_restrictor(r).fully_degenerate()
    assert snap_restrictor(r).interval(HALF) == (0.25, 0.25)
    partly = snap_restrictor(r, [HALF])
    assert partly.is_degenerate(HALF) and not partly.is_degenerate(DyadicRational(1, 2))


def test_final_homeomorphism_needs_degenerate_restrictor(constant_function):
    table = haar_coefficients(constant_function, 4)
    with pytest.raises(ContractError):
        final_homeomorphism(RHRestrictor.unrestricted(4), table, 0.1)
    phi = final_homeomorphism(snap_restrictor(RHRestrictor.unrestricted(4)), table, 0.1)
    assert phi == DyadicHomeomorphism.identity(4)


def test_constant_pipeline_gives_identity(constant_function, tiny_config, tmp_path):
    result = run_pipeline(constant_function, tiny_config)
    assert result.phi == DyadicHomeomorphism.identity(DEPTH)
    assert result.restrictor.fully_degenerate() and result.stages > 1
    assert result.reports and all(report.solver_constant == 0.0 for report in result.reports)
    rows = evaluate_result(constant_function, result.phi, tiny_config.u_max)
    assert all(row["xi_max_dev"] <= 1e-12 and row["baseline_dev"] <= 1e-12 for row in rows)
    write_reports_json(result.reports, tmp_path / "reports.json")
    saved = json.loads((tmp_path / "reports.json").read_text(encoding="utf-8"))
    assert len(saved) == len(result.reports) and saved[0]["stage"] == 0


def test_failed_pipeline_persists_partial_results(standard_function, scaled_table, tmp_path):
    config = ReductionConfig(depth=DEPTH, eta=0.999 * largest_admissible_eta(scaled_table), u_max=1, m_max=0,
                             delta_min=2.0 ** -4, mc_samples=64, seed=1, precision_fraction=1e-9, threads=1)
    with pytest.raises(PrecisionError):
        run_pipeline(standard_function, config, out_dir=tmp_path)
    assert (tmp_path / "partial_restrictor.json").exists()
    assert len(json.loads((tmp_path / "partial_reports.json").read_text(encoding="utf-8"))) == 2


def test_identity_evaluation_matches_the_baseline(standard_function, tmp_path):
    rows = evaluate_result(standard_function, DyadicHomeomorphism.identity(DEPTH), 3)
    assert [(row["u"], row["r"]) for row in rows] == [(1, 1), (2, 2), (2, 3), (3, 4), (3, 5), (3, 7)]
    for row in rows:
        assert row["xi_max_dev"] == pytest.approx(row["baseline_dev"], rel=1e-9, abs=1e-12)
    assert improvement_factor(rows) == pytest.approx(1.0, rel=1e-9)
    write_evaluation_csv(rows, tmp_path / "evaluation.csv")
    with open(tmp_path / "evaluation.csv", newline="", encoding="utf-8") as handle:
        saved = list(csv.DictReader(handle))
    assert list(saved[0]) == ["u", "r", "xi_max_dev", "bernstein_bound", "baseline_dev"]
    assert float(saved[-1]["xi_max_dev"]) == rows[-1]["xi_max_dev"]


def test_improvement_factor():
    rows = [{"u": 1, "xi_max_dev": 0.5, "baseline_dev": 0.1},
            {"u": 2, "xi_max_dev": 0.1, "baseline_dev": 0.3},
            {"u": 2, "xi_max_dev": 0.05, "baseline_dev": 0.2}]
    assert improvement_factor(rows) == pytest.approx(3.0)
    assert improvement_factor([{"u": 1, "xi_max_dev": 0.0, "baseline_dev": 0.2}]) == math.inf


def test_decay_slope():
    reports = [make_report(m, math.exp(-m)) for m in range(4)]
    assert decay_slope(reports) == pytest.approx(-1.0)
    assert math.isnan(decay_slope(reports[:1]))
    assert math.isnan(decay_slope([make_report(0, 0.0), make_report(1, 0.3)]))


def test_cross_check_agreement_rule():
    assert CrossCheck(1.0, 0.1, 1.3, 0.05).agrees
    assert not CrossCheck(1.0, 0.01, 1.3, 0.01).agrees


@pytest.mark.slow
@pytest.mark.parametrize("order, xi", [(1, 0.0), (1, 0.375), (2, 0.125)])
def test_step_matches_direct_estimate(scaled, scaled_table, loose_config, order, xi):
    config = replace(loose_config, mc_samples=4000)
    r = quarters()
    outcome = reduce_step(r, scaled, scaled_table, config)
    u = 1 if order == 1 else 2
    check = cross_check_step(scaled, scaled_table, r, outcome, config.eta, u, order, xi, samples=20000, seed=77)
    assert check.agrees


def test_ledger_accumulates_signed_errors_and_bounds(constant_function, tmp_path):
    ledger = ErrorLedger(constant_function, 1)
    assert len(ledger.entries) == 8
    ledger.record_step(make_report(-1, 0.2, delta=0.4))
    ledger.record_step(make_report(0, 0.3, signed=-0.3, delta=1.0))
    ledger.record_snapping(0.03)
    ledger.record_correction(1, 0.0, -0.03, 0.01)
    entry = ledger.entries[(1, 0.0)]
    assert entry.cumulative == pytest.approx(0.16)
    assert entry.bound == pytest.approx(0.56)
    assert entry.low_scale_sum == pytest.approx(0.2)
    assert entry.correction_stderr == pytest.approx(0.01)
    assert ledger.max_cumulative() == pytest.approx(0.16)
    ledger.check()

    write_ledger_csv(ledger, tmp_path / "ledger.csv")
    with open(tmp_path / "ledger.csv", newline="", encoding="utf-8") as handle:
        saved = list(csv.DictReader(handle))
    assert len(saved) == 8 and float(saved[0]["bound"]) == pytest.approx(0.56)

    entry.signed[1] = 5.0
    with pytest.raises(InvariantError):
        ledger.check()
    with pytest.raises(ContractError):
        ledger.record_correction(1, 0.3, 0.1)


def test_calibration_leaves_headroom_below_the_bounds(scaled, scaled_table, loose_config):
    r = quarters()
    calibration = Calibration(4.0)
    assembly = assemble_instance(r, scaled, scaled_table, loose_config.eta, [1, 2], loose_config,
                                 calibration=calibration)
    inst = assembly.instance
    assert calibration.c1 == assembly.c1 > 0.0
    assert calibration.calibrated_at == (r.m, r.delta)
    assert np.all(np.abs(inst.values) <= 0.25 * hypothesis_bounds(inst) * (1.0 + 1e-9))


def test_entry_above_the_calibrated_c1_raises(scaled, scaled_table, loose_config):
    r = quarters()
    peak = assemble_instance(r, scaled, scaled_table, loose_config.eta, [1], loose_config).c1
    calibration = Calibration(4.0, c1=0.5 * peak, calibrated_at=(r.m, r.delta))
    with pytest.raises(PrecisionError) as info:
        assemble_instance(r, scaled, scaled_table, loose_config.eta, [1], loose_config, calibration=calibration)
    assert "cell=" in info.value.entry
    with pytest.raises(DomainError):
        replace(loose_config, c1_headroom=0.5)


def test_e_set_corrections_of_constant_function(constant_function, tiny_config):
    table = haar_coefficients(constant_function, DEPTH)
    collapsed, _ = collapse_stage(RHRestrictor.unrestricted(DEPTH), constant_function, table, tiny_config)
    refined = split_partition(collapsed, constant_function, table, tiny_config.eta)
    assert e_set_corrections(constant_function, table, collapsed, refined, tiny_config) == {}

    collapsed, _ = collapse_stage(refined, constant_function, table, tiny_config, stage=1)
    refined = split_partition(collapsed, constant_function, table, tiny_config.eta)
    corrections = e_set_corrections(constant_function, table, collapsed, refined, tiny_config, stage=1)
    assert corrections and {u for u, _ in corrections} >= {1}
    assert all(value == 0.0 and stderr == 0.0 for value, stderr in corrections.values())


@pytest.mark.parametrize("seed", [3, 7, 11])
def test_haar_pipeline_moves_phi_and_keeps_the_ledger(seed):
    f = parse_function("haar:0.5,1,0")
    config = haar_config(seed)
    result = run_pipeline(f, config)
    assert result.phi != DyadicHomeomorphism.identity(DEPTH)

    holder = check_holder(result.phi)
    assert holder.passed and holder.pairwise_passed
    table = haar_coefficients(rescale_function(f)[0], DEPTH)
    assert derivative_bound_check(result.phi, table, config.eta).passed

    rows = result.ledger.rows()
    assert all(row["cumulative"] <= row["bound"] * (1.0 + 1e-9) + 1e-12 for row in rows)
    assert any(row["corrections"] > 0.0 for row in rows)
    assert all(report.cumulative_error is not None for report in result.reports)


def test_pipeline_does_not_depend_on_the_thread_count():
    f = parse_function("haar:0.5,1,0")
    single = run_pipeline(f, replace(haar_config(5, threads=1), mc_samples=600))
    pooled = run_pipeline(f, replace(haar_config(5, threads=3), mc_samples=600))
    assert single.phi == pooled.phi
    assert [report.to_dict() for report in single.reports] == [report.to_dict() for report in pooled.reports]
    assert single.ledger.rows() == pooled.ledger.rows()


def test_evaluation_bound_covers_the_grid_deviation(standard_function):
    grid_exp = 10
    rows = evaluate_result(standard_function, DyadicHomeomorphism.identity(DEPTH), 2, grid_exp=grid_exp)
    nodes = np.linspace(0.0, 1.0, 2 ** grid_exp + 1)
    g = GridFunction(grid_exp, eval_function(standard_function, nodes))
    for row in rows:
        deviation = float(np.max(np.abs(partial_sum(g, row["r"], nodes) - g.values)))
        assert row["bernstein_bound"] >= deviation


def test_constant_function_has_zero_evaluation_bound(constant_function):
    rows = evaluate_result(constant_function, DyadicHomeomorphism.identity(DEPTH), 2)
    assert all(row["bernstein_bound"] <= 1e-12 for row in rows)


@pytest.mark.slow
def test_step_errors_decay_within_a_stage(scaled, scaled_table, loose_config):
    config = replace(loose_config, m_max=3, mc_samples=2000)
    _, reports = collapse_stage(quarters(), scaled, scaled_table, config)
    assert len(reports) == 4
    assert decay_slope(reports) < 0.0
