"""
Invariant suites behind `verify --suite core|full`.

Each check returns a CheckResult; the suite passes when every check does.
`core` runs in seconds, `full` adds the Monte-Carlo and pipeline checks.
"""

from dataclasses import asdict, dataclass
from typing import Callable, List

import numpy as np

from src.config.logging_config import setup_logger
from src.core.funcspace import (STANDARD_FUNCTION, FunctionSpec, dirichlet_kernel, parse_function,
                                trig_block_sum)
from src.core.errors import SolverFailure
from src.core.haar import bessel_check, haar_coefficients
from src.core.homeo import ThetaMap, build_psi_inverse, check_holder, eval_forward, eval_inverse
from src.core.reducer import ReductionConfig, binary_blocks, run_pipeline
from src.core.rh import RHRestrictor, delta_field, martingale_check
from src.core.signsolver import SolverParams, brute_force_signs, make_structured_instance, solve_signs

logger = setup_logger(__name__)

SUITES = ("core", "full")


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def to_dict(self) -> dict:
        return asdict(self)


def _kernel_integral(seed: int) -> CheckResult:
    # the periodic trapezoid rule on 1024 points is exact for degree <= 64
    x = np.arange(1024) / 1024
    worst = max(abs(float(np.mean(dirichlet_kernel(r, x))) - 1.0) for r in range(65))
    return CheckResult("dirichlet_integral", worst <= 1e-10, f"max |int D_r - 1| = {worst:.3g}")


def _binary_decomposition(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = rng.random(100)
    worst = 0.0
    for u in range(1, 8):
        for r in range(2 ** (u - 1), 2 ** u):
            total = dirichlet_kernel(2 ** (u - 1), x).astype(complex)
            for t, s in binary_blocks(r, u):
                total += trig_block_sum(t, s, x, "plus") + trig_block_sum(t, s, x, "minus")
            worst = max(worst, float(np.max(np.abs(total - dirichlet_kernel(r, x)))))
    return CheckResult("binary_decomposition", worst <= 1e-10, f"max error {worst:.3g}")


def _identity_homeomorphism(seed: int) -> CheckResult:
    h = build_psi_inverse(ThetaMap.midpoint(14), 14)
    error = float(np.max(np.abs(h.inv_breakpoints - h.grid)))
    return CheckResult("midpoint_theta_identity", error == 0.0, f"max |psi^-1(x) - x| = {error:.3g}")


def _roundtrip_and_holder(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    theta = ThetaMap(12, rng.uniform(3.0 / 8.0, 5.0 / 8.0, 2 ** 12 - 1))
    h = build_psi_inverse(theta, 12)
    y = rng.random(1000)
    roundtrip = float(np.max(np.abs(eval_inverse(h, eval_forward(h, y)) - y)))
    holder = check_holder(h)
    passed = roundtrip < 1e-12 and holder.passed and bool(holder.pairwise_passed)
    return CheckResult("roundtrip_and_holder", passed,
                       f"roundtrip {roundtrip:.3g}, first failing level {holder.first_failing_level}")


def _haar_constant(seed: int) -> CheckResult:
    table = haar_coefficients(FunctionSpec.builtin("const", 0.3), 10)
    q_max = table.max_q()
    return CheckResult("constant_has_zero_q", q_max == 0.0, f"sup q = {q_max:.3g}")


def _bessel(seed: int) -> CheckResult:
    f = parse_function(STANDARD_FUNCTION)
    energy, norm, passed = bessel_check(haar_coefficients(f, 12), f)
    return CheckResult("bessel_inequality", passed, f"energy {energy:.10g} <= norm {norm:.10g}")


def _solver_vs_brute_force(seed: int) -> CheckResult:
    worse, failed = 0, 0
    for k in range(5):
        inst = make_structured_instance(seed + k, 12, 2, 2)
        _, best = brute_force_signs(inst, SolverParams().beta)
        try:
            value = solve_signs(inst, SolverParams(seed=seed + k)).value
        except SolverFailure:
            failed += 1
            continue
        worse += value < best - 1e-12
    return CheckResult("solver_not_below_optimum", worse == 0 and failed <= 1,
                       f"{worse} of 5 instances beat the exhaustive optimum, {failed} exhausted retries")


def _martingale(seed: int) -> CheckResult:
    f = parse_function(STANDARD_FUNCTION)
    report = martingale_check(haar_coefficients(f, 6), RHRestrictor.unrestricted(6), 0.125, 20000, seed)
    return CheckResult("slope_identity", report.max_z <= 4.5, f"max z-score {report.max_z:.3g}")


def _constant_delta(seed: int) -> CheckResult:
    f = FunctionSpec.builtin("const", 0.3)
    table = haar_coefficients(f, 8)
    field = delta_field(f, table, RHRestrictor.unrestricted(8), 0.125, {0: np.linspace(0, 1, 33)}, 64, seed)
    worst = float(np.max(np.abs(field.delta[0])))
    return CheckResult("constant_delta_vanishes", worst == 0.0, f"max |Delta| = {worst:.3g}")


def _constant_pipeline(seed: int) -> CheckResult:
    config = ReductionConfig(depth=8, u_max=3, m_max=1, delta_min=2.0 ** -4, mc_samples=64, seed=seed)
    result = run_pipeline(FunctionSpec.builtin("const", 0.3), config)
    error = float(np.max(np.abs(result.phi.inv_breakpoints - result.phi.grid)))
    return CheckResult("constant_pipeline_identity", error == 0.0, f"max |Phi^-1(x) - x| = {error:.3g}")


CORE_CHECKS: List[Callable[[int], CheckResult]] = [
    _kernel_integral, _binary_decomposition, _identity_homeomorphism, _roundtrip_and_holder,
    _haar_constant, _bessel, _solver_vs_brute_force,
]
FULL_CHECKS: List[Callable[[int], CheckResult]] = CORE_CHECKS + [_martingale, _constant_delta, _constant_pipeline]


def run_suite(suite: str, seed: int = 0) -> List[CheckResult]:
    """
    Run every check of a suite.

    Args:
        suite: 'core' or 'full'
        seed: Seed shared by the randomized checks

    Returns:
        One CheckResult per check, in a fixed order
    """
    if suite not in SUITES:
        raise ValueError(f"Unknown suite '{suite}', expected one of {SUITES}")
    results = []
    for check in CORE_CHECKS if suite == "core" else FULL_CHECKS:
        result = check(seed)
        (logger.info if result.passed else logger.warning)(
            f"{result.name}: {'ok' if result.passed else 'FAILED'} ({result.detail})")
        results.append(result)
    return results
