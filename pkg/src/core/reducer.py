"""
Randomness reduction: from the fully random restrictor to one homeomorphism.

A reduction step estimates the correction fields Delta_i of every large cell,
turns their Dirichlet-kernel integrals into a sign instance, solves it and
halves each center interval on the chosen side. A stage repeats steps until
the centers are resolved to 2^-m_max and snaps them; the partition is then
refined and the scale shrinks by 5/8, until the scale or the depth runs out.

An ErrorLedger follows every (u, xi) across stages: the signed step errors,
the snapping term of each stage and the measured error of the cells that
enter the integration sets when the partition is refined.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from scipy import stats

from src.config.logging_config import setup_logger
from src.config.settings import (CALIBRATION_HEADROOM, DEFAULT_THREADS, DELTA_MIN, EVAL_GRID_DEPTH, GAMMA_INSTANCE,
                                 M_MAX, MAX_MAGNITUDE_CLASS, MC_SAMPLES, PIPELINE_DEPTH, PIPELINE_ETA,
                                 PRECISION_FRACTION, SPLIT_FACTOR, TELESCOPING_CONSTANT, U_MAX, XI_SUBSAMPLE_ABOVE)
from src.core.errors import AdmissibilityError, ContractError, DomainError, InvariantError, PrecisionError
from src.core.funcspace import (FunctionSpec, GridFunction, bernstein_globalize, cesaro_dirichlet_gap, eval_function,
                                fejer_remainder_bound, linear_exponential_weights, modulus_of_continuity, partial_sums,
                                sup_norm)
from src.core.haar import HaarTable, haar_coefficients
from src.core.homeo import DyadicHomeomorphism, build_psi_inverse, eval_forward, is_admissible, theta_from_tau
from src.core.rh import (CellMoments, RHRestrictor, block_functionals, cell_moments, coupled_difference,
                         dirichlet_coefficients, dirichlet_functional, dirichlet_weights, in_neighbourhood, locate,
                         phi_inverse_partition, quadrature_nodes, restrictor_to_dict, validate_type, y_cells)
from src.core.signsolver import (SignInstance, SolverParams, cyclic_offset, greedy_signs, hypothesis_bounds,
                                  solve_signs, verify_bound)

logger = setup_logger(__name__)

SCALE_EXPONENT = 44
TRUNCATION_EXPONENT = 22
AGREEMENT_FACTOR = 4.0
LEDGER_FIELDS = ["u", "xi", "cumulative", "bound", "step_sum", "low_scale_sum", "snapping", "corrections",
                 "correction_stderr", "telescoping_bound"]


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 63-bit sub-seed for a (seed, keys...) path."""
    state = np.random.SeedSequence([int(seed)] + [int(k) for k in keys]).generate_state(1, dtype=np.uint64)
    return int(state[0] >> np.uint64(1))


@dataclass
class ReductionConfig:
    depth: int = PIPELINE_DEPTH
    eta: float = PIPELINE_ETA
    u_max: int = U_MAX
    m_max: int = M_MAX
    delta_min: float = DELTA_MIN
    mc_samples: int = MC_SAMPLES
    seed: int = 0
    solver: SolverParams = field(default_factory=SolverParams)
    precision_fraction: float = PRECISION_FRACTION
    gamma: float = GAMMA_INSTANCE
    sign_strategy: str = "hierarchical"
    xi_subsample_above: int = XI_SUBSAMPLE_ABOVE
    threads: int = DEFAULT_THREADS
    c1_headroom: float = CALIBRATION_HEADROOM

    def __post_init__(self):
        if isinstance(self.solver, dict):
            self.solver = SolverParams.from_dict(self.solver)
        if not 1 <= self.u_max <= 30:
            raise DomainError(f"u_max must lie in 1..30, got {self.u_max}")
        if self.delta_min <= 2.0 ** (-self.depth + 2):
            raise DomainError(f"delta_min={self.delta_min} must exceed 2^-(depth-2) = {2.0 ** (-self.depth + 2)}")
        if self.m_max < 0 or self.mc_samples < 2 or self.eta <= 0:
            raise DomainError("m_max >= 0, mc_samples >= 2 and eta > 0 are required")
        if self.sign_strategy not in ("hierarchical", "greedy"):
            raise DomainError(f"Unknown sign strategy '{self.sign_strategy}'")
        if not self.c1_headroom >= 1.0:
            raise DomainError(f"c1_headroom must be at least 1, got {self.c1_headroom}")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["solver"] = self.solver.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ReductionConfig":
        return cls(**data)


@dataclass(frozen=True)
class Rescaling:
    """f is analysed as scale * (f - offset)."""

    offset: float
    scale: float

    def apply(self, f: FunctionSpec) -> FunctionSpec:
        return f.rescaled(self.scale, -self.scale * self.offset)


@dataclass
class StepReport:
    stage: int
    m: int
    delta: float
    cells: int
    entries: int
    solver_constant: float
    c1: float
    log_m: float
    mc_budget: float
    rows: List[dict] = field(default_factory=list)
    truncation_budget: Optional[float] = None
    cumulative_error: Optional[float] = None

    @property
    def max_error(self) -> float:
        return max((row["error"] for row in self.rows), default=0.0)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["max_error"] = self.max_error
        return data


@dataclass
class Assembly:
    instance: SignInstance
    c1: float
    moments: Dict[int, CellMoments]
    intervals: List[tuple]
    cells: List[int]


@dataclass
class StepOutcome:
    restrictor: RHRestrictor
    report: StepReport
    assembly: Assembly
    signs: np.ndarray


@dataclass(frozen=True)
class CrossCheck:
    reported: float
    reported_stderr: float
    direct: float
    direct_stderr: float

    @property
    def agrees(self) -> bool:
        tolerance = AGREEMENT_FACTOR * math.hypot(self.reported_stderr, self.direct_stderr)
        return abs(self.reported - self.direct) <= tolerance


@dataclass
class Calibration:
    """C1 of a run of steps: set by the first step with a nonzero entry, then fixed."""

    headroom: float = CALIBRATION_HEADROOM
    c1: Optional[float] = None
    calibrated_at: Optional[tuple] = None  # (m, delta) of the calibrating step


@dataclass
class LedgerEntry:
    u: int
    xi: float
    telescoping_bound: float
    step_sum: float = 0.0
    low_scale_sum: float = 0.0
    snapping: float = 0.0
    corrections: float = 0.0
    correction_stderr: float = 0.0
    signed: Dict[int, float] = field(default_factory=dict)

    @property
    def cumulative(self) -> float:
        """Worst accumulated signed error over the verification orders, plus snapping and corrections."""
        drift = max((abs(value) for value in self.signed.values()), default=0.0)
        return drift + self.snapping + self.corrections

    @property
    def bound(self) -> float:
        return self.step_sum + self.snapping + self.corrections

    def to_dict(self) -> dict:
        return {
            "u": self.u,
            "xi": self.xi,
            "cumulative": self.cumulative,
            "bound": self.bound,
            "step_sum": self.step_sum,
            "low_scale_sum": self.low_scale_sum,
            "snapping": self.snapping,
            "corrections": self.corrections,
            "correction_stderr": self.correction_stderr,
            "telescoping_bound": self.telescoping_bound,
        }


class ErrorLedger:
    """
    Cross-stage error accounting for every u <= u_max and xi in 2^{-u-2} Z.

    Step errors are accumulated with their sign per verification order r;
    the bound is the sum over steps of the worst |error| over r at (u, xi).
    Steps at scale 2^u <= 1/delta are also summed on their own, to be read
    next to the telescoping bound omega_f(C 2^{-4u/5}) of the center values.
    """

    def __init__(self, f: FunctionSpec, u_max: int, constant: float = TELESCOPING_CONSTANT):
        self.entries: Dict[tuple, LedgerEntry] = {}
        for u in range(1, u_max + 1):
            telescoping = modulus_of_continuity(f, min(constant * 2.0 ** (-0.8 * u), 0.5))
            for xi in np.arange(2 ** (u + 2)) / 2 ** (u + 2):
                self.entries[(u, float(xi))] = LedgerEntry(u, float(xi), telescoping)

    def _entry(self, u: int, xi: float) -> LedgerEntry:
        entry = self.entries.get((int(u), float(xi)))
        if entry is None:
            raise ContractError(f"No ledger entry for u={u} xi={xi}")
        return entry

    def record_step(self, report: StepReport) -> None:
        worst: Dict[tuple, float] = {}
        for row in report.rows:
            entry = self._entry(row["u"], row["xi"])
            entry.signed[row["r"]] = entry.signed.get(row["r"], 0.0) + row["signed"]
            key = (entry.u, entry.xi)
            worst[key] = max(worst.get(key, 0.0), row["error"])
        for key, error in worst.items():
            entry = self.entries[key]
            entry.step_sum += error
            if 2 ** entry.u * report.delta <= 1.0:
                entry.low_scale_sum += error

    def record_snapping(self, budget: float) -> None:
        for entry in self.entries.values():
            entry.snapping += budget

    def record_correction(self, u: int, xi: float, value: float, stderr: float = 0.0) -> None:
        entry = self._entry(u, xi)
        entry.corrections += abs(value)
        entry.correction_stderr += stderr

    def max_cumulative(self) -> float:
        return max((entry.cumulative for entry in self.entries.values()), default=0.0)

    def check(self) -> None:
        """
        Raises:
            InvariantError: some cumulative error exceeds its bound
        """
        for entry in self.entries.values():
            if entry.cumulative > entry.bound * (1.0 + 1e-9) + 1e-12:
                raise InvariantError(
                    f"Cumulative error {entry.cumulative:.6g} at u={entry.u} xi={entry.xi:.6g} "
                    f"exceeds the accumulated bound {entry.bound:.6g}"
                )

    def rows(self) -> List[dict]:
        return [self.entries[key].to_dict() for key in sorted(self.entries)]


@dataclass
class PipelineResult:
    phi: DyadicHomeomorphism
    reports: List[StepReport]
    rescaling: Rescaling
    restrictor: RHRestrictor
    stages: int
    ledger: Optional[ErrorLedger] = None


def magnitude_class_w0(u: int, delta: float) -> int:
    if 2 ** u * delta <= 1.0:
        return max(1, int(math.floor(1.0 / (delta * 2 ** (u + 1)))))
    return max(1, int(math.floor((delta * 2 ** u) ** (1.0 / SCALE_EXPONENT))))


def magnitude_class_block(u: int, s: int, delta: float) -> int:
    if 2 ** u * delta <= 1.0:
        return max(1, int(math.floor(1.0 / (delta * 2 ** s))))
    return max(1, int(math.floor(max(1.0 / (delta * 2 ** s), (delta * 2 ** u) ** (1.0 / SCALE_EXPONENT)))))


def smoothness_class(f: FunctionSpec, delta: float) -> int:
    """floor(omega_f(delta^{4/5})^{-1/5}), capped."""
    omega = modulus_of_continuity(f, min(delta ** 0.8, 0.5))
    if omega <= 0.0:
        return MAX_MAGNITUDE_CLASS
    return int(min(math.floor(omega ** -0.2), MAX_MAGNITUDE_CLASS))


def xi_grid(u: int, cells: int, subsample_above: int = XI_SUBSAMPLE_ABOVE) -> np.ndarray:
    """(1/U) Z in [0, 1) with U the smallest power of 2 >= max(2^{u+2}, cells)."""
    size = 2 ** max(u + 2, int(math.ceil(math.log2(max(cells, 1)))))
    stride = 2 ** max(u - subsample_above, 0)
    return np.arange(0, size, stride) / size


def binary_blocks(r: int, u: int) -> List[tuple]:
    """(t, s) blocks with D_r = D_{2^{u-1}} + sum of the +- blocks, for 2^{u-1} <= r < 2^u."""
    if not 2 ** (u - 1) <= r < 2 ** u:
        raise ContractError(f"r={r} is not in [2^{u - 1}, 2^{u})")
    blocks, t = [], 2 ** (u - 1)
    for s in range(u - 2, -1, -1):
        if (r - 2 ** (u - 1)) >> s & 1:
            blocks.append((t, s))
            t += 2 ** s
    return blocks


def _entry_table(u_range: Sequence[int], intervals: List[tuple], delta: float, b_smooth: int, top: int,
                 subsample_above: int) -> tuple:
    rows, meta = [], []
    for u in u_range:
        for xi in xi_grid(u, len(intervals), subsample_above):
            l = int(locate(intervals, xi))
            rows.append(dirichlet_functional(top, 2 ** u, xi))
            meta.append((u, l, max(magnitude_class_w0(u, delta), b_smooth), f"w0 u={u} xi={xi:.6g}"))
            for s in range(u - 1):
                b = max(magnitude_class_block(u, s, delta), b_smooth)
                for t in range(2 ** (u - 1), 2 ** u, 2 ** (s + 1)):
                    c_re, c_im = block_functionals(top, t, s, xi)
                    rows.extend([c_re, c_im])
                    meta.append((u, l, b, f"re wplus u={u} s={s} t={t} xi={xi:.6g}"))
                    meta.append((u, l, b, f"im wplus u={u} s={s} t={t} xi={xi:.6g}"))
    return np.array(rows), meta


def assemble_instance(r: RHRestrictor, f: FunctionSpec, table: HaarTable, eta: float, u_range: Sequence[int],
                      config: ReductionConfig, seed: Optional[int] = None,
                      moments: Optional[Dict[int, CellMoments]] = None,
                      calibration: Optional[Calibration] = None) -> Assembly:
    """
    Build the sign instance of one reduction step.

    Entries enumerate w0 for every (xi, u) and the real and imaginary parts of
    wplus for every (xi, u, s, t); wminus is the conjugate of wplus and adds no
    new magnitudes. Values are w 2^{m/44} / C1. Without a calibration C1 is the
    smallest constant meeting every magnitude bound; with one, the first step
    holding a nonzero entry fixes C1 at headroom times that constant and later
    steps reuse it.

    Raises:
        ContractError: no cell is large enough to carry a correction
        PrecisionError: Monte-Carlo noise of an entry exceeds the configured fraction of its bound
            or an entry outgrows the calibrated C1
    """
    intervals = phi_inverse_partition(r, table, eta)
    cells = y_cells(r, intervals)
    if not cells:
        raise ContractError("Every center is degenerate; nothing to reduce")
    if moments is None:
        moments = cell_moments(f, table, r, eta, max(u_range), config.mc_samples,
                               config.seed if seed is None else seed, config.threads)
    top = moments[cells[0]].top
    if top < 2 ** max(u_range):
        raise ContractError(f"Moments reach frequency {top}, entries need {2 ** max(u_range)}")
    n = len(intervals)
    functionals, meta = _entry_table(u_range, intervals, r.delta, smoothness_class(f, r.delta), top,
                                     config.xi_subsample_above)
    us = np.array([u for u, _, _, _ in meta])
    locations = np.array([l for _, l, _, _ in meta], dtype=int)
    classes = np.array([b for _, _, b, _ in meta], dtype=int)

    values = np.zeros((len(meta), n))
    noise = np.zeros((len(meta), n))
    high = 2.0 ** us * r.delta > 1.0
    for i in cells:
        cell = moments[i]
        values[:, i] = functionals @ cell.mean
        noise[:, i] = np.sqrt(np.maximum(np.sum((functionals @ cell.covariance) * functionals, axis=1), 0.0)
                              / cell.samples)
        near = np.abs(cyclic_offset(i, locations, n)) <= 1
        values[high & near, i] = 0.0
        noise[high & near, i] = 0.0

    pairs, counts = np.unique(np.stack([locations, classes], axis=1), axis=0, return_counts=True)
    log_m = max(math.log(2.0), max(math.log(c) - config.gamma * math.log(b) for (_, b), c in zip(pairs, counts)))
    instance = SignInstance(n, values, locations, classes, config.gamma, log_m, config.solver.alpha,
                            labels=[label for _, _, _, label in meta])
    bounds = hypothesis_bounds(instance)
    scale = 2.0 ** (r.m / SCALE_EXPONENT)
    ratios = np.abs(values) * scale / bounds
    peak = float(ratios.max()) if ratios.size else 0.0
    c1 = _calibrated_c1(calibration, peak, ratios, meta, r)
    if c1 > 0.0:
        excess = noise * scale / c1 - config.precision_fraction * bounds
        j, i = np.unravel_index(int(np.argmax(excess)), excess.shape)
        if excess[j, i] > 0.0:
            label = f"{meta[j][3]} cell={i}"
            raise PrecisionError(
                f"Monte-Carlo stderr of entry '{label}' exceeds {config.precision_fraction} of its bound; "
                f"raise the sample count", entry=label,
            )
        instance.values = values * scale / c1
    logger.info(f"Assembled {instance.size} entries over {n} cells ({len(cells)} active), C1={c1:.4g}")
    return Assembly(instance, c1, moments, intervals, cells)


def _calibrated_c1(calibration: Optional[Calibration], peak: float, ratios: np.ndarray, meta: list,
                   r: RHRestrictor) -> float:
    if calibration is None:
        return peak
    if calibration.c1 is None:
        if peak > 0.0:
            calibration.c1 = calibration.headroom * peak
            calibration.calibrated_at = (r.m, r.delta)
            logger.info(f"C1 calibrated to {calibration.c1:.4g} at m={r.m} (peak ratio {peak:.4g})")
        return calibration.c1 or 0.0
    if peak > calibration.c1:
        j, i = np.unravel_index(int(np.argmax(ratios)), ratios.shape)
        label = f"{meta[j][3]} cell={i}"
        raise PrecisionError(
            f"Entry '{label}' needs C1 >= {peak:.4g} but C1 was calibrated to {calibration.c1:.4g} "
            f"at m={calibration.calibrated_at[0]}; raise c1_headroom", entry=label,
        )
    return calibration.c1


def _choose_signs(inst: SignInstance, config: ReductionConfig, seed: int) -> np.ndarray:
    if config.sign_strategy == "greedy":
        return greedy_signs(inst, config.solver.beta)
    params = replace(config.solver, seed=seed, threads=config.threads)
    return solve_signs(inst, params).signs


def verification_orders(u: int) -> List[int]:
    low, high = 2 ** (u - 1), 2 ** u - 1
    return sorted({low, (low + high) // 2, high})


def _signed_error(assembly: Assembly, signs: np.ndarray, delta: float, u: int, order: int, xis: np.ndarray) -> tuple:
    """sum over included cells of eps_i int Delta_i D_r(x - xi), with summed stderr."""
    n = len(assembly.intervals)
    locations = locate(assembly.intervals, xis)
    total = np.zeros(len(xis))
    budget = np.zeros(len(xis))
    for i in assembly.cells:
        cell = assembly.moments[i]
        functionals = np.array([dirichlet_functional(cell.top, order, xi) for xi in xis])
        values = functionals @ cell.mean
        noise = np.sqrt(np.maximum(np.sum((functionals @ cell.covariance) * functionals, axis=1), 0.0)
                        / cell.samples)
        if 2 ** u * delta > 1.0:
            keep = np.abs(cyclic_offset(i, locations, n)) > 1
            values, noise = values * keep, noise * keep
        total += signs[i] * values
        budget += noise
    return total, budget


def reduce_step(r: RHRestrictor, f: FunctionSpec, table: HaarTable, config: ReductionConfig,
                stage: int = 0, calibration: Optional[Calibration] = None) -> StepOutcome:
    """
    One halving of every large cell's center interval.

    Args:
        r: Restrictor of type (f, delta) with value m
        f: Function (already rescaled)
        table: Haar table of f
        config: Reduction knobs
        stage: Outer stage index, used for seeding and reporting
        calibration: C1 shared with the other steps of the stage; None calibrates this step alone

    Returns:
        StepOutcome holding J (value m + 1) and the StepReport
    """
    violations = validate_type(r, table, config.eta)
    if violations:
        raise InvariantError(f"Restrictor is not of type (f, {r.delta:.6g}): {violations[0]}")
    u_range = list(range(1, config.u_max + 1))
    assembly = assemble_instance(r, f, table, config.eta, u_range, config,
                                 seed=derive_seed(config.seed, stage, r.m + 1, 0), calibration=calibration)
    signs = _choose_signs(assembly.instance, config, derive_seed(config.seed, stage, r.m + 1, 1))
    constant, _ = verify_bound(assembly.instance, signs, config.solver.beta)

    updates = {}
    for i in assembly.cells:
        d = r.centers[i]
        a, b = r.interval(d)
        middle = 0.5 * (a + b)
        updates[d] = (middle, b) if signs[i] > 0 else (a, middle)
    reduced = r.with_bounds(updates).with_type(m=r.m + 1)

    rows, budget = [], 0.0
    for u in u_range:
        xis = np.arange(2 ** (u + 2)) / 2 ** (u + 2)
        for order in verification_orders(u):
            total, noise = _signed_error(assembly, signs, r.delta, u, order, xis)
            budget = max(budget, float(noise.max()))
            rows.extend({"u": u, "r": order, "xi": float(xi), "error": float(abs(v)), "signed": float(v),
                         "budget": float(e)} for xi, v, e in zip(xis, total, noise))
    report = StepReport(stage, r.m, r.delta, len(assembly.cells), assembly.instance.size, constant,
                        assembly.c1, assembly.instance.log_m, budget, rows)
    logger.info(f"Stage {stage} step m={r.m}: {report.cells} cells, solver constant {constant:.4g}, "
                f"max error {report.max_error:.3g} (MC budget {budget:.3g})")
    return StepOutcome(reduced, report, assembly, signs)


def cross_check_step(f: FunctionSpec, table: HaarTable, previous: RHRestrictor, outcome: StepOutcome, eta: float,
                     u: int, order: int, xi: float, samples: int, seed: int,
                     threads: int = DEFAULT_THREADS) -> CrossCheck:
    """
    Re-estimate int_{E_xi} (E f o phi_J - E f o phi_I) D_r(x - xi) directly with
    fresh coupled draws (one uniform per dyadic drives both restrictors) and
    compare it with the value implied by the Delta moments.
    """
    assembly, current = outcome.assembly, outcome.restrictor
    n = len(assembly.intervals)
    location = int(locate(assembly.intervals, xi))
    included = [i for i in assembly.cells
                if not (2 ** u * previous.delta > 1.0 and in_neighbourhood(i, location, n))]
    reported, reported_noise = _signed_error(assembly, outcome.signs, previous.delta, u, order, np.array([xi]))

    nodes = [quadrature_nodes(assembly.intervals[i], 2 ** u) for i in included]
    xs = np.concatenate(nodes) if nodes else np.empty(0)
    weights = np.concatenate([dirichlet_weights(x, order, xi) for x in nodes]) if nodes else np.empty(0)
    direct, direct_noise = coupled_difference(f, table, previous, current, eta, xs, weights, samples, seed, threads)
    check = CrossCheck(float(reported[0]), float(reported_noise[0]), float(direct[0]), float(direct_noise[0]))
    logger.info(f"Cross-check u={u} r={order} xi={xi:.4g}: reported {check.reported:.4g} "
                f"vs direct {check.direct:.4g} ({'agree' if check.agrees else 'DISAGREE'})")
    return check


def snap_restrictor(r: RHRestrictor, points: Optional[Sequence] = None) -> RHRestrictor:
    """Collapse every (or every listed) non-degenerate entry to its midpoint."""
    if points is None:
        middle = r.midpoints
        return RHRestrictor(r.depth, middle, middle, r.partition, r.m, r.delta)
    updates = {}
    for d in points:
        a, b = r.interval(d)
        updates[d] = (0.5 * (a + b), 0.5 * (a + b))
    return r.with_bounds(updates)


def decay_slope(reports: Sequence[StepReport]) -> float:
    """Least-squares slope of log(max step error) against m; NaN with fewer than two usable steps."""
    points = [(report.m, math.log(report.max_error)) for report in reports if report.max_error > 0.0]
    if len(points) < 2 or len({m for m, _ in points}) < 2:
        return float("nan")
    ms, logs = zip(*points)
    return float(stats.linregress(ms, logs).slope)


def collapse_stage(r: RHRestrictor, f: FunctionSpec, table: HaarTable, config: ReductionConfig,
                   stage: int = 0, ledger: Optional[ErrorLedger] = None,
                   calibration: Optional[Calibration] = None) -> tuple:
    """
    Reduce until the centers reach length 2^-m_max, then snap them to midpoints.

    Every step of the stage shares one C1 calibration. With a ledger, each
    step's signed errors and the stage's snapping term are recorded, each
    report carries the worst cumulative error so far, and the accumulated
    bound is checked once the centers are snapped.

    Returns:
        (restrictor with degenerate large-cell centers, list of StepReport)

    Raises:
        InvariantError: a cumulative error exceeds its accumulated bound
    """
    intervals = phi_inverse_partition(r, table, config.eta)
    cells = y_cells(r, intervals)
    if not cells:
        logger.info(f"Stage {stage}: no cell exceeds delta/2, nothing to collapse")
        return r, []
    if calibration is None:
        calibration = Calibration(config.c1_headroom)
    reports = []
    while r.m < config.m_max:
        outcome = reduce_step(r, f, table, config, stage, calibration)
        if ledger is not None:
            ledger.record_step(outcome.report)
            outcome.report.cumulative_error = ledger.max_cumulative()
        reports.append(outcome.report)
        r = outcome.restrictor
    truncation = (2.0 ** -config.m_max) ** (1.0 / TRUNCATION_EXPONENT)
    for report in reports:
        report.truncation_budget = truncation
    if ledger is not None:
        ledger.record_snapping(truncation)
        ledger.check()
    collapsed = snap_restrictor(r, [r.centers[i] for i in cells])
    logger.info(f"Stage {stage} collapsed {len(cells)} centers after {len(reports)} steps, "
                f"decay slope {decay_slope(reports):.3g}, truncation budget {truncation:.3g}")
    return collapsed, reports


def split_partition(r: RHRestrictor, f: FunctionSpec, table: HaarTable, eta: float) -> RHRestrictor:
    """
    Split every cell with |V| > delta/2 at its center and shrink delta by 5/8.

    Raises:
        ContractError: a splitting center is not degenerate
        InvariantError: a new preimage width leaves [delta'/4, delta']
    """
    intervals = phi_inverse_partition(r, table, eta)
    cells = set(y_cells(r, intervals))
    partition = []
    for i, cell in enumerate(r.partition):
        if i in cells:
            if not r.is_degenerate(cell.middle):
                raise ContractError(f"Center of cell {i} must be degenerate before splitting")
            partition.extend(cell.children)
        else:
            partition.append(cell)
    delta = SPLIT_FACTOR * r.delta
    refined = r.with_type(partition=partition, m=-1, delta=delta)
    for a, b in phi_inverse_partition(refined, table, eta):
        if not 0.25 * delta * (1 - 1e-12) <= b - a <= delta * (1 + 1e-12):
            raise InvariantError(f"Preimage width {b - a:.6g} leaves [{delta / 4:.6g}, {delta:.6g}] after splitting")
    logger.info(f"Split {len(cells)} cells: {len(partition)} cells at delta={delta:.6g}")
    return refined


def e_set_corrections(f: FunctionSpec, table: HaarTable, before: RHRestrictor, after: RHRestrictor,
                      config: ReductionConfig, stage: int = 0) -> Dict[tuple, tuple]:
    """
    Measured error of the cells that join the integration sets E_xi when the partition is refined.

    At scale 2^u > 1/delta the step errors leave out the cells next to xi.
    Refining shrinks that neighbourhood, or drops it once 2^u <= 1/delta',
    and every new cell that joins contributes
    int (E f o phi_after - E f o phi_0) D_r(x - xi) dx with phi_0 unrestricted.
    One coupled Monte-Carlo run covers every (u, xi, r); the largest |value|
    over the verification orders is kept.

    Args:
        f: Function (already rescaled)
        table: Haar table of f
        before: Collapsed restrictor of the finished stage
        after: The same restrictor on the refined partition
        config: Reduction knobs
        stage: Index of the finished stage, used for seeding

    Returns:
        (value, stderr) keyed by (u, xi); keys without joining cells are absent
    """
    old = phi_inverse_partition(before, table, config.eta)
    new = phi_inverse_partition(after, table, config.eta)
    parents = locate(old, np.array([0.5 * (a + b) for a, b in new]))
    top = 2 ** config.u_max
    nodes = [quadrature_nodes(cell, top) for cell in new]
    offsets = np.cumsum([0] + [len(x) for x in nodes])
    exponentials = [linear_exponential_weights(x, np.arange(top + 1)) for x in nodes]

    columns, keys = [], []
    for u in range(1, config.u_max + 1):
        if 2 ** u * before.delta <= 1.0:
            continue
        still_high = 2 ** u * after.delta > 1.0
        for xi in np.arange(2 ** (u + 2)) / 2 ** (u + 2):
            l_old, l_new = int(locate(old, xi)), int(locate(new, xi))
            joining = [j for j in range(len(new))
                       if in_neighbourhood(int(parents[j]), l_old, len(old))
                       and not (still_high and in_neighbourhood(j, l_new, len(new)))]
            if not joining:
                continue
            for order in verification_orders(u):
                coefficients = dirichlet_coefficients(order, xi)
                column = np.zeros(offsets[-1])
                for j in joining:
                    column[offsets[j]:offsets[j + 1]] = (exponentials[j][:, :order + 1] @ coefficients).real
                columns.append(column)
                keys.append((u, float(xi)))
    if not columns:
        return {}

    mean, stderr = coupled_difference(f, table, RHRestrictor.unrestricted(after.depth), after, config.eta,
                                      np.concatenate(nodes), np.stack(columns, axis=1), config.mc_samples,
                                      derive_seed(config.seed, stage, 0, 2), config.threads)
    corrections: Dict[tuple, tuple] = {}
    for key, value, se in zip(keys, mean, stderr):
        if key not in corrections or abs(value) > abs(corrections[key][0]):
            corrections[key] = (float(value), float(se))
    worst = max(abs(value) for value, _ in corrections.values())
    logger.info(f"Stage {stage}: {len(corrections)} (u, xi) pairs gain cells on refinement, "
                f"largest correction {worst:.3g}")
    return corrections


def rescale_function(f: FunctionSpec) -> tuple:
    """Center f at its midrange and shrink it to sup norm 1/2 when needed."""
    low, high = sup_norm(f)
    offset = 0.5 * (low + high)
    half_range = 0.5 * (high - low)
    scale = 1.0 if half_range <= 0.5 else 0.5 / half_range
    rescaling = Rescaling(offset, scale)
    return rescaling.apply(f), rescaling


def final_homeomorphism(r: RHRestrictor, table: HaarTable, eta: float) -> DyadicHomeomorphism:
    """The homeomorphism of a fully degenerate restrictor."""
    if not r.fully_degenerate():
        raise ContractError("Only a fully degenerate restrictor determines a single homeomorphism")
    return build_psi_inverse(theta_from_tau(table, r.lower, eta), r.depth)


def run_pipeline(f: FunctionSpec, config: ReductionConfig,
                 out_dir: Optional[Union[str, Path]] = None) -> PipelineResult:
    """
    Drive stages from the trivial partition until delta or the depth runs out.

    Args:
        f: Function in caller units
        config: Reduction knobs
        out_dir: Where partial results go if a stage fails

    Returns:
        PipelineResult with Phi, every StepReport, the error ledger and the rescaling used
    """
    scaled, rescaling = rescale_function(f)
    table = haar_coefficients(scaled, config.depth)
    if not is_admissible(table, config.eta):
        raise AdmissibilityError(f"eta={config.eta} is not admissible: eta * sup q = {config.eta * table.max_q():.4g}")
    r = RHRestrictor.unrestricted(config.depth)
    ledger = ErrorLedger(scaled, config.u_max)
    reports: List[StepReport] = []
    stage = 0
    try:
        while True:
            r, stage_reports = collapse_stage(r, scaled, table, config, stage, ledger)
            reports.extend(stage_reports)
            finest = max(cell.n for cell in r.partition)
            if r.delta * SPLIT_FACTOR < config.delta_min or finest >= config.depth - 2:
                break
            refined = split_partition(r, scaled, table, config.eta)
            for (u, xi), (value, stderr) in e_set_corrections(scaled, table, r, refined, config, stage).items():
                ledger.record_correction(u, xi, value, stderr)
            ledger.check()
            r = refined
            stage += 1
        final = snap_restrictor(r)
        phi = final_homeomorphism(final, table, config.eta)
    except Exception as e:
        logger.error(f"Pipeline failed at stage {stage}: {str(e)}")
        if out_dir is not None:
            persist_partial(Path(out_dir), r, reports, ledger)
        raise
    _log_ledger(ledger)
    logger.info(f"Pipeline finished after {stage + 1} stages and {len(reports)} steps")
    return PipelineResult(phi, reports, rescaling, final, stage + 1, ledger)


def _log_ledger(ledger: ErrorLedger) -> None:
    rows = ledger.rows()
    for u in sorted({row["u"] for row in rows}):
        level = [row for row in rows if row["u"] == u]
        low = max(row["low_scale_sum"] + row["corrections"] for row in level)
        logger.info(f"u={u}: cumulative error <= {max(row['cumulative'] for row in level):.3g} "
                    f"(bound {max(row['bound'] for row in level):.3g}), low-scale steps plus corrections {low:.3g}, "
                    f"telescoping term <= {level[0]['telescoping_bound']:.3g}")


def persist_partial(out_dir: Path, r: RHRestrictor, reports: Sequence[StepReport],
                    ledger: Optional[ErrorLedger] = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "partial_restrictor.json").write_text(json.dumps(restrictor_to_dict(r), indent=2), encoding="utf-8")
    write_reports_json(reports, out_dir / "partial_reports.json")
    if ledger is not None:
        write_ledger_csv(ledger, out_dir / "partial_ledger.csv")
    logger.info(f"Partial results written to {out_dir}")


def evaluate_result(f: FunctionSpec, phi: DyadicHomeomorphism, u_max: int,
                    grid_exp: int = EVAL_GRID_DEPTH) -> List[dict]:
    """
    max over xi in 2^{-u-2} Z of |S_r(f o Phi)(xi) - f(Phi(xi))| for every u <= u_max
    and a few r in [2^{u-1}, 2^u), next to the same deviation without a change of variable.

    The sup bound splits S_r g - g = (S_r g - F_r g) + (F_r g - g) for g = f o Phi:
    the first part is a trigonometric polynomial of degree r, globalized from
    its grid maximum by Bernstein's inequality, and the second is bounded by
    fejer_remainder_bound.
    """
    nodes = np.linspace(0.0, 1.0, 2 ** grid_exp + 1)
    composed = GridFunction(grid_exp, eval_function(f, eval_forward(phi, nodes)))
    baseline = GridFunction(grid_exp, eval_function(f, nodes))
    rows = []
    for u in range(1, u_max + 1):
        xis = np.arange(2 ** (u + 2)) / 2 ** (u + 2)
        orders = verification_orders(u)
        exact = eval_function(f, eval_forward(phi, xis))
        plain = eval_function(f, xis)
        sums = partial_sums(composed, orders, xis)
        base_sums = partial_sums(baseline, orders, xis)
        for order in orders:
            gap = float(np.max(cesaro_dirichlet_gap(composed, order, xis)))
            rows.append({
                "u": u,
                "r": order,
                "xi_max_dev": float(np.max(np.abs(sums[order] - exact))),
                "bernstein_bound": bernstein_globalize(gap, order, u) + fejer_remainder_bound(composed, order),
                "baseline_dev": float(np.max(np.abs(base_sums[order] - plain))),
            })
    return rows


def improvement_factor(rows: Sequence[dict]) -> float:
    """Baseline over achieved deviation at the top u (inf when the achieved one is zero)."""
    top = max(row["u"] for row in rows)
    achieved = max(row["xi_max_dev"] for row in rows if row["u"] == top)
    base = max(row["baseline_dev"] for row in rows if row["u"] == top)
    return math.inf if achieved == 0.0 else base / achieved


def write_reports_json(reports: Sequence[StepReport], path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps([report.to_dict() for report in reports], indent=2), encoding="utf-8")


def write_evaluation_csv(rows: Sequence[dict], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=["u", "r", "xi_max_dev", "bernstein_bound", "baseline_dev"])
        writer.writeheader()
        for row in rows:
            writer.writerow({key: (repr(value) if isinstance(value, float) else value) for key, value in row.items()})


def write_ledger_csv(ledger: ErrorLedger, path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=LEDGER_FIELDS)
        writer.writeheader()
        for row in ledger.rows():
            writer.writerow({key: (repr(value) if isinstance(value, float) else value) for key, value in row.items()})
