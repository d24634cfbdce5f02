"""
Dyadic homeomorphisms psi_{theta,n} of [0, 1].

psi^{-1} is built level by level: at every odd k 2^-n it splits the gap left by
the previous level at the fraction theta(k 2^-n), and is linear in between.
psi itself is evaluated by exact inversion of that piecewise-linear map.
"""

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import numpy as np

from src.config.logging_config import setup_logger
from src.config.settings import (ADMISSIBLE_SPREAD, DERIVATIVE_CONSTANT, HOLDER_TOLERANCE,
                                 THETA_MAX, THETA_MIN)
from src.core.errors import AdmissibilityError, ContractError, DomainError, InvariantError
from src.core.haar import DyadicInterval, DyadicMap, DyadicRational, HaarTable, potential_cells

logger = setup_logger(__name__)

HOLDER_PAIR_DEPTH = 8


class ThetaMap(DyadicMap):
    """Split fractions theta(d) in [1/4, 3/4] for every dyadic d of rank <= depth."""

    def __init__(self, depth: int, values):
        super().__init__(depth, values)
        if self.values.size and (self.values.min() < THETA_MIN or self.values.max() > THETA_MAX):
            bad = int(np.argmax((self.values < THETA_MIN) | (self.values > THETA_MAX)))
            d = DyadicRational.from_index(bad)
            raise InvariantError(f"theta({d.k}/2^{d.n}) = {self.values[bad]} lies outside [1/4, 3/4]")

    @classmethod
    def midpoint(cls, depth: int) -> "ThetaMap":
        return cls.filled(depth, 0.5)

    def __repr__(self) -> str:
        return f"ThetaMap(depth={self.depth})"


class DyadicHomeomorphism:
    """Increasing piecewise-linear map of [0, 1] stored through psi^{-1}(k 2^-depth)."""

    def __init__(self, depth: int, inv_breakpoints: Union[Sequence[float], np.ndarray]):
        breakpoints = np.array(inv_breakpoints, dtype=float)
        if breakpoints.shape != (2 ** depth + 1,):
            raise InvariantError(f"Depth {depth} needs {2 ** depth + 1} breakpoints, got {breakpoints.shape}")
        if breakpoints[0] != 0.0 or breakpoints[-1] != 1.0:
            raise InvariantError("Breakpoints must start at 0 and end at 1")
        if np.any(np.diff(breakpoints) <= 0.0):
            raise InvariantError("Breakpoints are not strictly increasing")
        breakpoints.flags.writeable = False
        self.depth = depth
        self.inv_breakpoints = breakpoints

    @classmethod
    def identity(cls, depth: int = 0) -> "DyadicHomeomorphism":
        return cls(depth, np.linspace(0.0, 1.0, 2 ** depth + 1))

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, 2 ** self.depth + 1)

    def eval_inverse(self, x):
        return eval_inverse(self, x)

    def eval_forward(self, y):
        return eval_forward(self, y)

    def __eq__(self, other) -> bool:
        return (isinstance(other, DyadicHomeomorphism) and self.depth == other.depth
                and np.array_equal(self.inv_breakpoints, other.inv_breakpoints))

    def __repr__(self) -> str:
        return f"DyadicHomeomorphism(depth={self.depth})"


@dataclass(frozen=True)
class HolderReport:
    passed: bool
    worst_lower_ratio: float
    worst_upper_ratio: float
    first_failing_level: Optional[int]
    pairwise_passed: Optional[bool] = None


@dataclass(frozen=True)
class DerivativeBoundReport:
    passed: bool
    constant: float
    worst_excess: float


def refine_levels(breakpoints: np.ndarray, theta_levels) -> np.ndarray:
    """
    Run the splitting recursion on a batch of breakpoint rows.

    Args:
        breakpoints: Array of shape (..., 2) or a coarser level of shape (..., 2^j + 1)
        theta_levels: Iterable of theta arrays, one per further level, each of
            shape (..., number of gaps)

    Returns:
        Breakpoints after all levels
    """
    current = np.asarray(breakpoints, dtype=float)
    for theta in theta_levels:
        refined = np.empty(current.shape[:-1] + (2 * current.shape[-1] - 1,))
        refined[..., 0::2] = current
        refined[..., 1::2] = current[..., :-1] + theta * np.diff(current, axis=-1)
        current = refined
    return current


def build_psi_inverse(theta: DyadicMap, n: int) -> DyadicHomeomorphism:
    """
    Build psi^{-1}_{theta,n} from the split fractions.

    Args:
        theta: Split fractions of depth at least n
        n: Depth of the homeomorphism

    Returns:
        DyadicHomeomorphism with 2^n + 1 breakpoints

    Raises:
        InvariantError: a theta value lies outside [1/4, 3/4]
    """
    if n > theta.depth:
        raise ContractError(f"Depth {n} exceeds theta depth {theta.depth}")
    if not isinstance(theta, ThetaMap):
        theta = ThetaMap(theta.depth, theta.values)
    breakpoints = refine_levels(np.array([0.0, 1.0]), (theta.level(j) for j in range(1, n + 1)))
    return DyadicHomeomorphism(n, breakpoints)


def eval_inverse(h: DyadicHomeomorphism, x):
    """psi^{-1}(x) by linear interpolation between breakpoints."""
    points = np.asarray(x, dtype=float)
    if np.any(points < 0.0) or np.any(points > 1.0):
        raise DomainError("psi^{-1} is defined on [0, 1]")
    values = np.interp(points, h.grid, h.inv_breakpoints)
    return float(values) if np.ndim(x) == 0 else values


def eval_forward(h: DyadicHomeomorphism, y):
    """psi(y): locate the breakpoint cell by binary search, then solve the linear piece."""
    points = np.asarray(y, dtype=float)
    if np.any(points < 0.0) or np.any(points > 1.0):
        raise DomainError("psi is defined on [0, 1]")
    breakpoints = h.inv_breakpoints
    cells = np.clip(np.searchsorted(breakpoints, points, side="right") - 1, 0, 2 ** h.depth - 1)
    left = breakpoints[cells]
    fraction = (points - left) / (breakpoints[cells + 1] - left)
    values = (cells + fraction) / 2 ** h.depth
    return float(values) if np.ndim(y) == 0 else values


def forward_batch(breakpoints: np.ndarray, y: np.ndarray) -> np.ndarray:
    """psi(y) for every row of a (samples, 2^n + 1) breakpoint batch at common points y."""
    size = breakpoints.shape[1] - 1
    out = np.empty((breakpoints.shape[0], len(y)))
    for row, bp in enumerate(breakpoints):
        cells = np.clip(np.searchsorted(bp, y, side="right") - 1, 0, size - 1)
        out[row] = (cells + (y - bp[cells]) / (bp[cells + 1] - bp[cells])) / size
    return out


def locality_restrict(theta: DyadicMap, interval: DyadicInterval) -> ThetaMap:
    """theta o L_I, of depth theta.depth - rank(I)."""
    restricted = theta.restrict(interval)
    return ThetaMap(restricted.depth, restricted.values)


def derivative_profile(h: DyadicHomeomorphism) -> np.ndarray:
    """Slopes of psi^{-1} on the 2^depth cells."""
    return np.diff(h.inv_breakpoints) * 2 ** h.depth


def check_holder(h: DyadicHomeomorphism, eta_admissible: bool = True,
                 pair_depth: int = HOLDER_PAIR_DEPTH) -> HolderReport:
    """
    Check (3/8)^m <= psi^{-1}(k 2^-m) - psi^{-1}((k-1) 2^-m) <= (5/8)^m at every level m.

    With eta_admissible the pairwise bounds (|y-x|/4)^{5/4} <= |psi^{-1}(y) - psi^{-1}(x)|
    <= (4|y-x|)^{4/5} are also checked on the dyadic points of rank <= pair_depth.
    """
    worst_lower, worst_upper = math.inf, 0.0
    first_failing = None
    for m in range(1, h.depth + 1):
        increments = np.diff(h.inv_breakpoints[::2 ** (h.depth - m)])
        lower = float(increments.min() / (3.0 / 8.0) ** m)
        upper = float(increments.max() / (5.0 / 8.0) ** m)
        worst_lower = min(worst_lower, lower)
        worst_upper = max(worst_upper, upper)
        if first_failing is None and (lower < 1.0 - HOLDER_TOLERANCE or upper > 1.0 + HOLDER_TOLERANCE):
            first_failing = m
    pairwise = None
    if eta_admissible:
        level = min(pair_depth, h.depth)
        values = h.inv_breakpoints[::2 ** (h.depth - level)]
        points = np.linspace(0.0, 1.0, len(values))
        i, j = np.triu_indices(len(values), k=1)
        gaps = points[j] - points[i]
        increments = values[j] - values[i]
        pairwise = bool(np.all(increments >= (gaps / 4.0) ** 1.25 * (1.0 - HOLDER_TOLERANCE))
                        and np.all(increments <= (4.0 * gaps) ** 0.8 * (1.0 + HOLDER_TOLERANCE)))
    passed = first_failing is None
    if not passed:
        logger.debug(f"Dyadic increment bounds fail first at level {first_failing}")
    return HolderReport(passed, worst_lower if h.depth else 1.0, worst_upper if h.depth else 1.0,
                        first_failing, pairwise)


def is_admissible(table: HaarTable, eta: float) -> bool:
    """eta * sup q <= 1/8, which keeps every theta in [3/8, 5/8]."""
    return eta > 0 and eta * table.max_q() <= ADMISSIBLE_SPREAD


def largest_admissible_eta(table: HaarTable) -> float:
    top = table.max_q()
    return math.inf if top == 0.0 else ADMISSIBLE_SPREAD / top


def theta_from_tau(table: HaarTable, tau: DyadicMap, eta: float) -> ThetaMap:
    """
    theta(d) = 1/2 + eta q_f(d) tau(d).

    Args:
        table: Haar table of f, tabulating q to at least tau.depth
        tau: Values in [-1, 1]
        eta: Spread parameter

    Returns:
        ThetaMap of depth tau.depth

    Raises:
        DomainError: some |tau| > 1
        AdmissibilityError: some theta leaves [1/4, 3/4]
    """
    if tau.values.size and np.abs(tau.values).max() > 1.0:
        raise DomainError("tau must take values in [-1, 1]")
    q = table.q_map(tau.depth).values
    theta = 0.5 + eta * q * tau.values
    if theta.size and (theta.min() < THETA_MIN or theta.max() > THETA_MAX):
        raise AdmissibilityError(f"eta={eta} with sup q={table.max_q():.6g} pushes theta outside [1/4, 3/4]")
    return ThetaMap(tau.depth, theta)


def derivative_bound_check(h: DyadicHomeomorphism, table: HaarTable, eta: float,
                           constant: float = DERIVATIVE_CONSTANT) -> DerivativeBoundReport:
    """
    Check exp(-C eta z) <= (psi^{-1})' <= exp(C eta z) cell by cell, z = sum of Q_i above the cell.
    """
    log_slopes = np.log(derivative_profile(h))
    budget = constant * eta * potential_cells(table, h.depth)
    excess = float(np.max(np.abs(log_slopes) - budget)) if len(log_slopes) else 0.0
    return DerivativeBoundReport(excess <= HOLDER_TOLERANCE, constant, excess)


def lp_norms(h: DyadicHomeomorphism, ps: Sequence[float] = (1.0, 2.0, 4.0)) -> Dict[str, Dict[float, float]]:
    """L^p norms of (psi^{-1})' and of psi' at the stored depth."""
    widths = np.diff(h.inv_breakpoints)
    cell = 2.0 ** -h.depth
    inverse_slopes = widths / cell
    forward_slopes = cell / widths
    norms = {"inverse": {}, "forward": {}}
    for p in ps:
        norms["inverse"][p] = float((np.sum(inverse_slopes ** p) * cell) ** (1.0 / p))
        norms["forward"][p] = float((np.sum(forward_slopes ** p * widths)) ** (1.0 / p))
    return norms


def write_homeomorphism_csv(h: DyadicHomeomorphism, path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["k", "psi_inv"])
        for k, value in enumerate(h.inv_breakpoints):
            writer.writerow([k, repr(float(value))])


def read_homeomorphism_csv(path: Union[str, Path]) -> DyadicHomeomorphism:
    with open(path, newline="", encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    values = [float(row["psi_inv"]) for row in sorted(rows, key=lambda row: int(row["k"]))]
    depth = int(round(math.log2(max(len(values) - 1, 1))))
    return DyadicHomeomorphism(depth, values)


def write_dyadic_map_csv(values: DyadicMap, path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["k", "n", "value"])
        for d, value in values.items():
            writer.writerow([d.k, d.n, repr(value)])


def read_dyadic_map_csv(path: Union[str, Path], depth: Optional[int] = None, default: float = 0.0) -> DyadicMap:
    """Read `k,n,value` rows; dyadics that are absent take the default value."""
    with open(path, newline="", encoding="utf-8") as handle:
        rows = [(int(row["k"]), int(row["n"]), float(row["value"])) for row in csv.DictReader(handle)]
    depth = max((n for _, n, _ in rows), default=0) if depth is None else depth
    values = np.full(2 ** depth - 1, float(default))
    for k, n, value in rows:
        if n <= depth:
            values[DyadicRational(k, n).index] = value
    return DyadicMap(depth, values)
