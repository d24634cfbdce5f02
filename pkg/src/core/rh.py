"""
Restricted random homeomorphisms.

An RHRestrictor assigns to every dyadic rational d an interval [a, b] of
[-1, 1]; the random parameter tau(d) is uniform on it and the homeomorphism is
psi with theta = 1/2 + eta q_f tau. This module samples those homeomorphisms,
estimates E f(phi(x)) by Monte-Carlo, and estimates the half-difference fields
Delta_i obtained by conditioning the center of a partition cell on the right or
the left half of its interval, together with their Fourier moments.
"""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from src.config.logging_config import setup_logger
from src.config.settings import DEFAULT_THREADS, MC_CHUNK_SIZE, QUADRATURE_MIN_NODES, THETA_MAX, THETA_MIN
from src.core.errors import AdmissibilityError, ContractError, InvariantError, ResolutionError
from src.core.funcspace import FunctionSpec, eval_function, linear_exponential_weights
from src.core.haar import DyadicInterval, DyadicMap, DyadicRational, HaarTable
from src.core.homeo import forward_batch, refine_levels

logger = setup_logger(__name__)

WIDTH_TOLERANCE = 1e-12


def dyadic_point(numerator: int, n: int) -> Optional[DyadicRational]:
    """Canonical odd form of numerator 2^-n; None for 0 and 1."""
    if numerator <= 0 or numerator >= 2 ** n:
        return None
    while numerator % 2 == 0:
        numerator //= 2
        n -= 1
    return DyadicRational(numerator, n)


def _check_partition(partition: Sequence[DyadicInterval]) -> None:
    edge = 0.0
    for cell in partition:
        if cell.lo != edge:
            raise InvariantError(f"Partition cell [{cell.lo}, {cell.hi}] does not start at {edge}")
        edge = cell.hi
    if edge != 1.0:
        raise InvariantError("Partition does not cover [0, 1]")


class RHRestrictor:
    """
    Intervals I(d) of [-1, 1] for every dyadic d of rank <= depth, with type data.

    Args:
        depth: Largest rank N carrying randomness
        lower: Left ends a(d)
        upper: Right ends b(d)
        partition: Dyadic cells covering [0, 1] in increasing order
        m: The center intervals have length 2^-m (m = -1 is the whole [-1, 1])
        delta: Scale of the preimage widths
    """

    def __init__(self, depth: int, lower: DyadicMap, upper: DyadicMap,
                 partition: Sequence[DyadicInterval], m: int, delta: float):
        if lower.depth != depth or upper.depth != depth:
            raise InvariantError("Interval ends must be tabulated to the restrictor depth")
        if np.any(lower.values < -1.0) or np.any(upper.values > 1.0) or np.any(lower.values > upper.values):
            raise InvariantError("Every I(d) must be a subinterval of [-1, 1]")
        if m < -1:
            raise InvariantError(f"m must be at least -1, got {m}")
        partition = tuple(sorted(partition, key=lambda cell: cell.lo))
        _check_partition(partition)
        if max(cell.n for cell in partition) + 1 > depth:
            raise InvariantError("Every partition cell needs its center within the restrictor depth")
        self.depth = depth
        self.lower = lower
        self.upper = upper
        self.partition = partition
        self.m = m
        self.delta = float(delta)

    @classmethod
    def unrestricted(cls, depth: int, partition: Sequence[DyadicInterval] = (DyadicInterval(1, 0),),
                     m: int = -1, delta: float = 1.0) -> "RHRestrictor":
        return cls(depth, DyadicMap.filled(depth, -1.0), DyadicMap.filled(depth, 1.0), partition, m, delta)

    def interval(self, d: DyadicRational) -> tuple:
        return self.lower[d], self.upper[d]

    def is_degenerate(self, d: DyadicRational) -> bool:
        return self.lower[d] == self.upper[d]

    @property
    def centers(self) -> List[DyadicRational]:
        return [cell.middle for cell in self.partition]

    @property
    def boundary_points(self) -> List[DyadicRational]:
        points = []
        for cell in self.partition[1:]:
            points.append(dyadic_point(cell.k - 1, cell.n))
        return points

    @property
    def midpoints(self) -> DyadicMap:
        return DyadicMap(self.depth, 0.5 * (self.lower.values + self.upper.values))

    def with_bounds(self, updates: Dict[DyadicRational, tuple]) -> "RHRestrictor":
        lower = self.lower.with_values({d: a for d, (a, _) in updates.items()})
        upper = self.upper.with_values({d: b for d, (_, b) in updates.items()})
        return RHRestrictor(self.depth, lower, upper, self.partition, self.m, self.delta)

    def with_type(self, partition: Optional[Sequence[DyadicInterval]] = None, m: Optional[int] = None,
                  delta: Optional[float] = None) -> "RHRestrictor":
        return RHRestrictor(self.depth, self.lower, self.upper,
                            self.partition if partition is None else partition,
                            self.m if m is None else m,
                            self.delta if delta is None else delta)

    def nests_in(self, other: "RHRestrictor") -> bool:
        """J(d) inside I(d) for every d."""
        return bool(np.all(self.lower.values >= other.lower.values)
                    and np.all(self.upper.values <= other.upper.values))

    def fully_degenerate(self) -> bool:
        return bool(np.all(self.lower.values == self.upper.values))

    def __repr__(self) -> str:
        return f"RHRestrictor(depth={self.depth}, cells={len(self.partition)}, m={self.m}, delta={self.delta:.6g})"


@dataclass(frozen=True)
class ExpectationEstimate:
    mean: float
    stderr: float
    samples: int
    seed: int


@dataclass(frozen=True)
class MartingaleReport:
    means: np.ndarray
    stderr: np.ndarray
    max_deviation: float
    max_z: float


@dataclass(frozen=True)
class DeltaField:
    """Per-cell Monte-Carlo estimates from one coupled draw set."""

    cells: List[int]
    points: Dict[int, np.ndarray]
    plus: Dict[int, np.ndarray]
    minus: Dict[int, np.ndarray]
    delta: Dict[int, np.ndarray]
    delta_stderr: Dict[int, np.ndarray]
    plus_stderr: Dict[int, np.ndarray]
    minus_stderr: Dict[int, np.ndarray]
    samples: int


@dataclass(frozen=True)
class SplitEstimate:
    plus: np.ndarray
    minus: np.ndarray
    plus_stderr: np.ndarray
    minus_stderr: np.ndarray

    @property
    def combined(self) -> np.ndarray:
        return 0.5 * (self.plus + self.minus)


@dataclass(frozen=True)
class CellMoments:
    """
    Moments m(z) = int_{V_i} Delta_i(x) e(zx) dx for 0 <= z <= top, in the real basis
    [Re m(0), Re m(1..top), Im m(1..top)], with their Monte-Carlo covariance.
    """

    cell: int
    interval: tuple
    nodes: np.ndarray
    top: int
    mean: np.ndarray
    covariance: np.ndarray
    samples: int


@dataclass(frozen=True)
class WEntry:
    value: complex
    stderr_re: float
    stderr_im: float


class _Accumulator:
    """Running mean and variance of row batches, centred on the first row."""

    def __init__(self):
        self.shift = None
        self.total = None
        self.squares = None
        self.count = 0

    def add(self, batch: np.ndarray) -> None:
        if self.shift is None:
            self.shift = batch[0].copy()
            self.total = np.zeros_like(self.shift)
            self.squares = np.zeros_like(self.shift)
        centred = batch - self.shift
        self.total += centred.sum(axis=0)
        self.squares += (centred ** 2).sum(axis=0)
        self.count += len(batch)

    @property
    def mean(self) -> np.ndarray:
        return self.shift + self.total / self.count

    @property
    def stderr(self) -> np.ndarray:
        if self.count < 2:
            return np.zeros_like(self.total)
        variance = np.maximum(self.squares - self.total ** 2 / self.count, 0.0) / (self.count - 1)
        return np.sqrt(variance / self.count)


def _chunk_sizes(samples: int) -> List[int]:
    if samples < 2:
        raise ContractError(f"At least 2 Monte-Carlo samples are required, got {samples}")
    full, rest = divmod(samples, MC_CHUNK_SIZE)
    return [MC_CHUNK_SIZE] * full + ([rest] if rest else [])


def _run_chunks(work: Callable[[int, int], object], samples: int, threads: int) -> list:
    """Apply work(chunk_index, size) to every chunk, results in chunk order."""
    sizes = _chunk_sizes(samples)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(work, range(len(sizes)), sizes))
    return [work(index, size) for index, size in enumerate(sizes)]


def _flexibility(table: HaarTable, r: RHRestrictor, eta: float) -> np.ndarray:
    q = table.q_map(r.depth).values
    spread = eta * (q.max() if q.size else 0.0)
    if 0.5 + spread > THETA_MAX or 0.5 - spread < THETA_MIN:
        raise AdmissibilityError(f"eta={eta} with sup q={q.max():.6g} pushes theta outside [1/4, 3/4]")
    return q


def _breakpoints(tau: np.ndarray, q: np.ndarray, eta: float, depth: int) -> np.ndarray:
    theta = 0.5 + eta * q * tau
    start = np.tile(np.array([0.0, 1.0]), (len(tau), 1))
    return refine_levels(start, (theta[:, 2 ** (j - 1) - 1:2 ** j - 1] for j in range(1, depth + 1)))


def _tau_batch(r: RHRestrictor, rng: np.random.Generator, count: int) -> np.ndarray:
    uniforms = rng.random((count, 2 ** r.depth - 1))
    return r.lower.values + (r.upper.values - r.lower.values) * uniforms


def _compose(f: FunctionSpec, breakpoints: np.ndarray, xs: np.ndarray) -> np.ndarray:
    y = np.clip(forward_batch(breakpoints, xs), 0.0, 1.0)
    return eval_function(f, y.ravel()).reshape(y.shape)


def sample_tau(r: RHRestrictor, rng_seed: int) -> DyadicMap:
    """tau(d) uniform on I(d), independently over d; degenerate entries give their point."""
    rng = np.random.default_rng(rng_seed)
    return DyadicMap(r.depth, _tau_batch(r, rng, 1)[0])


def phi_inverse_partition(r: RHRestrictor, table: HaarTable, eta: float) -> List[tuple]:
    """
    The deterministic preimages V_i of the partition cells.

    psi^{-1} at a cell boundary is computed by the splitting recursion through
    its dyadic ancestors, all of which must be degenerate.

    Raises:
        InvariantError: a dyadic on the recursion path is not degenerate
        AdmissibilityError: a theta on the path leaves [1/4, 3/4]
    """
    q = table.q_map(r.depth)
    cache = {}

    def value(numerator: int, n: int) -> float:
        d = dyadic_point(numerator, n)
        if d is None:
            return 0.0 if numerator <= 0 else 1.0
        if d in cache:
            return cache[d]
        if not r.is_degenerate(d):
            raise InvariantError(f"I({d.k}/2^{d.n}) is not degenerate but lies on a cell boundary path")
        theta = 0.5 + eta * q[d] * r.lower[d]
        if not THETA_MIN <= theta <= THETA_MAX:
            raise AdmissibilityError(f"theta({d.k}/2^{d.n}) = {theta} lies outside [1/4, 3/4]")
        left = value(d.k - 1, d.n)
        right = value(d.k + 1, d.n)
        cache[d] = left + theta * (right - left)
        return cache[d]

    edges = [value(cell.k - 1, cell.n) for cell in r.partition] + [1.0]
    return [(edges[i], edges[i + 1]) for i in range(len(r.partition))]


def y_cells(r: RHRestrictor, intervals: Sequence[tuple]) -> List[int]:
    """Indices of the cells with |V_i| > delta / 2."""
    return [i for i, (a, b) in enumerate(intervals) if b - a > 0.5 * r.delta]


def locate(intervals: Sequence[tuple], xi) -> np.ndarray:
    """Index of the preimage cell containing each xi (cells closed on the left)."""
    edges = np.array([a for a, _ in intervals[1:]])
    return np.searchsorted(edges, np.asarray(xi, dtype=float), side="right")


def in_neighbourhood(i: int, l: int, n: int) -> bool:
    """Cell i is l or one of its two cyclic neighbours."""
    offset = (i - l) % n
    return offset <= 1 or offset == n - 1


def validate_type(r: RHRestrictor, table: HaarTable, eta: float) -> List[str]:
    """Every violated type-(f, delta) condition, as readable strings."""
    violations = []
    boundary = set(r.boundary_points)
    for d in boundary:
        if not r.is_degenerate(d):
            violations.append(f"boundary dyadic {d.k}/2^{d.n} is not degenerate")
    if violations:
        return violations
    intervals = phi_inverse_partition(r, table, eta)
    for i, (a, b) in enumerate(intervals):
        width = b - a
        if width < 0.25 * r.delta * (1 - WIDTH_TOLERANCE) or width > r.delta * (1 + WIDTH_TOLERANCE):
            violations.append(f"cell {i}: preimage width {width:.6g} outside [delta/4, delta]")
    active = {r.centers[i] for i in y_cells(r, intervals)}
    length = 2.0 ** -r.m
    for d, (a, b) in zip((DyadicRational.from_index(j) for j in range(2 ** r.depth - 1)),
                         zip(r.lower.values, r.upper.values)):
        if d in boundary:
            continue
        if d in active:
            aligned = abs((a + 1.0) / length - round((a + 1.0) / length)) < 1e-9
            if abs(b - a - length) > 1e-12 or not aligned:
                violations.append(f"center {d.k}/2^{d.n} carries [{a}, {b}], not a dyadic interval of length 2^{-r.m}")
        elif a != -1.0 or b != 1.0:
            violations.append(f"entry {d.k}/2^{d.n} is restricted to [{a}, {b}]")
    return violations


def expectation_field(f: FunctionSpec, table: HaarTable, r: RHRestrictor, eta: float, xs: Sequence[float],
                      samples: int, seed: int, threads: int = DEFAULT_THREADS) -> List[ExpectationEstimate]:
    """
    Monte-Carlo estimates of E f(phi_I(x)); one tau per sample is shared by all x.

    Args:
        f: Function to compose
        table: Haar table of f
        r: Restrictor
        eta: Spread parameter
        xs: Evaluation points in [0, 1]
        samples: Number of homeomorphisms drawn
        seed: Root seed; chunk c draws from default_rng([seed, c])
        threads: Worker threads over chunks

    Returns:
        One ExpectationEstimate per point
    """
    xs = np.asarray(xs, dtype=float)
    q = _flexibility(table, r, eta)

    def work(chunk: int, size: int) -> np.ndarray:
        rng = np.random.default_rng([seed, chunk])
        return _compose(f, _breakpoints(_tau_batch(r, rng, size), q, eta, r.depth), xs)

    accumulator = _Accumulator()
    for batch in _run_chunks(work, samples, threads):
        accumulator.add(batch)
    means, stderr = accumulator.mean, accumulator.stderr
    return [ExpectationEstimate(float(mu), float(se), samples, seed) for mu, se in zip(means, stderr)]


def martingale_check(table: HaarTable, r: RHRestrictor, eta: float, samples: int, seed: int,
                     threads: int = DEFAULT_THREADS) -> MartingaleReport:
    """Per-cell Monte-Carlo mean of the slopes of psi^{-1}, which should all be 1."""
    if not (np.all(r.lower.values == -1.0) and np.all(r.upper.values == 1.0)):
        raise ContractError("The slope identity is checked on the unrestricted family only")
    q = _flexibility(table, r, eta)

    def work(chunk: int, size: int) -> np.ndarray:
        rng = np.random.default_rng([seed, chunk])
        breakpoints = _breakpoints(_tau_batch(r, rng, size), q, eta, r.depth)
        return np.diff(breakpoints, axis=1) * 2 ** r.depth

    accumulator = _Accumulator()
    for batch in _run_chunks(work, samples, threads):
        accumulator.add(batch)
    means, stderr = accumulator.mean, accumulator.stderr
    deviation = np.abs(means - 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = np.where(stderr > 0, deviation / stderr, np.where(deviation > 0, np.inf, 0.0))
    report = MartingaleReport(means, stderr, float(deviation.max()), float(scores.max()))
    logger.info(f"Slope identity: max |mean - 1| = {report.max_deviation:.3g}, max z-score {report.max_z:.3g}")
    return report


def _coupled_work(f: FunctionSpec, table: HaarTable, r: RHRestrictor, eta: float, cells: Sequence[int],
                  xs: np.ndarray, seed: int) -> Callable[[int, int], tuple]:
    """Chunk job drawing one tau and one center uniform per sample, returning f o psi for both halves."""
    q = _flexibility(table, r, eta)
    centers = np.array([r.centers[i].index for i in cells], dtype=int)
    a = r.lower.values[centers]
    b = r.upper.values[centers]
    middle = 0.5 * (a + b)

    def work(chunk: int, size: int) -> tuple:
        rng = np.random.default_rng([seed, chunk])
        tau = _tau_batch(r, rng, size)
        uniforms = rng.random((size, len(centers)))
        plus, minus = tau.copy(), tau.copy()
        plus[:, centers] = middle + uniforms * (b - middle)
        minus[:, centers] = middle - uniforms * (middle - a)
        return (_compose(f, _breakpoints(plus, q, eta, r.depth), xs),
                _compose(f, _breakpoints(minus, q, eta, r.depth), xs))

    return work


def _check_cells(r: RHRestrictor, table: HaarTable, eta: float, cells: Sequence[int]) -> List[tuple]:
    intervals = phi_inverse_partition(r, table, eta)
    active = set(y_cells(r, intervals))
    for i in cells:
        if i not in active:
            raise ContractError(f"Cell {i} has |V_i| <= delta/2 and carries no correction")
    return intervals


def delta_field(f: FunctionSpec, table: HaarTable, r: RHRestrictor, eta: float, points: Dict[int, Sequence[float]],
                samples: int, seed: int, threads: int = DEFAULT_THREADS) -> DeltaField:
    """
    Coupled estimates of F+, F- and Delta_i = (F+ - F-)/2 on V_i for several cells.

    All centers are conditioned at once: for x in V_i only the parameters inside
    U_i move psi(x), so each cell sees the law of its own conditioning. The
    center draws are antithetic, mid + U (b - mid) against mid - U (mid - a).
    Points outside V_i get Delta = 0.
    """
    cells = sorted(points)
    intervals = _check_cells(r, table, eta, cells)
    arrays = {i: np.asarray(points[i], dtype=float) for i in cells}
    xs = np.concatenate([arrays[i] for i in cells]) if cells else np.empty(0)
    work = _coupled_work(f, table, r, eta, cells, xs, seed)

    plus_acc, minus_acc, delta_acc = _Accumulator(), _Accumulator(), _Accumulator()
    for plus, minus in _run_chunks(work, samples, threads):
        plus_acc.add(plus)
        minus_acc.add(minus)
        delta_acc.add(0.5 * (plus - minus))

    fields = {name: {} for name in ("plus", "minus", "delta", "delta_se", "plus_se", "minus_se")}
    offset = 0
    for i in cells:
        span = slice(offset, offset + len(arrays[i]))
        a, b = intervals[i]
        inside = (arrays[i] >= a) & (arrays[i] <= b)
        fields["plus"][i] = plus_acc.mean[span]
        fields["minus"][i] = minus_acc.mean[span]
        fields["delta"][i] = np.where(inside, delta_acc.mean[span], 0.0)
        fields["delta_se"][i] = np.where(inside, delta_acc.stderr[span], 0.0)
        fields["plus_se"][i] = plus_acc.stderr[span]
        fields["minus_se"][i] = minus_acc.stderr[span]
        offset += len(arrays[i])
    return DeltaField(cells, arrays, fields["plus"], fields["minus"], fields["delta"], fields["delta_se"],
                      fields["plus_se"], fields["minus_se"], samples)


def delta_i(f: FunctionSpec, table: HaarTable, r: RHRestrictor, i: int, eta: float, xs: Sequence[float],
            samples: int, seed: int, threads: int = DEFAULT_THREADS) -> np.ndarray:
    """Delta_i at the given points; zero outside V_i."""
    return delta_field(f, table, r, eta, {i: xs}, samples, seed, threads).delta[i]


def split_expectation(f: FunctionSpec, table: HaarTable, r: RHRestrictor, i: int, eta: float,
                      xs: Sequence[float], samples: int, seed: int, threads: int = DEFAULT_THREADS) -> SplitEstimate:
    """F+ and F- on cell i; their average estimates the unconditioned E f(phi_I(x))."""
    field = delta_field(f, table, r, eta, {i: xs}, samples, seed, threads)
    return SplitEstimate(field.plus[i], field.minus[i], field.plus_stderr[i], field.minus_stderr[i])


def coupled_difference(f: FunctionSpec, table: HaarTable, start: RHRestrictor, end: RHRestrictor, eta: float,
                       xs: Sequence[float], weights: np.ndarray, samples: int, seed: int,
                       threads: int = DEFAULT_THREADS) -> tuple:
    """
    Estimate sum_k W[k, c] (E f(phi_end(x_k)) - E f(phi_start(x_k))) for every column c of W.

    One uniform per dyadic drives both restrictors: tau_start(d) and tau_end(d)
    are the same quantile of I_start(d) and I_end(d).

    Args:
        f: Function to compose
        table: Haar table of f
        start: Restrictor subtracted
        end: Restrictor of the same depth
        eta: Spread parameter
        xs: Evaluation points in [0, 1]
        weights: Real array of shape (len(xs),) or (len(xs), columns)
        samples: Number of coupled draws
        seed: Root seed; chunk c draws from default_rng([seed, c])
        threads: Worker threads over chunks

    Returns:
        (mean, stderr), one entry per column

    Raises:
        ContractError: depths or shapes do not match
    """
    if start.depth != end.depth:
        raise ContractError(f"Restrictors of depth {start.depth} and {end.depth} cannot be coupled")
    xs = np.asarray(xs, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if weights.ndim == 1:
        weights = weights[:, None]
    if weights.shape[0] != len(xs):
        raise ContractError(f"Weights have {weights.shape[0]} rows for {len(xs)} points")
    q = _flexibility(table, start, eta)

    def work(chunk: int, size: int) -> np.ndarray:
        rng = np.random.default_rng([seed, chunk])
        uniforms = rng.random((size, 2 ** start.depth - 1))
        tau_start = start.lower.values + (start.upper.values - start.lower.values) * uniforms
        tau_end = end.lower.values + (end.upper.values - end.lower.values) * uniforms
        diff = (_compose(f, _breakpoints(tau_end, q, eta, start.depth), xs)
                - _compose(f, _breakpoints(tau_start, q, eta, start.depth), xs))
        return diff @ weights

    accumulator = _Accumulator()
    for batch in _run_chunks(work, samples, threads):
        accumulator.add(batch)
    return accumulator.mean, accumulator.stderr


def quadrature_nodes(interval: tuple, top: int) -> np.ndarray:
    a, b = interval
    count = max(QUADRATURE_MIN_NODES, int(math.ceil(4 * (top * (b - a) + 1))))
    return np.linspace(a, b, count)


def dirichlet_coefficients(order: int, xi: float) -> np.ndarray:
    """c_z with D_r(x - xi) = Re sum_{z=0..r} c_z e(z x)."""
    z = np.arange(order + 1)
    return np.where(z == 0, 1.0, 2.0) * np.exp(-2j * np.pi * z * xi)


def dirichlet_weights(nodes: np.ndarray, order: int, xi: float) -> np.ndarray:
    """Real K with sum_k g(x_k) K_k = int g(x) D_r(x - xi) dx over [x_0, x_last] for piecewise-linear g."""
    exponentials = linear_exponential_weights(nodes, np.arange(order + 1))
    return (exponentials @ dirichlet_coefficients(order, xi)).real


def cell_moments(f: FunctionSpec, table: HaarTable, r: RHRestrictor, eta: float, u_max: int, samples: int,
                 seed: int, threads: int = DEFAULT_THREADS) -> Dict[int, CellMoments]:
    """
    Monte-Carlo means and covariances of the Fourier moments of Delta_i, for every cell in Y.

    Args:
        f: Function to compose
        table: Haar table of f
        r: Restrictor of some type (f, delta)
        eta: Spread parameter
        u_max: Moments are taken for frequencies 0..2^u_max
        samples: Number of coupled draws
        seed: Root seed
        threads: Worker threads over chunks

    Returns:
        CellMoments keyed by cell index
    """
    intervals = phi_inverse_partition(r, table, eta)
    cells = y_cells(r, intervals)
    if not cells:
        return {}
    top = 2 ** u_max
    nodes = {i: quadrature_nodes(intervals[i], top) for i in cells}
    weights = {i: linear_exponential_weights(nodes[i], np.arange(top + 1)) for i in cells}
    xs = np.concatenate([nodes[i] for i in cells])
    work = _coupled_work(f, table, r, eta, cells, xs, seed)
    dimension = 2 * top + 1

    sums = {i: np.zeros(dimension) for i in cells}
    outer = {i: np.zeros((dimension, dimension)) for i in cells}
    for plus, minus in _run_chunks(work, samples, threads):
        delta = 0.5 * (plus - minus)
        offset = 0
        for i in cells:
            span = slice(offset, offset + len(nodes[i]))
            offset += len(nodes[i])
            moments = delta[:, span] @ weights[i]
            basis = np.concatenate([moments.real, moments[:, 1:].imag], axis=1)
            sums[i] += basis.sum(axis=0)
            outer[i] += basis.T @ basis

    result = {}
    for i in cells:
        mean = sums[i] / samples
        covariance = (outer[i] - samples * np.outer(mean, mean)) / (samples - 1)
        result[i] = CellMoments(i, intervals[i], nodes[i], top, mean, covariance, samples)
    logger.info(f"Estimated Delta moments on {len(cells)} cells with {samples} coupled draws")
    return result


def dirichlet_functional(top: int, r: int, xi: float) -> np.ndarray:
    """c with int Delta(x) D_r(x - xi) dx = c . moments in the real basis."""
    if r > top:
        raise ResolutionError(f"Order {r} exceeds the tabulated moments 0..{top}")
    c = np.zeros(2 * top + 1)
    z = np.arange(1, r + 1)
    c[0] = 1.0
    c[z] = 2.0 * np.cos(2 * np.pi * z * xi)
    c[top + z] = 2.0 * np.sin(2 * np.pi * z * xi)
    return c


def block_functionals(top: int, t: int, s: int, xi: float) -> tuple:
    """(c_re, c_im) of int Delta(x) sum_{z=t+1}^{t+2^s} e(z(x - xi)) dx."""
    if t + 2 ** s > top:
        raise ResolutionError(f"Block up to frequency {t + 2 ** s} exceeds the tabulated moments 0..{top}")
    c_re = np.zeros(2 * top + 1)
    c_im = np.zeros(2 * top + 1)
    z = np.arange(t + 1, t + 2 ** s + 1)
    cos, sin = np.cos(2 * np.pi * z * xi), np.sin(2 * np.pi * z * xi)
    c_re[z] = cos
    c_re[top + z] = sin
    c_im[z] = -sin
    c_im[top + z] = cos
    return c_re, c_im


def functional_stderr(moments: CellMoments, c: np.ndarray) -> float:
    return math.sqrt(max(float(c @ moments.covariance @ c), 0.0) / moments.samples)


def w_vectors(moments: CellMoments, xi: float, u: int, s: Optional[int] = None, t: Optional[int] = None,
              kind: str = "w0", delta: float = 1.0, near: bool = False) -> WEntry:
    """
    One entry of the correction vectors of cell i.

    w0 integrates Delta_i against D_{2^u}(x - xi); wplus and wminus against the
    frequency blocks t+1..t+2^s and their mirror images. The entry is zero when
    2^u > 1/delta and V_i lies in the neighbourhood B_xi (near=True).

    Raises:
        ResolutionError: the quadrature grid of the cell is too coarse for 2^u
    """
    a, b = moments.interval
    needed = max(QUADRATURE_MIN_NODES, int(math.ceil(4 * (2 ** u * (b - a) + 1))))
    if len(moments.nodes) < needed:
        raise ResolutionError(f"Cell {moments.cell} has {len(moments.nodes)} nodes, frequency 2^{u} needs {needed}")
    if 2 ** u * delta > 1.0 and near:
        return WEntry(0j, 0.0, 0.0)
    if kind == "w0":
        c = dirichlet_functional(moments.top, 2 ** u, xi)
        return WEntry(complex(c @ moments.mean), functional_stderr(moments, c), 0.0)
    if kind not in ("wplus", "wminus") or s is None or t is None:
        raise ContractError(f"Unknown entry kind '{kind}' or missing block parameters")
    c_re, c_im = block_functionals(moments.top, t, s, xi)
    value = complex(c_re @ moments.mean, c_im @ moments.mean)
    if kind == "wminus":
        value = value.conjugate()
    return WEntry(value, functional_stderr(moments, c_re), functional_stderr(moments, c_im))


def restrictor_to_dict(r: RHRestrictor) -> dict:
    entries = [
        {"k": d.k, "n": d.n, "a": float(a), "b": float(b)}
        for d, a, b in ((DyadicRational.from_index(j), a, b)
                        for j, (a, b) in enumerate(zip(r.lower.values, r.upper.values)))
        if a != -1.0 or b != 1.0
    ]
    return {
        "depth": r.depth,
        "entries": entries,
        "partition": [{"k": cell.k, "n": cell.n} for cell in r.partition],
        "m": r.m,
        "delta": r.delta,
    }


def restrictor_from_dict(data: dict) -> RHRestrictor:
    depth = int(data["depth"])
    lower = np.full(2 ** depth - 1, -1.0)
    upper = np.full(2 ** depth - 1, 1.0)
    for entry in data.get("entries", []):
        index = DyadicRational(int(entry["k"]), int(entry["n"])).index
        lower[index], upper[index] = float(entry["a"]), float(entry["b"])
    partition = [DyadicInterval(int(cell["k"]), int(cell["n"])) for cell in data.get("partition", [{"k": 1, "n": 0}])]
    return RHRestrictor(depth, DyadicMap(depth, lower), DyadicMap(depth, upper), partition,
                        int(data.get("m", -1)), float(data.get("delta", 1.0)))


def write_restrictor_json(r: RHRestrictor, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(restrictor_to_dict(r), indent=2), encoding="utf-8")


def read_restrictor_json(path: Union[str, Path]) -> RHRestrictor:
    return restrictor_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
