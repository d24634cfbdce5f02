"""
Dyadic addressing and Haar analysis of a function on [0, 1].

The HaarTable keeps the Haar coefficients and the dyadic cell averages of f
and derives from them the flexibility function q (one value per dyadic
midpoint) and the potential z(x) = sum_n Q_n(x).
"""

import math
from dataclasses import dataclass
from typing import Iterator, List, Sequence, Union

import numpy as np
from scipy import stats

from src.config.logging_config import setup_logger
from src.config.settings import HAAR_DEPTH, HAAR_RESOLUTION_MARGIN, TAIL_LADDER_SIZE
from src.core.errors import ContractError, InvariantError, ResolutionError
from src.core.funcspace import FunctionSpec, cell_integrals, l2_norm_squared

logger = setup_logger(__name__)


@dataclass(frozen=True, order=True)
class DyadicRational:
    """d = k 2^-n with k odd; n is the rank of d."""

    k: int
    n: int

    def __post_init__(self):
        if self.n < 1 or self.k % 2 == 0 or not 0 < self.k < 2 ** self.n:
            raise InvariantError(f"({self.k}, {self.n}) is not an odd dyadic rational in (0, 1)")

    @property
    def value(self) -> float:
        return self.k / 2 ** self.n

    @property
    def rank(self) -> int:
        return self.n

    @property
    def index(self) -> int:
        """Position in the level-ordered flat layout of a DyadicMap."""
        return 2 ** (self.n - 1) - 1 + (self.k - 1) // 2

    @property
    def interval(self) -> "DyadicInterval":
        """The dyadic interval whose middle is d."""
        return DyadicInterval((self.k + 1) // 2, self.n - 1)

    @classmethod
    def from_index(cls, index: int) -> "DyadicRational":
        n = int(index + 1).bit_length()
        return cls(2 * (index - (2 ** (n - 1) - 1)) + 1, n)


@dataclass(frozen=True, order=True)
class DyadicInterval:
    """[(k-1) 2^-n, k 2^-n] with 1 <= k <= 2^n."""

    k: int
    n: int

    def __post_init__(self):
        if self.n < 0 or not 1 <= self.k <= 2 ** self.n:
            raise InvariantError(f"({self.k}, {self.n}) is not a dyadic interval of [0, 1]")

    @property
    def lo(self) -> float:
        return (self.k - 1) / 2 ** self.n

    @property
    def hi(self) -> float:
        return self.k / 2 ** self.n

    @property
    def length(self) -> float:
        return 2.0 ** -self.n

    @property
    def rank(self) -> int:
        return self.n

    @property
    def middle(self) -> DyadicRational:
        return DyadicRational(2 * self.k - 1, self.n + 1)

    @property
    def children(self) -> tuple:
        return DyadicInterval(2 * self.k - 1, self.n + 1), DyadicInterval(2 * self.k, self.n + 1)

    def contains(self, other: "DyadicInterval") -> bool:
        return other.n >= self.n and (other.k - 1) >> (other.n - self.n) == self.k - 1

    def to_unit(self, y):
        """L_I: the increasing affine map of [0, 1] onto I."""
        return self.lo + np.asarray(y, dtype=float) * self.length


class DyadicMap:
    """
    One real per dyadic rational of rank 1..depth, stored level by level.

    Level n occupies the flat slice [2^{n-1} - 1, 2^n - 1); inside a level the
    entries follow k = 1, 3, 5, ... The container is immutable.
    """

    def __init__(self, depth: int, values: Union[Sequence[float], np.ndarray]):
        values = np.array(values, dtype=float)
        if depth < 0 or values.shape != (2 ** depth - 1,):
            raise InvariantError(f"DyadicMap of depth {depth} needs {2 ** depth - 1} values, got {values.shape}")
        values.flags.writeable = False
        self.depth = depth
        self.values = values

    @classmethod
    def filled(cls, depth: int, value: float) -> "DyadicMap":
        return cls(depth, np.full(2 ** depth - 1, float(value)))

    @classmethod
    def from_levels(cls, levels: Sequence[np.ndarray]) -> "DyadicMap":
        flat = np.concatenate([np.asarray(level, dtype=float) for level in levels]) if levels else np.empty(0)
        return cls(len(levels), flat)

    def level(self, n: int) -> np.ndarray:
        if not 1 <= n <= self.depth:
            raise ContractError(f"Level {n} outside 1..{self.depth}")
        return self.values[2 ** (n - 1) - 1:2 ** n - 1]

    def levels(self) -> Iterator[np.ndarray]:
        for n in range(1, self.depth + 1):
            yield self.level(n)

    def __getitem__(self, d: DyadicRational) -> float:
        if d.n > self.depth:
            raise ContractError(f"Rank {d.n} exceeds map depth {self.depth}")
        return float(self.values[d.index])

    def with_values(self, updates: dict) -> "DyadicMap":
        values = self.values.copy()
        for d, value in updates.items():
            values[d.index] = value
        return type(self)(self.depth, values)

    def truncated(self, depth: int) -> "DyadicMap":
        if depth > self.depth:
            raise ContractError(f"Cannot truncate a depth-{self.depth} map to depth {depth}")
        return type(self)(depth, self.values[:2 ** depth - 1])

    def restrict(self, interval: DyadicInterval) -> "DyadicMap":
        """The map d' -> self(L_I(d')) of depth depth - rank(I)."""
        r, k = interval.n, interval.k
        if r > self.depth:
            raise ContractError(f"Interval rank {r} exceeds map depth {self.depth}")
        levels = []
        for j in range(1, self.depth - r + 1):
            width = 2 ** (j - 1)
            levels.append(self.level(j + r)[(k - 1) * width:k * width])
        return type(self).from_levels(levels)

    def items(self) -> Iterator[tuple]:
        for index, value in enumerate(self.values):
            yield DyadicRational.from_index(index), float(value)

    def __eq__(self, other) -> bool:
        return isinstance(other, DyadicMap) and self.depth == other.depth and np.array_equal(self.values, other.values)

    def __repr__(self) -> str:
        return f"DyadicMap(depth={self.depth})"


@dataclass(frozen=True)
class TailStatistics:
    lambdas: np.ndarray
    measures: np.ndarray
    slope: float


class HaarTable:
    """Haar coefficients <f, h_J> for every dyadic J of rank 0..depth, with cell averages."""

    def __init__(self, depth: int, averages: List[np.ndarray]):
        """
        Build the table from dyadic cell averages.

        Args:
            depth: Largest rank of a stored Haar coefficient
            averages: Cell means of f on levels 0..depth+1
        """
        if len(averages) != depth + 2:
            raise InvariantError(f"HaarTable of depth {depth} needs averages on {depth + 2} levels")
        self.depth = depth
        self.averages = [np.asarray(a, dtype=float) for a in averages]
        # <f, h_J> = |J|^{1/2} (mean(left) - mean(right)) / 2
        self.coeff = [
            2.0 ** (-n / 2) * 0.5 * (self.averages[n + 1][0::2] - self.averages[n + 1][1::2])
            for n in range(depth + 1)
        ]
        self._q = self._flexibility()

    @classmethod
    def from_function(cls, f: FunctionSpec, depth: int = HAAR_DEPTH) -> "HaarTable":
        if depth < 1:
            raise ContractError(f"Haar depth must be at least 1, got {depth}")
        if f.kind == "sampled" and f.grid_depth < depth + HAAR_RESOLUTION_MARGIN:
            raise ResolutionError(
                f"Samples of depth {f.grid_depth} are too coarse for a Haar table of depth {depth}; "
                f"at least {depth + HAAR_RESOLUTION_MARGIN} is needed"
            )
        return cls.from_cell_integrals(cell_integrals(f, depth + 1))

    @classmethod
    def from_cell_integrals(cls, cells: np.ndarray) -> "HaarTable":
        """Table of depth log2(len(cells)) - 1 from integrals over the finest cells."""
        cells = np.asarray(cells, dtype=float)
        top = int(round(math.log2(len(cells))))
        if 2 ** top != len(cells) or top < 1:
            raise InvariantError(f"Cell count {len(cells)} is not a power of two")
        averages = [None] * (top + 1)
        averages[top] = cells * 2 ** top
        for n in range(top - 1, -1, -1):
            averages[n] = 0.5 * (averages[n + 1][0::2] + averages[n + 1][1::2])
        return cls(top - 1, averages)

    def _flexibility(self) -> List[np.ndarray]:
        # subtree sums of c_J^2 |J|^{1/2}, then q(I) = |I|^{-3/2} * sum
        sums = [None] * (self.depth + 1)
        sums[self.depth] = self.coeff[self.depth] ** 2 * 2.0 ** (-self.depth / 2)
        for n in range(self.depth - 1, -1, -1):
            sums[n] = self.coeff[n] ** 2 * 2.0 ** (-n / 2) + sums[n + 1][0::2] + sums[n + 1][1::2]
        return [sums[n] * 2.0 ** (1.5 * n) for n in range(self.depth + 1)]

    def coefficient(self, interval: DyadicInterval) -> float:
        if interval.n > self.depth:
            raise ContractError(f"Rank {interval.n} exceeds table depth {self.depth}")
        return float(self.coeff[interval.n][interval.k - 1])

    def q_levels(self) -> List[np.ndarray]:
        """q on every dyadic interval of rank 0..depth (level n holds 2^n values)."""
        return self._q

    def q_map(self, depth: int = None) -> DyadicMap:
        """q indexed by dyadic midpoints: the rank-(n+1) level holds q of the rank-n intervals."""
        depth = self.depth + 1 if depth is None else depth
        if depth > self.depth + 1:
            raise ContractError(f"q is only tabulated to rank {self.depth + 1}, asked for {depth}")
        return DyadicMap.from_levels(self._q[:depth])

    def max_q(self) -> float:
        return float(max(level.max() for level in self._q))

    def __repr__(self) -> str:
        return f"HaarTable(depth={self.depth})"


def haar_coefficients(f: FunctionSpec, depth: int) -> HaarTable:
    """
    Haar coefficients of f for every dyadic interval of rank 0..depth.

    Args:
        f: Function to analyse
        depth: Largest rank of a stored coefficient

    Returns:
        Immutable HaarTable

    Raises:
        ResolutionError: f is sampled more coarsely than 2^-(depth+4)
    """
    table = HaarTable.from_function(f, depth)
    logger.info(f"Built Haar table of depth {depth} for {f.describe()}")
    return table


def q_value(table: HaarTable, interval: DyadicInterval) -> float:
    """q(d) = |I|^{-3/2} sum_{J in I} <f, h_J>^2 |J|^{1/2}, d the middle of I, truncated at the table depth."""
    if interval.n > table.depth:
        raise ContractError(f"Rank {interval.n} exceeds table depth {table.depth}")
    return float(table.q_levels()[interval.n][interval.k - 1])


def _cell_index(x: np.ndarray, n: int) -> np.ndarray:
    # right-continuous cells, the last one closed at 1
    return np.minimum(np.floor(x * 2 ** n).astype(int), 2 ** n - 1)


def z_value(table: HaarTable, x, depth: int = None) -> Union[float, np.ndarray]:
    """z(x) = sum_{n=0}^{depth} Q_n(x), with Q_n the q of the rank-n cell containing x."""
    depth = table.depth if depth is None else depth
    if depth > table.depth:
        raise ContractError(f"Depth {depth} exceeds table depth {table.depth}")
    scalar = np.ndim(x) == 0
    points = np.atleast_1d(np.asarray(x, dtype=float))
    total = np.zeros_like(points)
    for n in range(depth + 1):
        total += table.q_levels()[n][_cell_index(points, n)]
    return float(total[0]) if scalar else total


def potential_cells(table: HaarTable, depth: int) -> np.ndarray:
    """sum_{n<depth} Q_n on each of the 2^depth cells of rank depth."""
    if depth > table.depth + 1:
        raise ContractError(f"Depth {depth} exceeds table depth {table.depth} + 1")
    total = np.zeros(2 ** depth)
    for n in range(depth):
        total += np.repeat(table.q_levels()[n], 2 ** (depth - n))
    return total


def tail_statistics(table: HaarTable, depth: int = None, grid: int = 12,
                    ladder_size: int = TAIL_LADDER_SIZE) -> TailStatistics:
    """
    Empirical distribution of z on 2^grid cells and the log-measure slope.

    Args:
        table: Haar table of a function with sup norm at most 1
        depth: Truncation depth of z
        grid: z is sampled at the left end of each of 2^grid cells
        ladder_size: Number of lambda values

    Returns:
        TailStatistics with |{z > lambda}| on a uniform lambda ladder and the
        least-squares slope of log(measure) over measures in [2^{-grid+2}, 1/2]
        (NaN when fewer than two ladder points qualify)
    """
    z = z_value(table, np.arange(2 ** grid) / 2 ** grid, depth)
    top = 1.25 * float(z.max()) if z.max() > 0 else 1.0
    lambdas = np.linspace(0.0, top, ladder_size)
    measures = np.array([np.mean(z > lam) for lam in lambdas])
    usable = (measures >= 2.0 ** (-grid + 2)) & (measures <= 0.5)
    if usable.sum() >= 2 and np.ptp(lambdas[usable]) > 0:
        slope = float(stats.linregress(lambdas[usable], np.log(measures[usable])).slope)
    else:
        slope = float("nan")
    logger.debug(f"Tail statistics on 2^{grid} cells: slope {slope:.4g}")
    return TailStatistics(lambdas, measures, slope)


def partial_haar_sum(table: HaarTable, k: int, x) -> Union[float, np.ndarray]:
    """X_k(x) = 2^k int_I f over the rank-k cell I containing x."""
    if not 0 <= k <= table.depth + 1:
        raise ContractError(f"k={k} outside 0..{table.depth + 1}")
    scalar = np.ndim(x) == 0
    points = np.atleast_1d(np.asarray(x, dtype=float))
    values = table.averages[k][_cell_index(points, k)]
    return float(values[0]) if scalar else values


def haar_function(interval: DyadicInterval, x) -> Union[float, np.ndarray]:
    """h_J: |J|^{-1/2} on the left half of J, -|J|^{-1/2} on the right half."""
    scalar = np.ndim(x) == 0
    points = np.atleast_1d(np.asarray(x, dtype=float))
    n = interval.n
    inside = _cell_index(points, n) == interval.k - 1
    left = _cell_index(points, n + 1) % 2 == 0
    values = np.where(inside, np.where(left, 1.0, -1.0) * 2.0 ** (n / 2), 0.0)
    return float(values[0]) if scalar else values


def haar_synthesis(table: HaarTable, k: int, x) -> Union[float, np.ndarray]:
    """mean(f) + sum over rank < k of <f, h_J> h_J(x), summed term by term."""
    if not 0 <= k <= table.depth + 1:
        raise ContractError(f"k={k} outside 0..{table.depth + 1}")
    scalar = np.ndim(x) == 0
    points = np.atleast_1d(np.asarray(x, dtype=float))
    total = np.full_like(points, table.averages[0][0])
    for n in range(k):
        cells = _cell_index(points, n)
        left = _cell_index(points, n + 1) % 2 == 0
        total += table.coeff[n][cells] * 2.0 ** (n / 2) * np.where(left, 1.0, -1.0)
    return float(total[0]) if scalar else total


def bessel_check(table: HaarTable, f: FunctionSpec, tolerance: float = 1e-8) -> tuple:
    """(sum of squared coefficients, ||f||_2^2, passed) for Bessel's inequality."""
    energy = float(sum(np.sum(c ** 2) for c in table.coeff)) + float(table.averages[0][0]) ** 2
    norm = l2_norm_squared(f)
    passed = energy <= norm + tolerance
    if not passed:
        logger.warning(f"Bessel inequality violated: {energy:.12g} > {norm:.12g}")
    return energy, norm, passed
