"""
Functions on the circle, trigonometric kernels and Fourier partial sums.

Functions are either built-in parametric families or piecewise-linear
interpolants of uniform dyadic samples. Every integral against an
exponential is done per grid cell in closed form, so partial sums are exact
for the stored interpolant at any frequency the grid resolves.
"""

import csv
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np
from numpy.polynomial.legendre import leggauss

from src.config.logging_config import setup_logger
from src.config.settings import BUILTIN_GRID_DEPTH, GAUSS_NODES_PER_CELL, MODULUS_PROBE_DEPTH
from src.core.errors import ContractError, DomainError, InvariantError, ResolutionError

logger = setup_logger(__name__)

BUILTIN_ARITY = {
    "const": 1,
    "sin1": 0,
    "cos": 1,
    "tent": 0,
    "identity": 0,
    "haar": 3,
    "haar_series": 2,
    "lacunary": 2,
}
STANDARD_FUNCTION = "lacunary:6,0.5"
MIN_SAMPLES_PER_PERIOD = 4

# Taylor coefficients of A(p)=int_0^1 (1-s)e^{ips}ds and B(p)=int_0^1 s e^{ips}ds
_A_SERIES = [1.0 / (math.factorial(k) * (k + 1) * (k + 2)) for k in range(12)]
_B_SERIES = [1.0 / (math.factorial(k) * (k + 2)) for k in range(12)]
_SERIES_CUTOFF = 0.1


@dataclass(frozen=True, eq=False)
class FunctionSpec:
    """A continuous 1-periodic real function: a builtin family or sampled values."""

    kind: str
    name: str = ""
    params: tuple = ()
    grid_depth: int = 0
    values: np.ndarray = None
    gain: float = 1.0
    shift: float = 0.0

    @classmethod
    def builtin(cls, name: str, *params: float) -> "FunctionSpec":
        if name not in BUILTIN_ARITY:
            raise DomainError(f"Unknown builtin function '{name}'")
        if len(params) != BUILTIN_ARITY[name]:
            raise DomainError(f"Builtin '{name}' takes {BUILTIN_ARITY[name]} parameters, got {len(params)}")
        return cls(kind="builtin", name=name, params=tuple(float(p) for p in params))

    @classmethod
    def sampled(cls, values: Sequence[float]) -> "FunctionSpec":
        values = np.asarray(values, dtype=float)
        depth = _depth_from_length(len(values))
        if values[0] != values[-1]:
            raise InvariantError(f"Sampled function is not periodic: {values[0]} != {values[-1]}")
        values = values.copy()
        values.flags.writeable = False
        return cls(kind="sampled", grid_depth=depth, values=values)

    def rescaled(self, gain: float, shift: float) -> "FunctionSpec":
        """Return gain * f + shift, composed with any affine map already applied."""
        return replace(self, gain=self.gain * gain, shift=self.shift * gain + shift)

    def describe(self) -> str:
        if self.kind == "builtin":
            text = self.name + (":" + ",".join(_fmt(p) for p in self.params) if self.params else "")
        else:
            text = f"sampled[depth={self.grid_depth}]"
        if self.gain != 1.0 or self.shift != 0.0:
            text += f" (x{_fmt(self.gain)} {self.shift:+.6g})"
        return text


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Samples of some g on the uniform dyadic grid k 2^-depth, k = 0..2^depth."""

    depth: int
    values: np.ndarray

    def __post_init__(self):
        if len(self.values) != 2 ** self.depth + 1:
            raise InvariantError(
                f"GridFunction of depth {self.depth} needs {2 ** self.depth + 1} values, got {len(self.values)}"
            )

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, 2 ** self.depth + 1)


def _fmt(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def _depth_from_length(length: int) -> int:
    depth = int(round(math.log2(max(length - 1, 1))))
    if length < 2 or 2 ** depth + 1 != length:
        raise InvariantError(f"Sample count {length} is not 2^depth + 1")
    return depth


def _check_unit_interval(x: np.ndarray) -> None:
    if np.any(~np.isfinite(x)) or np.any(x < 0.0) or np.any(x > 1.0):
        raise DomainError("Evaluation points must lie in [0, 1]")


@lru_cache(maxsize=32)
def haar_series_coefficients(seed: int, levels: int) -> tuple:
    """Coefficients <f, h_J> of the random Haar series builtin, one array per level.

    c_J = eps_J * u_J * |J|^{1/2} / levels with eps = +-1 and u uniform in [0, 1],
    so every level contributes at most 1/levels in sup norm.
    """
    rng = np.random.default_rng(int(seed))
    coefficients = []
    for n in range(int(levels)):
        size = 2 ** n
        signs = rng.choice([-1.0, 1.0], size=size)
        amplitudes = rng.random(size)
        coefficients.append(signs * amplitudes * 2.0 ** (-n / 2) / levels)
    return tuple(coefficients)


def _haar_profile(x: np.ndarray, k: int, n: int) -> np.ndarray:
    """h_J(x) for J = [(k-1)2^-n, k 2^-n], right-continuous, closed at 1."""
    lo, hi = (k - 1) * 2.0 ** -n, k * 2.0 ** -n
    mid = 0.5 * (lo + hi)
    height = 2.0 ** (n / 2)
    inside_right = (x >= mid) & ((x < hi) | ((hi == 1.0) & (x == 1.0)))
    out = np.where((x >= lo) & (x < mid), height, 0.0)
    return np.where(inside_right, -height, out)


def _eval_builtin(f: FunctionSpec, x: np.ndarray) -> np.ndarray:
    name, p = f.name, f.params
    if name == "const":
        return np.full_like(x, p[0])
    if name == "sin1":
        return np.sin(2 * np.pi * x)
    if name == "cos":
        return np.cos(2 * np.pi * p[0] * x)
    if name == "tent":
        return 1.0 - np.abs(1.0 - 2.0 * x)
    if name == "identity":
        return x.copy()
    if name == "haar":
        return p[0] * _haar_profile(x, int(p[1]), int(p[2]))
    if name == "haar_series":
        total = np.zeros_like(x)
        for n, coeffs in enumerate(haar_series_coefficients(int(p[0]), int(p[1]))):
            cell = np.minimum((x * 2 ** n).astype(int), 2 ** n - 1)
            right = (x * 2 ** (n + 1)).astype(int) % 2 == 1
            right |= x == 1.0
            total += coeffs[cell] * 2.0 ** (n / 2) * np.where(right, -1.0, 1.0)
        return total
    if name == "lacunary":
        terms, exponent = int(p[0]), p[1]
        return sum(2.0 ** (-exponent * k) * np.cos(2 * np.pi * 2 ** k * x) for k in range(1, terms + 1))
    raise DomainError(f"Unknown builtin function '{name}'")


def eval_function(f: FunctionSpec, x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """
    Evaluate f at points of [0, 1].

    Args:
        f: Function to evaluate
        x: Scalar or array of evaluation points

    Returns:
        Values of the same shape as x
    """
    scalar = np.ndim(x) == 0
    points = np.atleast_1d(np.asarray(x, dtype=float))
    _check_unit_interval(points)
    if f.kind == "sampled":
        raw = np.interp(points, np.linspace(0.0, 1.0, len(f.values)), f.values)
    else:
        raw = _eval_builtin(f, points)
    values = f.gain * raw + f.shift
    return float(values[0]) if scalar else values


def to_grid(f: Union[FunctionSpec, GridFunction], depth: int = None) -> GridFunction:
    """Sample f on the uniform grid of the given depth (its own grid for sampled input)."""
    if isinstance(f, GridFunction):
        if depth is None or depth == f.depth:
            return f
        nodes = np.linspace(0.0, 1.0, 2 ** depth + 1)
        return GridFunction(depth, np.interp(nodes, f.nodes, f.values))
    if depth is None:
        depth = f.grid_depth if f.kind == "sampled" else BUILTIN_GRID_DEPTH
    nodes = np.linspace(0.0, 1.0, 2 ** depth + 1)
    return GridFunction(depth, eval_function(f, nodes))


def cell_integrals(f: FunctionSpec, depth: int) -> np.ndarray:
    """
    Integrals of f over the 2^depth dyadic cells of rank depth.

    Sampled functions are integrated exactly (their interpolant is linear per
    grid cell); builtins use Gauss-Legendre on cells fine enough that every
    builtin discontinuity sits on a cell boundary.

    Raises:
        ResolutionError: depth is finer than the sample grid
    """
    if f.kind == "sampled":
        if depth > f.grid_depth:
            raise ResolutionError(f"Depth {depth} exceeds the sample resolution 2^-{f.grid_depth}")
        h = 2.0 ** -f.grid_depth
        fine = f.gain * h * 0.5 * (f.values[:-1] + f.values[1:]) + f.shift * h
        level = f.grid_depth
    else:
        level = max(depth, BUILTIN_GRID_DEPTH)
        nodes, weights = leggauss(GAUSS_NODES_PER_CELL)
        h = 2.0 ** -level
        left = np.arange(2 ** level) * h
        points = left[:, None] + 0.5 * h * (nodes[None, :] + 1.0)
        values = eval_function(f, points.ravel()).reshape(points.shape)
        fine = 0.5 * h * values @ weights
    return fine.reshape(2 ** depth, 2 ** (level - depth)).sum(axis=1)


def _hat_moments(phi: np.ndarray) -> tuple:
    """A(p) = int_0^1 (1-s) e^{ips} ds and B(p) = int_0^1 s e^{ips} ds, elementwise."""
    phi = np.asarray(phi, dtype=float)
    small = np.abs(phi) < _SERIES_CUTOFF
    safe = np.where(small, 1.0, phi)
    e = np.exp(1j * safe)
    b = e / (1j * safe) + (e - 1.0) / safe ** 2
    a = (e - 1.0) / (1j * safe) - b
    ip = 1j * np.where(small, phi, 0.0)
    a_series = np.zeros_like(ip)
    b_series = np.zeros_like(ip)
    for ca, cb in zip(reversed(_A_SERIES), reversed(_B_SERIES)):
        a_series = a_series * ip + ca
        b_series = b_series * ip + cb
    return np.where(small, a_series, a), np.where(small, b_series, b)


def linear_exponential_weights(nodes: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    """
    Weights W with int g(x) e(z x) dx = sum_k g(x_k) W[k, z] over [x_0, x_last],
    exact for the piecewise-linear interpolant of the node values.

    Args:
        nodes: Increasing quadrature nodes
        freqs: Integer (or real) frequencies z

    Returns:
        Complex array of shape (len(nodes), len(freqs))
    """
    nodes = np.asarray(nodes, dtype=float)
    freqs = np.asarray(freqs, dtype=float)
    h = np.diff(nodes)
    omega = 2 * np.pi * freqs
    a, b = _hat_moments(h[:, None] * omega[None, :])
    base = h[:, None] * np.exp(1j * nodes[:-1, None] * omega[None, :])
    weights = np.zeros((len(nodes), len(freqs)), dtype=complex)
    weights[:-1] += base * a
    weights[1:] += base * b
    return weights


def _resolve(g: Union[GridFunction, FunctionSpec], r: int) -> GridFunction:
    if r < 0:
        raise ContractError(f"Partial sum order must be nonnegative, got {r}")
    grid = to_grid(g)
    if r > 0 and 2 ** grid.depth < MIN_SAMPLES_PER_PERIOD * r:
        raise ResolutionError(
            f"Grid of depth {grid.depth} has fewer than {MIN_SAMPLES_PER_PERIOD} samples per period of e({r}x)"
        )
    return grid


def fourier_coefficients(g: Union[GridFunction, FunctionSpec], r: int) -> np.ndarray:
    """Coefficients g^(l) = int g(x) e(-lx) dx for l = -r..r of the grid interpolant."""
    grid = _resolve(g, r)
    orders = np.arange(-r, r + 1)
    coefficients = np.empty(len(orders), dtype=complex)
    # column chunks keep the weight matrix small on fine grids
    for start in range(0, len(orders), 64):
        chunk = orders[start:start + 64]
        coefficients[start:start + 64] = grid.values @ linear_exponential_weights(grid.nodes, -chunk)
    return coefficients


def _weighted_sum(g, r: int, xi, weights_of_order) -> Union[float, np.ndarray]:
    scalar = np.ndim(xi) == 0
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    coefficients = fourier_coefficients(g, r) * weights_of_order(np.arange(-r, r + 1))
    phases = np.exp(2j * np.pi * np.outer(xi, np.arange(-r, r + 1)))
    values = (phases @ coefficients).real
    return float(values[0]) if scalar else values


def partial_sum(g: Union[GridFunction, FunctionSpec], r: int, xi) -> Union[float, np.ndarray]:
    """
    Fourier partial sum S_r(g)(xi) = int g(x) D_r(x - xi) dx.

    Args:
        g: Grid function or function spec (builtins are resolved on the default grid)
        r: Order of the partial sum
        xi: Scalar or array of evaluation points

    Returns:
        S_r(g) at xi

    Raises:
        ResolutionError: fewer than 4 grid samples per period of the top frequency
    """
    return _weighted_sum(g, r, xi, lambda orders: np.ones(len(orders)))


def cesaro_sum(g: Union[GridFunction, FunctionSpec], r: int, xi) -> Union[float, np.ndarray]:
    """Cesaro (Fejer) mean F_r(g)(xi) with weights 1 - |l|/(r+1)."""
    return _weighted_sum(g, r, xi, lambda orders: 1.0 - np.abs(orders) / (r + 1.0))


def partial_sums(g: Union[GridFunction, FunctionSpec], orders: Sequence[int], xi: np.ndarray) -> dict:
    """S_r(g)(xi) for several r from one set of coefficients."""
    top = max(orders)
    coefficients = fourier_coefficients(g, top)
    xi = np.asarray(xi, dtype=float)
    phases = np.exp(2j * np.pi * np.outer(xi, np.arange(-top, top + 1)))
    terms = phases * coefficients[None, :]
    results = {}
    for r in orders:
        results[r] = terms[:, top - r:top + r + 1].sum(axis=1).real
    return results


def cesaro_dirichlet_gap(g: Union[GridFunction, FunctionSpec], r: int, xi) -> Union[float, np.ndarray]:
    """|S_r g - F_r g| at xi."""
    return np.abs(partial_sum(g, r, xi) - cesaro_sum(g, r, xi))


def fejer_remainder_bound(g: Union[GridFunction, FunctionSpec], r: int) -> float:
    """
    Upper bound on sup |F_r g - g| for the piecewise-linear interpolant of g.

    The Fejer kernel is split at d = min((r+1)^{-1/2}, 1/2). Inside, the error
    is at most omega_g(d); outside, K_r(t) <= 1/(4 (r+1) t^2) leaves at most
    osc(g) / (2 (r+1) d).

    Raises:
        ContractError: r < 0
    """
    if r < 0:
        raise ContractError(f"Fejer order must be nonnegative, got {r}")
    grid = to_grid(g)
    size = 2 ** grid.depth
    d = min((r + 1.0) ** -0.5, 0.5)
    # omega of an interpolant is attained at nodes once d is a whole number of cells
    core = modulus_of_continuity(grid, math.ceil(d * size) / size, probe_depth=max(grid.depth, 4))
    oscillation = float(np.ptp(grid.values))
    return core + oscillation / (2.0 * (r + 1) * d)


def dirichlet_kernel(r: int, x) -> Union[float, np.ndarray]:
    """D_r(x) = sum_{|l|<=r} e(lx) = sin((2r+1) pi x) / sin(pi x), equal to 2r+1 at integers."""
    scalar = np.ndim(x) == 0
    y = np.atleast_1d(np.asarray(x, dtype=float))
    y = y - np.rint(y)
    denominator = np.sin(np.pi * y)
    at_integer = denominator == 0.0
    values = np.where(
        at_integer,
        2.0 * r + 1.0,
        np.sin((2 * r + 1) * np.pi * y) / np.where(at_integer, 1.0, denominator),
    )
    return float(values[0]) if scalar else values


def trig_block_sum(t: int, s: int, x, sign: str = "plus") -> Union[complex, np.ndarray]:
    """
    Sum of e(zx) over z = t+1..t+2^s (plus) or z = -t-2^s..-t-1 (minus), in closed form.
    """
    if s < 0:
        raise ContractError(f"Block exponent must be nonnegative, got {s}")
    if sign not in ("plus", "minus"):
        raise DomainError(f"Block sign must be 'plus' or 'minus', got '{sign}'")
    scalar = np.ndim(x) == 0
    y = np.atleast_1d(np.asarray(x, dtype=float))
    y = y - np.rint(y)
    length = 2 ** s
    denominator = np.sin(np.pi * y)
    at_integer = denominator == 0.0
    ratio = np.where(at_integer, float(length),
                     np.sin(np.pi * length * y) / np.where(at_integer, 1.0, denominator))
    values = np.exp(2j * np.pi * (t + (length + 1) / 2.0) * y) * ratio
    if sign == "minus":
        values = np.conj(values)
    return complex(values[0]) if scalar else values


def bernstein_globalize(grid_max: float, r: int, u: int) -> float:
    """
    Global sup bound of a degree-r trigonometric polynomial from its max on the
    grid 2^{-u-2} Z, via Bernstein's inequality.

    Raises:
        ContractError: r >= 2^u
    """
    if r >= 2 ** u:
        raise ContractError(f"Degree {r} is not below 2^{u}")
    return grid_max / (1.0 - math.pi / 4.0)


def h_half_norm(coeffs: Mapping[int, complex]) -> float:
    """sqrt(sum_k |k| |c_k|^2)."""
    return math.sqrt(sum(abs(k) * abs(c) ** 2 for k, c in coeffs.items()))


def modulus_of_continuity(f: Union[FunctionSpec, GridFunction], delta: float,
                          probe_depth: int = MODULUS_PROBE_DEPTH) -> float:
    """
    Estimate omega_f(delta) = sup |f(x) - f(y)| over cyclic dist(x, y) < delta.

    Scans 2^probe_depth base points against every grid offset up to and
    including delta, so the result bounds the strict supremum from above and
    equals it for continuous f once delta is a whole number of grid steps.

    Raises:
        DomainError: delta outside (0, 1/2]
    """
    if not 0.0 < delta <= 0.5:
        raise DomainError(f"delta must lie in (0, 1/2], got {delta}")
    if probe_depth < 4:
        raise ContractError(f"probe_depth must be at least 4, got {probe_depth}")
    size = 2 ** probe_depth
    nodes = np.arange(size) / size
    if isinstance(f, GridFunction):
        values = np.interp(nodes, f.nodes, f.values)
    else:
        values = eval_function(f, nodes)
    max_offset = max(1, int(math.floor(delta * size)))
    best = 0.0
    for offset in range(1, max_offset + 1):
        best = max(best, float(np.max(np.abs(values - np.roll(values, -offset)))))
    return best


def sup_norm(f: FunctionSpec, depth: int = BUILTIN_GRID_DEPTH) -> tuple:
    """(min, max) of f on the uniform grid of the given depth."""
    values = to_grid(f, depth if f.kind == "builtin" else None).values
    return float(values.min()), float(values.max())


def parse_function(text: str) -> FunctionSpec:
    """
    Parse a CLI function selector: 'name[:p1,p2,...]' or a path to an x,value CSV.
    """
    path = Path(text)
    if path.suffix.lower() == ".csv" or path.exists():
        return FunctionSpec.sampled(read_grid_csv(path).values)
    name, _, rest = text.partition(":")
    params = [float(p) for p in rest.split(",") if p.strip()] if rest else []
    return FunctionSpec.builtin(name.strip(), *params)


def read_grid_csv(path: Union[str, Path]) -> GridFunction:
    """Read an `x,value` CSV with 2^depth + 1 ascending rows."""
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != ["x", "value"]:
            raise InvariantError(f"{path}: expected header 'x,value', got {reader.fieldnames}")
        rows = [(float(row["x"]), float(row["value"])) for row in reader]
    xs = np.array([x for x, _ in rows])
    depth = _depth_from_length(len(rows))
    if not np.allclose(xs, np.linspace(0.0, 1.0, len(rows)), atol=1e-12):
        raise InvariantError(f"{path}: x column is not the uniform grid of depth {depth}")
    logger.info(f"Read grid function of depth {depth} from {path}")
    return GridFunction(depth, np.array([v for _, v in rows]))


def write_grid_csv(g: GridFunction, path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["x", "value"])
        for x, value in zip(g.nodes, g.values):
            writer.writerow([repr(float(x)), repr(float(value))])


def l2_norm_squared(f: FunctionSpec) -> float:
    """int_0^1 f^2, exact for sampled functions and Gauss-Legendre for builtins."""
    if f.kind == "sampled":
        v = f.gain * f.values + f.shift
        h = 2.0 ** -f.grid_depth
        return float(h * np.sum(v[:-1] ** 2 + v[:-1] * v[1:] + v[1:] ** 2) / 3.0)
    nodes, weights = leggauss(GAUSS_NODES_PER_CELL)
    h = 2.0 ** -BUILTIN_GRID_DEPTH
    left = np.arange(2 ** BUILTIN_GRID_DEPTH) * h
    points = left[:, None] + 0.5 * h * (nodes[None, :] + 1.0)
    values = eval_function(f, points.ravel()).reshape(points.shape)
    return float(np.sum(0.5 * h * values ** 2 @ weights))
