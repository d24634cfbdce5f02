"""
Hierarchical sign selection for structured vector-balancing instances.

Given values v[j, i] that decay away from a location l(j) and are capped by a
magnitude class 1/b(j), find signs eps so that every b(j)^beta |sum_i eps_i v[j, i]|
stays small. The solver groups indices into blocks of K, draws block signs at
random until every block sum obeys a decaying bound, collapses each block into
one entry of a reduced instance and recurses; small instances are solved by
exhaustive search.
"""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from src.config.logging_config import setup_logger
from src.config.settings import (BRUTE_FORCE_CHUNK, BRUTE_FORCE_LIMIT, DEFAULT_THREADS, SOLVER_ALPHA,
                                 SOLVER_BETA, SOLVER_BLOCK_SIZE, SOLVER_C2, SOLVER_C4, SOLVER_LEAF_SIZE,
                                 SOLVER_MAX_RETRIES, SOLVER_SIGMA_SCALE)
from src.core.errors import ContractError, DomainError, InvariantError, SolverFailure

logger = setup_logger(__name__)

ALPHA_FLOOR = 0.99
BETA_CEILING = 1.0 / 25.0
MAGNITUDE_TOLERANCE = 1e-9
K_POLICIES = ("fixed", "closed_form")
K_POLICY_ALIASES = {"paper_formula": "closed_form"}


@dataclass
class SignInstance:
    """Rows values[j] of length n with location l(j) and magnitude class b(j).

    The count budget |{j : l(j)=l, b(j)=b}| <= M b^gamma is kept as log M so
    that the budgets of deep recursion levels stay finite.
    """

    n: int
    values: np.ndarray
    locations: np.ndarray
    classes: np.ndarray
    gamma: float
    log_m: float
    alpha: float = SOLVER_ALPHA
    labels: Optional[List[str]] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1, self.n)
        self.locations = np.asarray(self.locations, dtype=int)
        self.classes = np.asarray(self.classes, dtype=int)
        if len(self.locations) != len(self.values) or len(self.classes) != len(self.values):
            raise InvariantError("Every entry needs one location and one magnitude class")

    @property
    def M(self) -> float:
        return math.exp(self.log_m) if self.log_m < 700 else math.inf

    @property
    def size(self) -> int:
        return len(self.values)


@dataclass
class SolverParams:
    alpha: float = SOLVER_ALPHA
    beta: float = SOLVER_BETA
    k_policy: str = "fixed"
    block_size: int = SOLVER_BLOCK_SIZE
    leaf_size: int = SOLVER_LEAF_SIZE
    sigma_scale: float = SOLVER_SIGMA_SCALE
    max_retries: int = SOLVER_MAX_RETRIES
    seed: int = 0
    c2: float = SOLVER_C2
    c4: float = SOLVER_C4
    threads: int = DEFAULT_THREADS

    def __post_init__(self):
        if not ALPHA_FLOOR < self.alpha <= 1.0:
            raise DomainError(f"alpha must lie in (0.99, 1], got {self.alpha}")
        if not 1.0 / 50.0 <= self.beta < BETA_CEILING:
            raise DomainError(f"beta must lie in [1/50, 1/25), got {self.beta}")
        self.k_policy = K_POLICY_ALIASES.get(self.k_policy, self.k_policy)
        if self.k_policy not in K_POLICIES:
            raise DomainError(f"Unknown K policy '{self.k_policy}'")
        if self.block_size < 2 or not 1 <= self.leaf_size <= BRUTE_FORCE_LIMIT or self.max_retries < 1:
            raise DomainError("block_size >= 2, leaf_size in [1, 20] and max_retries >= 1 are required")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SolverParams":
        return cls(**data)


def parse_k_policy(text: str) -> tuple:
    """
    Read a K policy selector: 'closed_form' or one of its aliases, 'fixed' or 'fixed:K'.

    Returns:
        (policy, K or None)

    Raises:
        DomainError: unknown policy or a K that is not an integer >= 2
    """
    name, _, value = text.strip().partition(":")
    policy = K_POLICY_ALIASES.get(name, name)
    if policy not in K_POLICIES:
        raise DomainError(f"Unknown K policy '{text}'; expected one of closed_form, paper_formula, fixed, fixed:K")
    if not value:
        return policy, None
    if policy != "fixed":
        raise DomainError(f"Only the fixed policy takes a block size, got '{text}'")
    try:
        size = int(value)
    except ValueError:
        raise DomainError(f"Block size in '{text}' is not an integer")
    if size < 2:
        raise DomainError(f"Block size must be at least 2, got {size}")
    return policy, size


@dataclass
class LevelDiagnostics:
    level: int
    n: int
    entries: int
    block_size: int
    sigma: float
    retries: List[int] = field(default_factory=list)
    violations: List[str] = field(default_factory=list)


@dataclass
class SolveResult:
    signs: np.ndarray
    value: float
    argmax: Optional[int]
    levels: List[LevelDiagnostics] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "signs": [int(s) for s in self.signs],
            "value": self.value,
            "argmax": self.argmax,
            "levels": [asdict(level) for level in self.levels],
        }


def cyclic_offset(i, l, n: int):
    """(i - l) mod n represented in {-floor((n-1)/2), ..., floor(n/2)}."""
    shift = (n - 1) // 2
    return (np.asarray(i) - np.asarray(l) + shift) % n - shift


def hypothesis_bounds(inst: SignInstance) -> np.ndarray:
    """min{1/(|(i - l(j)) mod n| + 1)^alpha, 1/b(j)} for every entry and index."""
    offsets = np.abs(cyclic_offset(np.arange(inst.n)[None, :], inst.locations[:, None], inst.n))
    return np.minimum(1.0 / (offsets + 1.0) ** inst.alpha, 1.0 / inst.classes[:, None])


def validate_instance(inst: SignInstance) -> List[str]:
    """Every violated magnitude or count condition, as readable strings."""
    violations = []
    if inst.size == 0:
        return violations
    if inst.locations.min() < 0 or inst.locations.max() >= inst.n:
        violations.append("location outside [0, n)")
    if inst.classes.min() < 1:
        violations.append("magnitude class below 1")
        return violations
    excess = np.abs(inst.values) - hypothesis_bounds(inst) * (1.0 + MAGNITUDE_TOLERANCE)
    for j in np.unique(np.nonzero(excess > 0)[0])[:10]:
        violations.append(f"entry {j}: magnitude exceeds the bound by {excess[j].max():.3g}")
    pairs, counts = np.unique(np.stack([inst.locations, inst.classes], axis=1), axis=0, return_counts=True)
    for (l, b), count in zip(pairs, counts):
        if math.log(count) > inst.log_m + inst.gamma * math.log(b) + 1e-12:
            violations.append(f"(l={l}, b={b}): {count} entries exceed M b^gamma")
    return violations


def verify_bound(inst: SignInstance, eps: Sequence[int], beta: float) -> tuple:
    """
    Achieved constant max_j b(j)^beta |sum_i eps_i v[j, i]| and its argmax j.
    """
    eps = np.asarray(eps, dtype=float)
    if eps.shape != (inst.n,):
        raise ContractError(f"Expected {inst.n} signs, got {eps.shape}")
    if inst.size == 0:
        return 0.0, None
    weighted = np.abs(inst.values @ eps) * inst.classes.astype(float) ** beta
    j = int(np.argmax(weighted))
    return float(weighted[j]), j


def _sign_rows(start: int, stop: int, n: int) -> np.ndarray:
    # row t is the t-th vector in lexicographic order with -1 < +1
    bits = (np.arange(start, stop)[:, None] >> np.arange(n - 1, -1, -1)[None, :]) & 1
    return 2.0 * bits - 1.0


def brute_force_signs(inst: SignInstance, beta: float) -> tuple:
    """
    Exact minimiser of verify_bound over all 2^n sign vectors.

    Ties go to the lexicographically smallest vector.

    Raises:
        ContractError: n exceeds the enumeration limit
    """
    if inst.n > BRUTE_FORCE_LIMIT:
        raise ContractError(f"Exhaustive search is limited to n <= {BRUTE_FORCE_LIMIT}, got {inst.n}")
    if inst.size == 0:
        return -np.ones(inst.n, dtype=int), 0.0
    weights = inst.classes.astype(float) ** beta
    best_value, best_signs = math.inf, None
    chunk = max(BRUTE_FORCE_CHUNK, 1)
    for start in range(0, 2 ** inst.n, chunk):
        signs = _sign_rows(start, min(start + chunk, 2 ** inst.n), inst.n)
        objective = np.max(np.abs(signs @ inst.values.T) * weights, axis=1)
        t = int(np.argmin(objective))
        if objective[t] < best_value:
            best_value, best_signs = float(objective[t]), signs[t]
    return best_signs.astype(int), best_value


def greedy_signs(inst: SignInstance, beta: float) -> np.ndarray:
    """Choose eps_0, eps_1, ... one at a time, each minimising the running max; -1 on ties."""
    weights = inst.classes.astype(float) ** beta
    partial = np.zeros(inst.size)
    signs = np.empty(inst.n, dtype=int)
    for i in range(inst.n):
        column = inst.values[:, i]
        minus = np.max(np.abs(partial - column) * weights, initial=0.0)
        plus = np.max(np.abs(partial + column) * weights, initial=0.0)
        signs[i] = 1 if plus < minus else -1
        partial += signs[i] * column
    return signs


def make_structured_instance(seed: int, n: int, gamma: float, M: float, alpha: float = SOLVER_ALPHA,
                             b_ladder: Sequence[int] = (1, 2, 4)) -> SignInstance:
    """
    Random instance saturating the hypotheses: floor(M b^gamma) entries for every
    (l, b) pair with values equal to +-bound, signs drawn per seed.
    """
    if n < 1 or M < 1 or gamma < 0:
        raise DomainError("n >= 1, M >= 1 and gamma >= 0 are required")
    rng = np.random.default_rng(seed)
    offsets = np.abs(cyclic_offset(np.arange(n)[None, :], np.arange(n)[:, None], n))
    rows, locations, classes = [], [], []
    for l in range(n):
        for b in b_ladder:
            bound = np.minimum(1.0 / (offsets[l] + 1.0) ** alpha, 1.0 / b)
            for _ in range(int(math.floor(M * b ** gamma))):
                rows.append(rng.choice([-1.0, 1.0], size=n) * bound)
                locations.append(l)
                classes.append(b)
    return SignInstance(n, np.array(rows).reshape(-1, n), locations, classes, gamma, math.log(M), alpha)


def _block_size(inst: SignInstance, alpha: float, beta: float, params: SolverParams) -> int:
    if params.k_policy == "fixed":
        size = params.block_size
    else:
        theta = (inst.gamma + 1.0) * max(inst.log_m, 0.0) / ((alpha - ALPHA_FLOOR) * (BETA_CEILING - beta))
        size = max(2, math.ceil(params.c4 * theta ** 7))
    return min(size, inst.n)


def _sample_block(inst: SignInstance, start: int, stop: int, bounds: np.ndarray, active: np.ndarray,
                  params: SolverParams, level: int, block: int) -> tuple:
    """First accepted block sign vector from the per-block stream, with its retry count."""
    rng = np.random.default_rng([params.seed, level, block])
    draws = rng.choice([-1.0, 1.0], size=(params.max_retries, stop - start))
    if not active.any():
        return draws[0], 1
    sums = np.abs(draws @ inst.values[active, start:stop].T)
    ratios = np.max(sums / bounds[active][None, :], axis=1)
    accepted = np.nonzero(ratios <= 1.0)[0]
    if len(accepted) == 0:
        best = int(np.argmin(ratios))
        raise SolverFailure(
            f"No block signs within the bound after {params.max_retries} draws at level {level}, block {block}",
            stage=(level, block), best_signs=draws[best].astype(int), best_ratio=float(ratios[best]),
        )
    return draws[accepted[0]], int(accepted[0]) + 1


def _solve(inst: SignInstance, alpha: float, beta: float, level: int, params: SolverParams,
           diagnostics: List[LevelDiagnostics]) -> np.ndarray:
    if inst.n <= params.leaf_size or inst.size == 0:
        signs, _ = brute_force_signs(inst, beta)
        diagnostics.append(LevelDiagnostics(level, inst.n, inst.size, 0, 0.0))
        return signs

    size = _block_size(inst, alpha, beta, params)
    blocks = math.ceil(inst.n / size)
    alpha_next = (alpha + ALPHA_FLOOR) / 2.0
    beta_next = (beta + BETA_CEILING) / 2.0
    sigma = params.sigma_scale * math.sqrt(
        (inst.gamma + 1.0) * (1.0 / (alpha - alpha_next) + 1.0 / (beta_next - beta) + max(inst.log_m, 0.0))
    )
    level_report = LevelDiagnostics(level, inst.n, inst.size, size, sigma)
    diagnostics.append(level_report)

    def run_block(s: int) -> tuple:
        start, stop = s * size, min((s + 1) * size, inst.n)
        distance = np.abs(cyclic_offset(start, inst.locations, inst.n))
        active = distance >= 2 * size
        bounds = np.minimum(
            sigma * math.sqrt(size) / (distance + 1.0) ** alpha_next,
            sigma * math.sqrt(size) / inst.classes.astype(float) ** (beta / beta_next),
        )
        signs, retries = _sample_block(inst, start, stop, bounds, active, params, level, s)
        sums = np.where(active, inst.values[:, start:stop] @ signs, 0.0)
        return signs, retries, sums

    if params.threads > 1:
        with ThreadPoolExecutor(max_workers=params.threads) as pool:
            outcomes = list(pool.map(run_block, range(blocks)))
    else:
        outcomes = [run_block(s) for s in range(blocks)]

    delta = np.concatenate([signs for signs, _, _ in outcomes])
    level_report.retries = [retries for _, retries, _ in outcomes]
    block_sums = np.stack([sums for _, _, sums in outcomes], axis=1)

    scale = 2.0 * sigma * size ** (0.5 - alpha_next)
    classes = np.maximum(
        np.floor(2.0 * inst.classes.astype(float) ** (beta / beta_next) / size ** alpha_next), 1
    ).astype(int)
    keep = np.any(block_sums != 0.0, axis=1)
    reduced = SignInstance(
        n=blocks,
        values=block_sums[keep] / scale,
        locations=(inst.locations[keep] // size),
        classes=classes[keep],
        gamma=2.0 * inst.gamma + 1.0,
        log_m=math.log(params.c2) + inst.log_m + (2.0 * inst.gamma + 3.0) * math.log(size),
        alpha=alpha_next,
    )
    level_report.violations = validate_instance(reduced)
    if level_report.violations:
        logger.warning(f"Reduced instance at level {level + 1} misses {len(level_report.violations)} hypotheses")

    mu = _solve(reduced, alpha_next, beta_next, level + 1, params, diagnostics)
    return (np.repeat(mu, size)[:inst.n] * delta).astype(int)


def solve_signs(inst: SignInstance, params: SolverParams) -> SolveResult:
    """
    Hierarchical sign choice with a per-level validator and diagnostics.

    Args:
        inst: Instance meeting the magnitude and count hypotheses
        params: Solver knobs and seed

    Returns:
        SolveResult with signs, the achieved constant for params.beta and per-level diagnostics

    Raises:
        SolverFailure: some block exhausted its retry budget
    """
    diagnostics: List[LevelDiagnostics] = []
    signs = _solve(inst, params.alpha, params.beta, 0, params, diagnostics)
    value, argmax = verify_bound(inst, signs, params.beta)
    logger.info(f"Solved n={inst.n} with {inst.size} entries over {len(diagnostics)} levels: constant {value:.6g}")
    return SolveResult(signs, value, argmax, diagnostics)


def instance_to_dict(inst: SignInstance) -> dict:
    return {
        "n": inst.n,
        "gamma": inst.gamma,
        "log_M": inst.log_m,
        "M": inst.M if math.isfinite(inst.M) else None,
        "alpha": inst.alpha,
        "entries": [
            {
                "j": j,
                "l": int(inst.locations[j]),
                "b": int(inst.classes[j]),
                "values": [float(v) for v in inst.values[j]],
                **({"label": inst.labels[j]} if inst.labels else {}),
            }
            for j in range(inst.size)
        ],
    }


def instance_from_dict(data: dict) -> SignInstance:
    entries = sorted(data["entries"], key=lambda entry: entry["j"])
    n = int(data["n"])
    log_m = data["log_M"] if data.get("log_M") is not None else math.log(data["M"])
    labels = [entry["label"] for entry in entries] if entries and "label" in entries[0] else None
    return SignInstance(
        n=n,
        values=np.array([entry["values"] for entry in entries], dtype=float).reshape(-1, n),
        locations=[entry["l"] for entry in entries],
        classes=[entry["b"] for entry in entries],
        gamma=float(data["gamma"]),
        log_m=float(log_m),
        alpha=float(data.get("alpha", SOLVER_ALPHA)),
        labels=labels,
    )


def write_instance_json(inst: SignInstance, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(instance_to_dict(inst), indent=2), encoding="utf-8")


def read_instance_json(path: Union[str, Path]) -> SignInstance:
    return instance_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
