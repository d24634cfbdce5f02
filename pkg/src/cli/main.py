"""
Command-line entry points: Haar analysis, homeomorphism building, sign
solving, Monte-Carlo fields, the reduction pipeline and invariant suites.

Every subcommand writes into one output directory, next to the resolved
config.json and a manifest.json with the seed, the version and the sha256
of every input and output file.
"""

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from src.config.logging_config import attach_log_file, setup_logger
from src.config.settings import DEFAULT_THREADS, EVAL_GRID_DEPTH, HAAR_DEPTH, MC_SAMPLES, OUTPUT_DIR, VERSION
from src.core.errors import USAGE_EXIT_CODE, ContractError, RearrangementError
from src.core.funcspace import STANDARD_FUNCTION, parse_function
from src.core.haar import haar_coefficients, tail_statistics
from src.core.homeo import (ThetaMap, build_psi_inverse, check_holder, read_dyadic_map_csv,
                            read_homeomorphism_csv, theta_from_tau, write_homeomorphism_csv)
from src.core.reducer import (ReductionConfig, evaluate_result, improvement_factor, run_pipeline,
                              write_evaluation_csv, write_ledger_csv, write_reports_json)
from src.core.rh import RHRestrictor, expectation_field, read_restrictor_json, write_restrictor_json
from src.core.signsolver import (SolverParams, greedy_signs, parse_k_policy, read_instance_json, solve_signs,
                                  verify_bound)
from src.cli.verify import SUITES, run_suite

logger = setup_logger(__name__)

REDUCTION_FLAGS = {
    "depth": "depth",
    "eta": "eta",
    "umax": "u_max",
    "mmax": "m_max",
    "delta_min": "delta_min",
    "samples": "mc_samples",
    "strategy": "sign_strategy",
    "c1_headroom": "c1_headroom",
}
GLOBAL_FLAGS = ("command", "func", "config", "log_file", "threads", "seed", "function", "out")


@dataclass
class RunConfig:
    """Everything needed to repeat a run: one JSON document per output directory."""

    command: str
    function: str = STANDARD_FUNCTION
    seed: int = 0
    threads: int = DEFAULT_THREADS
    out: Optional[str] = None
    reduction: ReductionConfig = field(default_factory=ReductionConfig)
    options: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.reduction, dict):
            self.reduction = ReductionConfig.from_dict(self.reduction)

    @property
    def out_dir(self) -> Path:
        return Path(self.out) if self.out else OUTPUT_DIR / f"{self.command}-seed{self.seed}"

    def to_dict(self) -> dict:
        data = asdict(self)
        data["reduction"] = self.reduction.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return cls(**data)


def write_run_config(config: RunConfig, path: Path) -> None:
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True), encoding="utf-8")


def read_run_config(path: Path) -> RunConfig:
    return RunConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def sha256_of(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(out_dir: Path, config: RunConfig, inputs: Sequence[Path], outputs: Sequence[Path]) -> Path:
    """Write config.json and manifest.json; outputs are hashed after they are complete."""
    config_path = out_dir / "config.json"
    write_run_config(config, config_path)
    manifest = {
        "seed": config.seed,
        "version": VERSION,
        "inputs": {str(path): sha256_of(path) for path in inputs},
        "outputs": {path.name: sha256_of(path) for path in list(outputs) + [config_path]},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    logger.info(f"Wrote {len(outputs)} outputs and manifest to {out_dir}")
    return path


def _input_files(*candidates: Optional[str]) -> List[Path]:
    return [Path(c) for c in candidates if c and Path(c).is_file()]


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then a --config file, then explicit flags."""
    config = read_run_config(Path(args.config)) if args.config else RunConfig(command=args.command)
    config.command = args.command
    for name in ("function", "seed", "threads", "out"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(config, name, value)
    flags = {k: v for k, v in vars(args).items() if k not in GLOBAL_FLAGS and v is not None}
    if args.command == "reduce":
        updates = {REDUCTION_FLAGS[k]: v for k, v in flags.items() if k in REDUCTION_FLAGS}
        config.reduction = replace(config.reduction, seed=config.seed, threads=config.threads, **updates)
        flags = {k: v for k, v in flags.items() if k not in REDUCTION_FLAGS}
    config.options = {**config.options, **flags}
    return config


def _cmd_haar(config: RunConfig) -> List[Path]:
    f = parse_function(config.function)
    depth = int(config.options.get("depth", HAAR_DEPTH))
    table = haar_coefficients(f, depth)
    out_dir = config.out_dir
    q_path, tail_path = out_dir / "q.csv", out_dir / "tail.csv"
    with open(q_path, "w", encoding="utf-8", newline="") as handle:
        handle.write("d_k,d_n,q\n")
        for n, level in enumerate(table.q_levels()):
            for k, value in enumerate(level, start=1):
                handle.write(f"{k},{n},{float(value)!r}\n")
    tail = tail_statistics(table, depth, int(config.options.get("grid", 12)))
    with open(tail_path, "w", encoding="utf-8", newline="") as handle:
        handle.write("lambda,measure\n")
        for lam, measure in zip(tail.lambdas, tail.measures):
            handle.write(f"{float(lam)!r},{float(measure)!r}\n")
    logger.info(f"sup q = {table.max_q():.6g}, tail slope {tail.slope:.4g}")
    return [q_path, tail_path]


def _cmd_build(config: RunConfig) -> List[Path]:
    depth = int(config.options.get("depth", HAAR_DEPTH))
    theta_file, tau_file = config.options.get("theta_file"), config.options.get("tau_file")
    if bool(theta_file) == bool(tau_file):
        raise ContractError("Exactly one of --theta-file and --tau-file is required")
    if theta_file:
        theta = ThetaMap(depth, read_dyadic_map_csv(theta_file, depth, default=0.5).values)
    else:
        table = haar_coefficients(parse_function(config.function), depth)
        tau = read_dyadic_map_csv(tau_file, depth, default=0.0)
        theta = theta_from_tau(table, tau, float(config.options.get("eta", 0.125)))
    h = build_psi_inverse(theta, depth)
    report = check_holder(h)
    logger.info(f"Hoelder increments: worst ratios {report.worst_lower_ratio:.4g} / {report.worst_upper_ratio:.4g}")
    path = config.out_dir / "phi.csv"
    write_homeomorphism_csv(h, path)
    return [path]


def solver_params_from_options(options: dict, seed: int = 0, threads: int = DEFAULT_THREADS) -> SolverParams:
    """SolverParams from CLI or config-file options; 'fixed:K' and --block-size both set K."""
    policy, size = parse_k_policy(str(options.get("k_policy", SolverParams.k_policy)))
    if options.get("block_size") is not None:
        size = int(options["block_size"])
    return SolverParams(
        beta=float(options.get("beta", SolverParams.beta)),
        sigma_scale=float(options.get("sigma_scale", SolverParams.sigma_scale)),
        k_policy=policy,
        block_size=SolverParams.block_size if size is None else size,
        seed=seed,
        threads=threads,
    )


def _cmd_signs(config: RunConfig) -> List[Path]:
    instance_file = config.options.get("instance")
    if not instance_file:
        raise ContractError("--instance is required")
    inst = read_instance_json(instance_file)
    params = solver_params_from_options(config.options, config.seed, config.threads)
    if config.options.get("strategy", "hierarchical") == "greedy":
        signs = greedy_signs(inst, params.beta)
        value, argmax = verify_bound(inst, signs, params.beta)
        payload = {"signs": [int(s) for s in signs], "value": value, "argmax": argmax, "levels": []}
    else:
        payload = solve_signs(inst, params).to_dict()
    payload["beta"] = params.beta
    path = config.out_dir / "signs.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return [path]


def _cmd_eval_field(config: RunConfig) -> List[Path]:
    f = parse_function(config.function)
    restrictor_file = config.options.get("restrictor")
    if restrictor_file:
        r = read_restrictor_json(restrictor_file)
    else:
        r = RHRestrictor.unrestricted(int(config.options.get("depth", 10)))
    table = haar_coefficients(f, r.depth)
    xs = np.linspace(0.0, 1.0, int(config.options.get("points", 65)))
    estimates = expectation_field(f, table, r, float(config.options.get("eta", 0.125)), xs,
                                  int(config.options.get("samples", MC_SAMPLES)), config.seed, config.threads)
    path = config.out_dir / "field.csv"
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write("x,mean,stderr\n")
        for x, estimate in zip(xs, estimates):
            handle.write(f"{float(x)!r},{estimate.mean!r},{estimate.stderr!r}\n")
    return [path]


def _cmd_reduce(config: RunConfig) -> List[Path]:
    f = parse_function(config.function)
    out_dir = config.out_dir
    result = run_pipeline(f, config.reduction, out_dir)
    rows = evaluate_result(f, result.phi, config.reduction.u_max,
                           int(config.options.get("grid", EVAL_GRID_DEPTH)))
    logger.info(f"Improvement over the identity at the top frequency: {improvement_factor(rows):.4g}")
    paths = [out_dir / "phi.csv", out_dir / "reports.json", out_dir / "evaluation.csv", out_dir / "restrictor.json",
             out_dir / "ledger.csv"]
    write_homeomorphism_csv(result.phi, paths[0])
    write_reports_json(result.reports, paths[1])
    write_evaluation_csv(rows, paths[2])
    write_restrictor_json(result.restrictor, paths[3])
    write_ledger_csv(result.ledger, paths[4])
    return paths


def _cmd_eval(config: RunConfig) -> List[Path]:
    phi_file = config.options.get("phi")
    if not phi_file:
        raise ContractError("--phi is required")
    rows = evaluate_result(parse_function(config.function), read_homeomorphism_csv(phi_file),
                           int(config.options.get("umax", 6)), int(config.options.get("grid", EVAL_GRID_DEPTH)))
    path = config.out_dir / "evaluation.csv"
    write_evaluation_csv(rows, path)
    return [path]


HANDLERS = {
    "haar": _cmd_haar,
    "build": _cmd_build,
    "signs": _cmd_signs,
    "eval-field": _cmd_eval_field,
    "reduce": _cmd_reduce,
    "eval": _cmd_eval,
}
INPUT_OPTIONS = ("theta_file", "tau_file", "instance", "restrictor", "phi")


def run_command(config: RunConfig) -> List[Path]:
    """Run one file-producing subcommand and write config.json and manifest.json next to its outputs."""
    out_dir = config.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        outputs = HANDLERS[config.command](config)
    except Exception as e:
        logger.error(f"Command '{config.command}' failed: {str(e)}")
        raise
    inputs = _input_files(config.function, *(config.options.get(name) for name in INPUT_OPTIONS))
    write_manifest(out_dir, config, inputs, outputs)
    return outputs


def _cmd_verify(args: argparse.Namespace) -> int:
    results = run_suite(args.suite, args.seed or 0)
    for result in results:
        sys.stdout.write(json.dumps(result.to_dict(), sort_keys=True) + "\n")
    return 0 if all(result.passed for result in results) else 1


class UsageExitParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with EX_USAGE."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(USAGE_EXIT_CODE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = UsageExitParser(prog="dyadic-rearrangement",
                             description="Change of variable for uniformly convergent Fourier partial sums")
    parser.add_argument("--threads", type=int, default=None, help="Worker threads (1 forces sequential runs)")
    parser.add_argument("--log-file", type=str, default=None, help="Also log at DEBUG level to this file")
    parser.add_argument("--config", type=str, default=None, help="RunConfig JSON whose values act as defaults")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=UsageExitParser)

    def add(name: str, help_text: str, function: bool = True) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=str, default=None, help="Output directory")
        if function:
            p.add_argument("--function", type=str, default=None,
                           help=f"Builtin selector such as '{STANDARD_FUNCTION}' or an x,value CSV")
        return p

    p_haar = add("haar", "Haar coefficients, q on dyadic intervals and the tail of z")
    p_haar.add_argument("--depth", type=int, default=None)
    p_haar.add_argument("--grid", type=int, default=None)

    p_build = add("build", "Build psi^-1 from a theta or tau map")
    p_build.add_argument("--theta-file", type=str, default=None)
    p_build.add_argument("--tau-file", type=str, default=None)
    p_build.add_argument("--eta", type=float, default=None)
    p_build.add_argument("--depth", type=int, default=None)

    p_signs = add("signs", "Choose signs for an instance JSON", function=False)
    p_signs.add_argument("--instance", type=str, default=None)
    p_signs.add_argument("--beta", type=float, default=None)
    p_signs.add_argument("--sigma-scale", type=float, default=None)
    p_signs.add_argument("--k-policy", default=None, help="closed_form (alias paper_formula), fixed or fixed:K")
    p_signs.add_argument("--block-size", type=int, default=None, help="K for the fixed policy")
    p_signs.add_argument("--strategy", choices=("hierarchical", "greedy"), default=None)

    p_field = add("eval-field", "Monte-Carlo E f(phi(x)) on a uniform grid")
    p_field.add_argument("--restrictor", type=str, default=None)
    p_field.add_argument("--depth", type=int, default=None)
    p_field.add_argument("--eta", type=float, default=None)
    p_field.add_argument("--points", type=int, default=None)
    p_field.add_argument("--samples", type=int, default=None)

    p_reduce = add("reduce", "Run the full reduction pipeline and evaluate Phi")
    p_reduce.add_argument("--depth", type=int, default=None)
    p_reduce.add_argument("--eta", type=float, default=None)
    p_reduce.add_argument("--umax", type=int, default=None)
    p_reduce.add_argument("--mmax", type=int, default=None)
    p_reduce.add_argument("--delta-min", type=float, default=None)
    p_reduce.add_argument("--samples", type=int, default=None)
    p_reduce.add_argument("--strategy", choices=("hierarchical", "greedy"), default=None)
    p_reduce.add_argument("--c1-headroom", type=float, default=None, help="C1 as a multiple of the first peak ratio")
    p_reduce.add_argument("--grid", type=int, default=None)

    p_eval = add("eval", "Partial-sum deviations of f o Phi for a stored Phi")
    p_eval.add_argument("--phi", type=str, default=None)
    p_eval.add_argument("--umax", type=int, default=None)
    p_eval.add_argument("--grid", type=int, default=None)

    p_verify = sub.add_parser("verify", help="Run an invariant suite")
    p_verify.add_argument("--suite", choices=SUITES, default="core")
    p_verify.add_argument("--seed", type=int, default=None)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse arguments, run the subcommand and map package errors to exit codes.

    Returns:
        0 on success, the error's exit code otherwise (64 for usage errors)
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.log_file:
        attach_log_file(args.log_file)
    try:
        if args.command == "verify":
            return _cmd_verify(args)
        config = resolve_run_config(args)
        for path in run_command(config):
            sys.stdout.write(f"{path}\n")
        return 0
    except RearrangementError as e:
        logger.error(f"{type(e).__name__}: {str(e)}")
        return e.exit_code
    except (OSError, ValueError) as e:
        logger.error(f"Cannot read or write run files: {str(e)}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
