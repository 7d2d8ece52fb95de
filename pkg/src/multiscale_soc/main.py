import argparse
import json
import logging
import sys
from typing import List, Optional, Sequence

from multiscale_soc.acceptance import run_acceptance
from multiscale_soc.model import ScenarioConfig, load_scenario_file
from multiscale_soc.pipeline import (
    PIPELINE_STAGES,
    StageOptions,
    emit_report,
    load_manifest,
    run_pipeline,
)
from multiscale_soc.response import (
    AcceptanceError,
    ErrorCode,
    SocError,
    StageType,
    invalid_argument,
    make_error_response,
)

logger = logging.getLogger(__name__)

BANNER = r"""
     __  __       _ _   _               _         ____   ___   ____
    |  \/  |_   _| | |_(_)___  ___ __ _| | ___   / ___| / _ \ / ___|
    | |\/| | | | | | __| / __|/ __/ _` | |/ _ \  \___ \| | | | |
    | |  | | |_| | | |_| \__ \ (_| (_| | |  __/   ___) | |_| | |___
    |_|  |_|\__,_|_|\__|_|___/\___\__,_|_|\___|  |____/ \___/ \____|
    """


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got '{text}'") from e


def get_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        description="Multiscale stochastic optimal control: homogenization and convergence experiments."
    )
    # Global arguments
    parser.add_argument(
        "--scenario",
        type=str,
        default=None,
        help="Scenario file (.ini). Without it the default Example 1 scenario is used.",
    )
    parser.add_argument(
        "--out-dir",
        type=str,
        default="data/output",
        help="Directory receiving one subdirectory per stage (default: data/output).",
    )
    parser.add_argument("--seed", type=int, default=None, help="Override the scenario seed.")
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="Cap the worker threads used for concurrent solves (default: Python's executor size).",
    )
    parser.add_argument(
        "--check",
        action="store_true",
        help="Run the built-in acceptance suite on reduced grids; exit 4 on failure.",
    )
    parser.add_argument(
        "--auto-deps",
        action="store_true",
        help="Run missing upstream stages instead of rejecting the request.",
    )
    parser.add_argument(
        "--log-level",
        type=str,
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging verbosity (default: INFO).",
    )

    commands = parser.add_subparsers(dest="command")

    density = commands.add_parser("density", help="Invariant densities of the frozen fast dynamics.")
    density.add_argument("--x-bar", type=_floats, default=None, help="Slow values (default: all slow nodes).")
    density.add_argument("--n", type=int, default=None, help="Torus nodes per dimension.")
    density.add_argument("--out", type=str, default=None, help="Output CSV.")

    homogenize = commands.add_parser("homogenize", help="Effective coefficient tables.")
    homogenize.add_argument("--out", type=str, default=None, help="Output CSV.")

    cell = commands.add_parser("cell", help="Cell-t-problem growth rate against the quadrature formula.")
    cell.add_argument("--x-bar", type=float, default=None)
    cell.add_argument("--g", type=float, default=None)
    cell.add_argument("--H", type=float, default=None)
    cell.add_argument("--T", type=float, default=None, help="Horizon (default: scenario cell_horizon).")
    cell.add_argument("--out", type=str, default=None, help="Output CSV.")

    commands.add_parser("solve-effective", help="Effective HJB by policy iteration.")

    multiscale = commands.add_parser("solve-multiscale", help="Multiscale HJB on slow x torus grids.")
    multiscale.add_argument("--epsilon", type=_floats, default=None, help="Epsilons (default: scenario list).")

    converge = commands.add_parser("converge", help="Envelope errors against the effective value.")
    converge.add_argument("--epsilon", type=_floats, default=None, help="Epsilons (default: scenario list).")

    simulate = commands.add_parser("simulate", help="Monte Carlo costs of the PDE policies.")
    simulate.add_argument(
        "--which", type=str, choices=["multiscale", "effective", "both"], default="both"
    )
    simulate.add_argument("--x0", type=_floats, default=None, help="Initial slow states.")
    simulate.add_argument("--y0", type=_floats, default=None, help="Initial fast state.")
    simulate.add_argument("--epsilon", type=float, default=None)
    simulate.add_argument("--paths", type=int, default=None)
    simulate.add_argument("--dt", type=float, default=None)
    simulate.add_argument("--per-path", action="store_true", help="Also write per-path costs.")

    pipeline = commands.add_parser("pipeline", help="Run several stages in dependency order.")
    pipeline.add_argument(
        "--stages",
        type=str,
        default=",".join(s.value for s in PIPELINE_STAGES),
        help="Comma separated stages (default: all).",
    )

    commands.add_parser("report", help="Summary and plot data files for a finished run.")

    return parser.parse_args(argv)


def _options(args: argparse.Namespace) -> StageOptions:
    command = args.command
    opts = StageOptions()
    if command == "density":
        opts.density_x_bar = args.x_bar
        opts.density_n = args.n
        opts.density_out = args.out
    elif command == "homogenize":
        opts.homogenize_out = args.out
    elif command == "cell":
        point = (args.x_bar, args.g, args.H)
        if any(v is not None for v in point):
            if any(v is None for v in point):
                raise invalid_argument(StageType.CELL, "--x-bar, --g and --H must be given together")
            opts.cell_points = [point]
        opts.cell_horizon = args.T
        opts.cell_out = args.out
    elif command in ("solve-multiscale", "converge"):
        opts.epsilons = args.epsilon
    elif command == "simulate":
        opts.simulate_which = ("effective", "multiscale") if args.which == "both" else (args.which,)
        if args.x0:
            opts.simulate_x0 = args.x0
        if args.y0:
            opts.simulate_y0 = args.y0
        opts.simulate_epsilon = args.epsilon
        opts.simulate_paths = args.paths
        opts.simulate_dt = args.dt
        opts.per_path = args.per_path
    return opts


def load_config(args: argparse.Namespace) -> ScenarioConfig:
    cfg = load_scenario_file(args.scenario) if args.scenario else ScenarioConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def dispatch(args: argparse.Namespace) -> int:
    cfg = load_config(args)

    if args.check:
        report = run_acceptance(cfg)
        print(report.summary())
        if not report.passed:
            failed = [r.name for r in report.results if not r.passed]
            raise AcceptanceError(f"acceptance checks failed: {', '.join(failed)}", StageType.CHECK)
        if args.command is None:
            return 0

    if args.command is None:
        raise invalid_argument(StageType.SCENARIO, "no command given; see --help")

    if args.command == "report":
        summary, _ = emit_report(load_manifest(args.out_dir))
        print(summary)
        return 0

    stages = args.stages.split(",") if args.command == "pipeline" else [args.command]
    logger.info("Running %s into %s", ", ".join(stages), args.out_dir)
    manifest = run_pipeline(
        cfg,
        [s.strip() for s in stages if s.strip()],
        args.out_dir,
        auto_deps=args.auto_deps,
        threads=args.threads,
        options=_options(args),
    )
    for record in manifest.stages:
        print(f"{record.stage}: {', '.join(record.outputs)} ({record.wall_clock_s:.2f} s)")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = get_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    logging.captureWarnings(True)
    print(BANNER)

    try:
        return dispatch(args)
    except SocError as e:
        logger.error("%s failed: %s", e.stage.value, e.message)
        print(e.to_json(), file=sys.stderr)
        return ErrorCode(e.code).exit_code
    except OSError as e:
        logger.error("I/O failure: %s", e)
        response = make_error_response(StageType.SCENARIO, ErrorCode.IO_FAILURE, str(e))
        print(json.dumps(response), file=sys.stderr)
        return ErrorCode.IO_FAILURE.exit_code


if __name__ == "__main__":
    sys.exit(main())
