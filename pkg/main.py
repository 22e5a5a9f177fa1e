"""
Main orchestrator script for solving throw policies, training intent
estimation and simulating assisted throws
"""
import argparse
import os
import sys
import uuid
from typing import Dict, Optional, Sequence

from src.core.errors import ThrowAssistError
from src.core.pipeline import cmd_assist, cmd_evaluate, cmd_solve, cmd_synth, cmd_train_intent
from src.utils.config_manager import DEFAULT_CONFIG_PATH, RunConfig, load_config, parse_config
from src.utils.logger_config import get_logger, setup_logging
from src.utils.progress_utils import setup_progress_logger


def _weights(text: str) -> tuple:
    try:
        values = tuple(float(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")
    if len(values) < 1:
        raise argparse.ArgumentTypeError("at least one weight is required")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="throw-assist",
        description="Blend optimal throwing policies by estimated motor intent"
    )
    parser.add_argument(
        "--config",
        type=str,
        default=DEFAULT_CONFIG_PATH,
        help=f"Path to JSON config file (default: {DEFAULT_CONFIG_PATH})"
    )
    parser.add_argument("--seed", type=int, default=None, help="Seed for every stochastic element")
    parser.add_argument("--out", type=str, default=None, help="Output directory (overrides config output_dir)")
    parser.add_argument(
        "--verbose", "-v",
        action="store_true",
        help="Enable verbose logging (DEBUG level) on the console"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    solve = subparsers.add_parser("solve", help="Solve iLQR policies for the configured tasks")
    solve.add_argument("--task", default="all", help="Task name or 'all' (default: all)")
    solve.add_argument("--tol-cost", type=float, default=None, help="Cost-change tolerance")
    solve.add_argument("--max-iter", type=int, default=None, help="Maximum solver iterations")
    solve.add_argument("--reg-init", type=float, default=None, help="Initial regularization")

    train = subparsers.add_parser("train-intent", help="Fit the PLS intent model on synthetic trials")
    train.add_argument("--trials", type=int, default=None, help="Training trials per distance")
    train.add_argument("--components", type=int, default=None, help="Number of PLS components")
    train.add_argument("--window-ms", type=float, default=None, help="Feature window length (ms)")
    train.add_argument("--emg-lead-ms", type=float, default=None, help="EMG activation lead (ms)")
    train.add_argument("--onset-threshold", type=float, default=None, help="Shoulder speed onset threshold (rad/s)")
    train.add_argument("--cv-lead", action="store_true", help="Select the EMG lead by cross-validation")

    assist = subparsers.add_parser("assist", help="Simulate one intent-assisted throw")
    source = assist.add_mutually_exclusive_group()
    source.add_argument("--distance", type=float, default=None, help="Generate a trial for this distance (m)")
    source.add_argument("--stream", type=str, default=None, help="Sensor stream CSV to assist")
    assist.add_argument("--weights", type=_weights, default=None, help="Fixed blend weights w1,w2 (skips intent)")
    assist.add_argument("--value-scale", type=float, default=None, help="Scale applied to values in the blend")
    assist.add_argument("--sigmoid-a", type=float, default=None, help="Weight map gain")
    assist.add_argument("--sigmoid-b", type=float, default=None, help="Weight map offset")
    assist.add_argument("--onset-threshold", type=float, default=None, help="Shoulder speed onset threshold (rad/s)")
    assist.add_argument("--window-ms", type=float, default=None, help="Feature window length (ms)")
    assist.add_argument("--emg-lead-ms", type=float, default=None, help="EMG activation lead (ms)")

    evaluate = subparsers.add_parser("evaluate", help="Summarize policies, blends and hit rates")
    evaluate.add_argument("--weights", type=_weights, default=None, help="Fixed blend weights w1,w2")
    evaluate.add_argument("--value-scale", type=float, default=None, help="Scale applied to values in the blend")
    evaluate.add_argument("--trials", type=int, default=None, help="Shots per condition")
    evaluate.add_argument("--perturbation", type=float, default=None, help="Start-state perturbation std")

    synth = subparsers.add_parser("synth", help="Write synthetic sensor streams")
    synth.add_argument("--distance", type=float, nargs="+", default=None, help="Throw distances (m)")
    synth.add_argument("--trials", type=int, default=None, help="Trials per distance")

    return parser


def config_overrides(args: argparse.Namespace) -> Dict[str, object]:
    """Map command-line flags onto dotted config keys"""
    overrides = {"seed": args.seed, "output_dir": args.out}
    if args.command == "solve":
        overrides.update({
            "solver.tol_cost": args.tol_cost,
            "solver.max_iter": args.max_iter,
            "solver.reg_init": args.reg_init,
        })
    elif args.command == "train-intent":
        overrides.update({
            "intent.trials_per_distance": args.trials,
            "intent.components": args.components,
            "intent.window_ms": args.window_ms,
            "intent.emg_lead_ms": args.emg_lead_ms,
            "intent.onset_threshold": args.onset_threshold,
        })
    elif args.command == "assist":
        overrides.update({
            "blend.value_scale": args.value_scale,
            "intent.sigmoid_a": args.sigmoid_a,
            "intent.sigmoid_b": args.sigmoid_b,
        })
    elif args.command == "evaluate":
        overrides.update({
            "blend.weights": args.weights,
            "blend.value_scale": args.value_scale,
            "evaluation.trials": args.trials,
            "evaluation.perturbation_scale": args.perturbation,
        })
    return overrides


def run_command(args: argparse.Namespace, config: RunConfig, run_id: str) -> int:
    if args.command == "solve":
        return cmd_solve(config, task=args.task, run_id=run_id)
    if args.command == "train-intent":
        return cmd_train_intent(config, cv_lead=args.cv_lead, run_id=run_id)
    if args.command == "assist":
        return cmd_assist(config, distance=args.distance, stream_path=args.stream, weights=args.weights,
                          window_ms=args.window_ms, emg_lead_ms=args.emg_lead_ms,
                          onset_threshold=args.onset_threshold, run_id=run_id)
    if args.command == "evaluate":
        return cmd_evaluate(config, run_id=run_id)
    return cmd_synth(config, distances=args.distance, trials=args.trials, run_id=run_id)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point; returns the process exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse reports usage errors with 2, which is reserved for domain failures
        return 0 if e.code in (0, None) else 1

    # Nothing is written under the output directory until the configuration validates
    try:
        config = parse_config(load_config(args.config), config_overrides(args))
    except ThrowAssistError as e:
        print(f"error: failed to load configuration: {e}", file=sys.stderr)
        return e.exit_code

    # Setup logging
    log_level = os.environ.get("LOG_LEVEL", "INFO")
    log_dir = os.environ.get("LOG_DIR") or os.path.join(config.output_dir, "logs")
    json_logging = os.environ.get("JSON_LOGGING", "false").lower() == "true"
    setup_logging(
        log_level=log_level,
        log_dir=log_dir,
        log_file="throw_assist.log",
        json_logging=json_logging,
        verbose=args.verbose
    )
    setup_progress_logger(log_dir)

    run_id = str(uuid.uuid4())
    logger = get_logger(__name__, {"run_id": run_id})

    logger.info(f"Running '{args.command}' with seed {config.seed}, output {config.output_dir}")
    try:
        return run_command(args, config, run_id)
    except ThrowAssistError as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        logger.error(f"{args.command} failed on I/O: {e}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        logger.error(f"Unexpected error in {args.command}: {e}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
