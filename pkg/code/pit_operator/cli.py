"""
Command-line entry point: ``pit <command> [options]``.

Exit codes: 0 success, 1 validation failure (configuration,
shapes, container format, failed gradient check), 2 any other
runtime failure.
"""

import argparse
import logging
import os
import sys
from typing import List, Optional, Sequence

from .position_attention import harness
from .position_attention._shared.errors import ConfigError, ContainerFormatError, ShapeError
from .position_attention.config import RunConfig, build_run, load_model
from .position_attention.container import read_dataset
from .position_attention.datasets import TEST, make_dataset
from .position_attention.model import PiTConfig, count_params
from .position_attention.training import evaluate, train
from .position_attention.utils import utils

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class GradientCheckFailed(Exception):
    """Raised when a finite-difference comparison fails"""


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def cmd_train(args: argparse.Namespace) -> int:
    """Builds data and model from a run config, trains, writes outputs"""
    run = RunConfig.from_file(args.config)
    utils.print_system_information(logger)
    split, model = build_run(run)
    logger.info(f"Model has {count_params(model)} trainable parameters")

    if args.out:
        utils.create_folder(os.path.dirname(os.path.abspath(args.out)))
    log = train(model, split, run.train, checkpoint_path=args.out, config_text=run.to_text())

    if args.log:
        utils.write_csv(args.log, ["epoch", "loss", "lr", "seconds"], log.rows())
        utils.generate_training_graph(
            log.losses, log.learning_rates, os.path.dirname(os.path.abspath(args.log)), "pit"
        )
    print(f"test_{run.train.eval_metric},{log.test_metric:.17g}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    """Evaluates a checkpoint on a dataset file or a generated task"""
    model, run = load_model(args.checkpoint)
    if args.data:
        dataset = read_dataset(args.data)
    else:
        task_run = RunConfig.from_file(args.task) if args.task else run
        task = task_run.task
        if args.resolution:
            task = task.covering([args.resolution])
            task.input_resolution = args.resolution
            task.output_resolution = args.resolution
        dataset = make_dataset(task, seed=task_run.seed, split=TEST)

    metric = evaluate(model, dataset, metric=run.train.eval_metric)
    print(f"{run.train.eval_metric},{metric:.17g}")
    return EXIT_OK


def cmd_convergence(args: argparse.Namespace) -> int:
    """Zero-shot super-resolution sweep of a checkpoint"""
    model, run = load_model(args.checkpoint)
    report = harness.super_resolution_sweep(
        model,
        run.task,
        args.resolutions,
        seed=run.seed,
        metric=run.train.eval_metric,
        output_dir=args.out,
    )
    print(f"resolution,{report.metric}")
    for resolution, error in zip(report.resolutions, report.errors):
        print(f"{resolution},{error:.17g}")
    return EXIT_OK


def cmd_theorem1(args: argparse.Namespace) -> int:
    """Convergence of position-attention to its integral operator"""
    rows = []
    print("lambda,n,mean,spread,median,slope")
    for lambda_eff in args.lambda_values:
        table = harness.theorem1_experiment(
            lambda_eff, n_list=args.n_list, repetitions=args.reps, seed=args.seed, dim=args.dim
        )
        for n, mean, spread, median in table.rows():
            row = [lambda_eff, n, mean, spread, median, table.slope]
            rows.append(row)
            print(",".join(utils.format_value(v) for v in row))
    if args.out:
        utils.write_csv(args.out, ["lambda", "n", "mean", "spread", "median", "slope"], rows)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    """Finite-difference check on tiny models of every variant and lambda mode"""
    if args.config:
        run = RunConfig.from_file(args.config, validate=False)
    else:
        run = RunConfig(pit=PiTConfig(encoding_dim=8, processor_depth=2, heads=2))
    run.pit.validate()
    results = harness.gradient_check_suite(
        run.pit, seed=run.seed, max_entries_per_param=args.max_entries
    )
    print("variant,lambda_mode,max_error,passed")
    for variant, mode, report in results:
        print(f"{variant},{mode},{report.max_error:.17g},{report.passed}")
    if not all(report.passed for _, _, report in results):
        raise GradientCheckFailed("At least one gradient check failed")
    return EXIT_OK


def cmd_scaling(args: argparse.Namespace) -> int:
    """Forward wall time against the input mesh size"""
    run = RunConfig.from_file(args.config, validate=False) if args.config else RunConfig()
    run.pit.validate()
    table = harness.scaling_benchmark(
        run.pit, n_list=args.n_list, repeats=args.repeats, seed=run.seed, output_dir=args.out
    )
    print("n_a,seconds")
    for n, seconds in table.rows():
        print(f"{n},{seconds:.17g}")
    print(f"r_squared,{table.r_squared:.17g}")
    return EXIT_OK


def cmd_lambda_report(args: argparse.Namespace) -> int:
    """Interpretable radius of every attention head"""
    model, _ = load_model(args.checkpoint)
    report = harness.lambda_report(model)
    print(report.to_table())
    if args.out:
        utils.write_csv(args.out, ["layer", "head", "radius"], report.rows())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    """Argument parser of every subcommand"""
    parser = argparse.ArgumentParser(prog="pit", description="Position-induced Transformer")
    parser.add_argument("--log-dir", default=None, help="Folder for pit_log.log")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="Checkpoint path")
    p.add_argument("--log", default=None, help="Per-epoch CSV log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    source = p.add_mutually_exclusive_group()
    source.add_argument("--data", default=None, help="PITD dataset file")
    source.add_argument("--task", default=None, help="Run config whose task is generated")
    p.add_argument("--resolution", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("convergence", help="Zero-shot super-resolution sweep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--resolutions", type=_int_list, default=[64, 128, 256])
    p.add_argument("--out", default=None, help="Folder for convergence.csv and the plot")
    p.set_defaults(func=cmd_convergence)

    p = sub.add_parser("theorem1", help="Monte-Carlo convergence of position-attention")
    p.add_argument("--lambda", dest="lambda_values", type=_float_list, default=[1.0, 10.0])
    p.add_argument("--n-list", type=_int_list, default=[64, 256, 1024])
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV output")
    p.set_defaults(func=cmd_theorem1)

    p = sub.add_parser("gradcheck", help="Finite-difference gradient checks")
    p.add_argument("--config", default=None)
    p.add_argument("--max-entries", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("scaling", help="Forward time against input mesh size")
    p.add_argument("--config", default=None)
    p.add_argument("--n-list", type=_int_list, default=[1024, 2048, 4096])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", default=None, help="Folder for scaling.csv")
    p.set_defaults(func=cmd_scaling)

    p = sub.add_parser("lambda-report", help="Attention radii of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None, help="CSV output")
    p.set_defaults(func=cmd_lambda_report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Runs one subcommand.

    Parameters
    ----------
    argv: Optional[Sequence[str]]
        Arguments without the program name. Default: sys.argv[1:]

    Returns
    -------
    int
        Process exit code.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_VALIDATION

    utils.create_logger(args.log_dir)
    try:
        return args.func(args)
    except (ConfigError, ShapeError, ContainerFormatError, GradientCheckFailed) as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
