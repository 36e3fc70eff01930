"""
Main file to run a training experiment
"""

import os
from time import time
from typing import Dict, List, Optional

from .position_attention import harness
from .position_attention._shared.types import PathLike
from .position_attention.config import RunConfig, build_run
from .position_attention.datasets import TaskConfig
from .position_attention.model import PiTConfig, count_params
from .position_attention.training import TrainConfig, TrainLog, train
from .position_attention.utils import utils


def run_experiment(
    pit_params: Dict,
    train_params: Dict,
    task_params: Dict,
    results_folder: PathLike,
    super_resolutions: Optional[List[int]] = None,
) -> TrainLog:
    """
    Trains a PiT model on a synthetic task and writes every
    artifact of the run into the results folder.

    Parameters
    ----------
    pit_params: Dict
        Model parameters, keys of PiTConfig.

    train_params: Dict
        Optimizer parameters, keys of TrainConfig.

    task_params: Dict
        Task generator parameters, keys of TaskConfig.

    results_folder: PathLike
        Path of the results folder. Created if missing.

    super_resolutions: Optional[List[int]]
        Resolutions of the zero-shot sweep run after training.
        Default: None, no sweep.

    Returns
    -------
    TrainLog
        Per-epoch records and the final test metric.
    """
    run = RunConfig(
        pit=PiTConfig(**pit_params),
        train=TrainConfig(**train_params),
        task=TaskConfig(**task_params),
    )
    run.validate()

    utils.create_folder(results_folder)
    logger = utils.create_logger(output_log_path=results_folder)
    logger.info(f"{20*'='} Position-induced Transformer - {run.task.task} {20*'='}")
    utils.print_system_information(logger)

    config_path = os.path.join(results_folder, "run_config.txt")
    with open(config_path, "w", encoding="utf-8") as fp:
        fp.write(run.to_text())

    start_time = time()
    split, model = build_run(run)
    logger.info(
        f"Generated {len(split.train)} train and {len(split.test)} test samples, "
        f"model with {count_params(model)} parameters in {time() - start_time:.2f} seconds"
    )

    log = train(
        model,
        split,
        run.train,
        checkpoint_path=os.path.join(results_folder, "model.pitd"),
        config_text=run.to_text(),
    )
    utils.write_csv(
        os.path.join(results_folder, "training_log.csv"),
        ["epoch", "loss", "lr", "seconds"],
        log.rows(),
    )
    utils.generate_training_graph(log.losses, log.learning_rates, results_folder, "pit")

    report = harness.lambda_report(model)
    logger.info(f"Attention radii:\n{report.to_table()}")
    utils.write_csv(
        os.path.join(results_folder, "lambda_report.csv"),
        ["layer", "head", "radius"],
        report.rows(),
    )

    if super_resolutions:
        harness.super_resolution_sweep(
            model,
            run.task,
            super_resolutions,
            seed=run.seed,
            metric=run.train.eval_metric,
            output_dir=results_folder,
        )

    end_time = time()
    logger.info(
        f"Test {run.train.eval_metric}: {log.test_metric} - "
        f"experiment time: {end_time - start_time:.2f} seconds"
    )
    return log
