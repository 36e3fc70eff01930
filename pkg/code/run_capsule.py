""" top level run script """

import os

from pit_operator.experiment import run_experiment


def run():
    """Trains PiT on the periodic smoothing task"""
    # Code ocean folders
    results_folder = os.path.abspath("../results")

    # Encoder-processor-decoder, 1D latent mesh of 32 points
    pit_params = {
        "encoding_dim": 64,
        "processor_depth": 4,
        "heads": 2,
        "quantile_encoder": 0.1,
        "quantile_decoder": 0.1,
        "latent_resolution": (32,),
        "lambda_mode": "tan",
        "attention_variant": "posatt",
        "space_dim": 1,
    }

    train_params = {
        "epochs": 200,
        "batch_size": 8,
        "initial_lr": 1e-3,
        "loss_kind": "rel_l2_mean",
        "eval_metric": "rel_l2_mean",
        "seed": 0,
    }

    task_params = {
        "task": "smoothing",
        "n_train": 256,
        "n_test": 64,
        "input_resolution": 64,
        "output_resolution": 64,
        "kernel_width": 0.05,
    }

    run_experiment(
        pit_params=pit_params,
        train_params=train_params,
        task_params=task_params,
        results_folder=results_folder,
        super_resolutions=[64, 128, 256],
    )


if __name__ == "__main__":
    run()
