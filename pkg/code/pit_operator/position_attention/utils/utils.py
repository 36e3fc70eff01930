"""
Utility functions
"""

import csv
import logging
import os
import platform
from datetime import datetime
from typing import List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import psutil  # noqa: E402

from .._shared.types import PathLike  # noqa: E402

LOG_FILENAME = "pit_log.log"


def create_folder(dest_dir: PathLike, verbose: Optional[bool] = False) -> None:
    """
    Create new folders.

    Parameters
    ------------------------

    dest_dir: PathLike
        Path where the folder will be created if it does not exist.

    verbose: Optional[bool]
        If we want to show information about the folder status. Default False.
    """

    if dest_dir and not os.path.exists(dest_dir):
        if verbose:
            print(f"Creating new directory: {dest_dir}")
        os.makedirs(dest_dir, exist_ok=True)


def create_logger(
    output_log_path: Optional[PathLike] = None, mode: Optional[str] = "w"
) -> logging.Logger:
    """
    Creates a logger that writes to the console and,
    when a folder is given, to ``<folder>/pit_log.log``.

    Parameters
    ------------
    output_log_path: Optional[PathLike]
        Folder where the log is going
        to be stored. Default: None

    mode: Optional[str]
        Open mode.
        Default: 'w'

    Returns
    -----------
    logging.Logger
        Created logger.
    """
    handlers = [logging.StreamHandler()]
    if output_log_path is not None:
        create_folder(output_log_path)
        handlers.append(logging.FileHandler(f"{output_log_path}/{LOG_FILENAME}", mode))

    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s - %(levelname)s : %(message)s",
        datefmt="%Y-%m-%d %H:%M",
        handlers=handlers,
        force=True,
    )

    logger = logging.getLogger("pit_operator")
    logger.setLevel(logging.INFO)

    return logger


def get_size(bytes, suffix: str = "B") -> str:
    """
    Scale bytes to its proper format
    e.g:
        1253656 => '1.20MB'
        1253656678 => '1.17GB'

    Parameters
    ----------
    bytes: bytes
        Bytes to scale

    suffix: str
        Suffix used for the conversion
    """
    factor = 1024
    for unit in ["", "K", "M", "G", "T", "P"]:
        if bytes < factor:
            return f"{bytes:.2f}{unit}{suffix}"
        bytes /= factor
    return f"{bytes:.2f}E{suffix}"


def print_system_information(logger: logging.Logger):
    """
    Prints system information

    Parameters
    ----------
    logger: logging.Logger
        Logger object
    """
    sep = "=" * 20

    logger.info(f"{sep} System Information {sep}")
    uname = platform.uname()
    logger.info(f"System: {uname.system}")
    logger.info(f"Node Name: {uname.node}")
    logger.info(f"Release: {uname.release}")
    logger.info(f"Machine: {uname.machine}")
    logger.info(f"Python: {platform.python_version()}")
    logger.info(f"Numpy: {np.__version__}")

    logger.info(f"{sep} Boot Time {sep}")
    bt = datetime.fromtimestamp(psutil.boot_time())
    logger.info(f"Boot Time: {bt.year}/{bt.month}/{bt.day} {bt.hour}:{bt.minute}:{bt.second}")

    logger.info(f"{sep} CPU Info {sep}")
    logger.info(f"Physical node cores: {psutil.cpu_count(logical=False)}")
    logger.info(f"Total node cores: {psutil.cpu_count(logical=True)}")

    cpufreq = psutil.cpu_freq()
    if cpufreq is not None:
        logger.info(f"Max Frequency: {cpufreq.max:.2f}Mhz")
        logger.info(f"Current Frequency: {cpufreq.current:.2f}Mhz")
    logger.info(f"Total CPU Usage: {psutil.cpu_percent()}%")

    logger.info(f"{sep} Memory Information {sep}")
    svmem = psutil.virtual_memory()
    logger.info(f"Total: {get_size(svmem.total)}")
    logger.info(f"Available: {get_size(svmem.available)}")
    logger.info(f"Used: {get_size(svmem.used)}")
    logger.info(f"Percentage: {svmem.percent}%")


def write_csv(path: PathLike, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    """
    Writes a comma-separated table with a header row.
    Floats are written with 17 significant digits.

    Parameters
    ----------
    path: PathLike
        Output file.

    header: Sequence[str]
        Column names.

    rows: Sequence[Sequence]
        Table rows.
    """
    folder = os.path.dirname(str(path))
    create_folder(folder)
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])


def format_value(value) -> str:
    """Text of a CSV cell"""
    if isinstance(value, (float, np.floating)):
        return "%.17g" % float(value)
    return str(value)


def generate_training_graph(
    losses: List[float],
    learning_rates: List[float],
    output_path: PathLike,
    prefix: str,
):
    """
    Plots the loss and learning rate per epoch.

    Parameters
    ----------
    losses: List[float]
        Mean training loss per epoch.

    learning_rates: List[float]
        Learning rate used in every epoch.

    output_path: PathLike
        Folder where the image will be saved

    prefix: str
        Prefix name for the image
    """
    if not len(losses):
        return

    epochs = np.arange(len(losses))
    plt.figure(figsize=(10, 6))

    plt.subplot(2, 1, 1)
    plt.semilogy(epochs, losses, label="Training loss")
    plt.xlabel("Epoch")
    plt.ylabel("Loss")
    plt.title("Training loss")
    plt.grid(True)
    plt.legend()

    plt.subplot(2, 1, 2)
    plt.plot(epochs, learning_rates, label="Learning rate")
    plt.xlabel("Epoch")
    plt.ylabel("Learning rate")
    plt.grid(True)
    plt.legend()

    plt.tight_layout()
    plt.savefig(f"{output_path}/{prefix}_training.png", bbox_inches="tight")
    plt.close()


def generate_convergence_graph(
    resolutions: Sequence[int],
    errors: Sequence[float],
    trained_at: int,
    output_path: PathLike,
    prefix: str,
):
    """
    Plots the test error per evaluation resolution.

    Parameters
    ----------
    resolutions: Sequence[int]
        Number of query points per evaluation.

    errors: Sequence[float]
        Test error at each resolution.

    trained_at: int
        Resolution seen during training.

    output_path: PathLike
        Folder where the image will be saved

    prefix: str
        Prefix name for the image
    """
    if not len(resolutions):
        return

    plt.figure(figsize=(8, 5))
    plt.plot(resolutions, errors, marker="o", label="Test error")
    plt.axvline(trained_at, color="gray", linestyle="--", label="Training resolution")
    plt.xscale("log", base=2)
    plt.xlabel("Query points")
    plt.ylabel("Relative error")
    plt.title("Discretization convergence")
    plt.grid(True)
    plt.legend()
    plt.tight_layout()
    plt.savefig(f"{output_path}/{prefix}_convergence.png", bbox_inches="tight")
    plt.close()
