"""
Relative losses, Adam, the cosine-annealing schedule and the
training loop.
"""

import logging
import sys
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, TextIO

import numpy as np

from . import autodiff as ad
from ._shared.errors import ConfigError, NonFiniteError, ShapeError, TrainingDivergedError
from ._shared.seeds import DATA_ORDER, derive_rng
from ._shared.types import PathLike
from .autodiff import Param, Tensor2
from .container import write_checkpoint
from .datasets import OperatorDataset, TaskSplit
from .model import PiTModel

logger = logging.getLogger(__name__)

REL_L1_MEAN = "rel_l1_mean"
REL_L2_MEAN = "rel_l2_mean"
REL_L1_MEDIAN = "rel_l1_median"
REL_L2_MEDIAN = "rel_l2_median"
LOSS_KINDS = (REL_L1_MEAN, REL_L2_MEAN)
EVAL_METRICS = (REL_L1_MEDIAN, REL_L2_MEAN, REL_L1_MEAN, REL_L2_MEDIAN)


@dataclass
class TrainConfig:
    """
    Optimization settings.
    """

    epochs: int = 500
    batch_size: int = 8
    initial_lr: float = 1e-3
    loss_kind: str = REL_L2_MEAN
    eval_metric: str = REL_L2_MEAN
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self):
        """
        Raises
        ------
        ConfigError
            With the name of the first invalid field.
        """
        if self.epochs < 1:
            raise ConfigError("epochs", "must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be at least 1")
        if not self.initial_lr > 0:
            raise ConfigError("initial_lr", "must be positive")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError("loss_kind", f"expected one of {LOSS_KINDS}")
        if self.eval_metric not in EVAL_METRICS:
            raise ConfigError("eval_metric", f"expected one of {EVAL_METRICS}")
        for key in ("adam_beta1", "adam_beta2"):
            if not (0.0 <= getattr(self, key) < 1.0):
                raise ConfigError(key, "must lie in [0, 1)")
        if not self.adam_eps > 0:
            raise ConfigError("adam_eps", "must be positive")


@dataclass
class TrainLog:
    """Per-epoch training record"""

    losses: List[float] = field(default_factory=list)
    learning_rates: List[float] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)
    test_metric: float = float("nan")
    metric: str = REL_L2_MEAN

    def rows(self) -> List[List]:
        """Table rows epoch, loss, lr, seconds"""
        return [
            [epoch, loss, lr, sec]
            for epoch, (loss, lr, sec) in enumerate(
                zip(self.losses, self.learning_rates, self.seconds)
            )
        ]


def _batched(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 2:
        return values[np.newaxis]
    if values.ndim != 3:
        raise ShapeError(f"Expected N x d or B x N x d values, got {values.shape}")
    return values


def _truth_norms(truth: np.ndarray, order: int) -> np.ndarray:
    if order == 2:
        norms = np.sqrt(np.sum(truth * truth, axis=(-2, -1)))
    else:
        norms = np.sum(np.abs(truth), axis=(-2, -1))
    if np.any(norms == 0.0):
        raise ValueError(f"Relative l{order} error undefined: a reference sample has zero norm")
    return norms


def _relative(pred, truth, order: int) -> np.ndarray:
    pred = _batched(pred.value if isinstance(pred, Tensor2) else pred)
    truth = _batched(truth.value if isinstance(truth, Tensor2) else truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"Prediction {pred.shape} and reference {truth.shape} differ")
    norms = _truth_norms(truth, order)
    diff = pred - truth
    if order == 2:
        return np.sqrt(np.sum(diff * diff, axis=(-2, -1))) / norms
    return np.sum(np.abs(diff), axis=(-2, -1)) / norms


def relative_l2(pred, truth) -> np.ndarray:
    """
    Relative l2 error ||pred - truth||_2 / ||truth||_2 of
    every sample.

    Parameters
    ----------
    pred: Union[np.ndarray, Tensor2]
        Predictions, N x d or B x N x d.

    truth: Union[np.ndarray, Tensor2]
        References of the same shape.

    Returns
    -------
    np.ndarray
        One error per sample.

    Raises
    ------
    ValueError
        If a reference has zero norm.
    """
    return _relative(pred, truth, 2)


def relative_l1(pred, truth) -> np.ndarray:
    """Relative l1 error of every sample"""
    return _relative(pred, truth, 1)


def aggregate_metric(pred, truth, metric: str) -> float:
    """
    Aggregates per-sample relative errors with the mean or
    the median (central pair averaged for even counts).
    """
    if metric not in EVAL_METRICS:
        raise ValueError(f"Unknown metric {metric}")
    errors = relative_l1(pred, truth) if metric.startswith("rel_l1") else relative_l2(pred, truth)
    if metric.endswith("median"):
        return float(np.median(errors))
    return float(np.mean(errors))


def relative_loss(pred: Tensor2, truth: np.ndarray, loss_kind: str) -> Tensor2:
    """
    Mean relative error of a batch as a differentiable node.

    Parameters
    ----------
    pred: Tensor2
        Predictions, B x N x d.

    truth: np.ndarray
        References, B x N x d.

    loss_kind: str
        rel_l2_mean or rel_l1_mean.

    Returns
    -------
    Tensor2
        1x1 loss.
    """
    if loss_kind not in LOSS_KINDS:
        raise NotImplementedError(f"Loss {loss_kind} not currently implemented.")
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"Prediction {pred.shape} and reference {truth.shape} differ")

    tape = pred.tape
    diff = ad.sub(pred, tape.constant(truth))
    if loss_kind == REL_L2_MEAN:
        norms = _truth_norms(_batched(truth), 2)
        errors = ad.sqrt(ad.sum_matrix(ad.square(diff)))
    else:
        norms = _truth_norms(_batched(truth), 1)
        errors = ad.sum_matrix(ad.absolute(diff))
    inverse = (1.0 / norms).reshape(errors.shape)
    return ad.mean_all(ad.mul(errors, tape.constant(inverse)))


def cosine_lr(epoch: int, config: TrainConfig) -> float:
    """
    Cosine annealing, lr(e) = 0.5 lr0 (1 + cos(pi e / E)).
    """
    return 0.5 * config.initial_lr * (1.0 + np.cos(np.pi * epoch / config.epochs))


@dataclass
class AdamState:
    """First and second moments per Param and the step count"""

    step: int = 0
    first_moment: Dict[int, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Sequence[Param],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    project: Optional[Callable[[], None]] = None,
) -> AdamState:
    """
    One bias-corrected Adam update of every trainable Param
    from its ``grad`` buffer.

    Parameters
    ----------
    params: Sequence[Param]
        Parameters updated in place.

    state: AdamState
        Optimizer moments, updated in place.

    lr: float
        Step size.

    beta1, beta2, eps: float
        Adam constants.

    project: Optional[Callable[[], None]]
        Constraint projection applied after the update
        (the lambda clamp of tan mode). Default: None

    Returns
    -------
    AdamState
        The updated state.
    """
    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step

    for p in params:
        if not p.trainable:
            continue
        key = id(p)
        m = state.first_moment.setdefault(key, np.zeros_like(p.value))
        v = state.second_moment.setdefault(key, np.zeros_like(p.value))
        m *= beta1
        m += (1.0 - beta1) * p.grad
        v *= beta2
        v += (1.0 - beta2) * p.grad * p.grad
        p.value -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)

    if project is not None:
        project()
    return state


def evaluate(
    model: PiTModel,
    dataset: OperatorDataset,
    metric: str = REL_L2_MEAN,
    batch_size: int = 32,
) -> float:
    """
    Aggregated test metric of ``model`` on ``dataset``.
    """
    predictions = predict_dataset(model, dataset, batch_size=batch_size)
    return aggregate_metric(predictions, dataset.outputs, metric)


def predict_dataset(model: PiTModel, dataset: OperatorDataset, batch_size: int = 32) -> np.ndarray:
    """Predictions for every sample, B x N_u x d_u"""
    out = []
    for start in range(0, len(dataset), batch_size):
        batch = dataset.inputs[start : start + batch_size]
        out.append(model.predict(batch, dataset.input_mesh, dataset.output_mesh))
    return np.concatenate(out, axis=0)


def train(
    model: PiTModel,
    dataset: TaskSplit,
    config: TrainConfig,
    checkpoint_path: Optional[PathLike] = None,
    config_text: str = "",
    progress: Optional[TextIO] = None,
) -> TrainLog:
    """
    Trains ``model`` on the train split with Adam and cosine
    annealing, then evaluates the test split.

    Parameters
    ----------
    model: PiTModel
        Model updated in place.

    dataset: TaskSplit
        Train and test datasets.

    config: TrainConfig
        Optimization settings.

    checkpoint_path: Optional[PathLike]
        If given, the trained model is written there.
        Default: None

    config_text: str
        Run configuration echoed into the checkpoint.
        Default: ""

    progress: Optional[TextIO]
        Stream receiving one ``epoch,loss,lr,seconds``
        record per epoch. Default: standard output

    Returns
    -------
    TrainLog
        Per-epoch loss, learning rate and time.

    Raises
    ------
    TrainingDivergedError
        If a batch loss is not finite.
    """
    config.validate()
    progress = sys.stdout if progress is None else progress
    train_ds = dataset.train
    order_rng = derive_rng(config.seed, DATA_ORDER)
    params = model.parameters()
    state = AdamState()
    log = TrainLog(metric=config.eval_metric)

    logger.info(f"{20*'='} Training {20*'='}")
    logger.info(
        f"{len(train_ds)} training samples, {config.epochs} epochs, "
        f"batch size {config.batch_size}, loss {config.loss_kind}"
    )

    for epoch in range(config.epochs):
        start = time.perf_counter()
        lr = cosine_lr(epoch, config)
        order = order_rng.permutation(len(train_ds))
        batch_losses = []

        for batch_idx, first in enumerate(range(0, len(order), config.batch_size)):
            index = order[first : first + config.batch_size]
            model.zero_grad()
            tape = ad.Tape()
            try:
                pred = model.forward(
                    train_ds.inputs[index], train_ds.input_mesh, train_ds.output_mesh, tape=tape
                )
                loss = relative_loss(pred, train_ds.outputs[index], config.loss_kind)
                tape.backward(loss)
            except NonFiniteError as e:
                raise TrainingDivergedError(
                    f"Epoch {epoch}, batch {batch_idx}: non-finite value ({e})"
                ) from e

            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(f"Epoch {epoch}, batch {batch_idx}: loss {value}")
            batch_losses.append(value)
            adam_step(
                params,
                state,
                lr,
                beta1=config.adam_beta1,
                beta2=config.adam_beta2,
                eps=config.adam_eps,
                project=model.project_constraints,
            )

        seconds = time.perf_counter() - start
        epoch_loss = float(np.mean(batch_losses))
        log.losses.append(epoch_loss)
        log.learning_rates.append(float(lr))
        log.seconds.append(seconds)
        print(f"{epoch},{epoch_loss:.17g},{lr:.17g},{seconds:.17g}", file=progress, flush=True)
        logger.debug(f"Epoch {epoch}: loss {epoch_loss} lr {lr} in {seconds:.3f}s")

    log.test_metric = evaluate(model, dataset.test, metric=config.eval_metric)
    logger.info(f"Final test {config.eval_metric}: {log.test_metric}")

    if checkpoint_path is not None:
        write_checkpoint(checkpoint_path, model, config_text)
        logger.info(f"Checkpoint written to {checkpoint_path}")

    return log
