"""
Verification experiments: the quadrature oracle of the kernel
integral operator induced by position-attention, Monte-Carlo
convergence, zero-shot super-resolution sweeps, complexity
scaling, lambda reports and finite-difference gradient checks.
"""

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import attention as att
from . import autodiff as ad
from ._shared.errors import ConfigError, ShapeError
from ._shared.seeds import TRAIN_DRAWS, derive_rng
from ._shared.types import FieldFunction, PathLike
from .datasets import DARCY, TEST, OperatorDataset, TaskConfig, downsample_dataset, make_dataset
from .geometry import Mesh, farthest_point_sample, pairwise_sq_dist
from .model import MODEL_VARIANTS, PiTConfig, PiTModel, build
from .training import REL_L2_MEAN, evaluate, relative_loss
from .utils import utils

logger = logging.getLogger(__name__)

ORACLE_FACTOR = 16
ORACLE_CHUNK = 256


def smooth_field(points: np.ndarray) -> np.ndarray:
    """Default smooth test function v(x), one column"""
    points = np.atleast_2d(points)
    value = np.sin(2.0 * np.pi * points[:, 0])
    if points.shape[1] > 1:
        value = value + np.cos(np.pi * points[:, -1])
    return value[:, np.newaxis]


@dataclass
class QuadratureOracle:
    """
    Normalized quadrature of the integral operator
    F(x) = int k(x - y) v(y) W^V dmu(y) / int k(x - y) dmu(y)
    with k(z) = exp(-lambda |z|^2) and mu uniform on [0, 1]^d.

    Parameters
    ----------
    points: np.ndarray
        M x d midpoint-rule nodes of the unit cube.

    lambda_eff: float
        Kernel rate.

    w_v: np.ndarray
        d_in x d_out value matrix.
    """

    points: np.ndarray
    lambda_eff: float
    w_v: np.ndarray

    @classmethod
    def midpoint(
        cls, dim: int, per_axis: int, lambda_eff: float, w_v: Optional[np.ndarray] = None
    ) -> "QuadratureOracle":
        """Oracle on the midpoint grid with ``per_axis`` nodes per axis"""
        if per_axis < 1:
            raise ValueError(f"Oracle needs at least one node per axis, got {per_axis}")
        axis = (np.arange(per_axis) + 0.5) / per_axis
        points = Mesh.grid([axis] * dim).points
        w_v = np.eye(1) if w_v is None else np.atleast_2d(np.asarray(w_v, dtype=np.float64))
        return cls(points=points, lambda_eff=float(lambda_eff), w_v=w_v)

    @classmethod
    def for_mesh_size(
        cls, dim: int, n: int, lambda_eff: float, w_v: Optional[np.ndarray] = None
    ) -> "QuadratureOracle":
        """Smallest midpoint oracle with M >= 16 n nodes"""
        per_axis = int(np.ceil((ORACLE_FACTOR * n) ** (1.0 / dim) - 1e-9))
        while per_axis**dim < ORACLE_FACTOR * n:
            per_axis += 1
        return cls.midpoint(dim, per_axis, lambda_eff, w_v)

    @property
    def size(self) -> int:
        """Number of quadrature nodes M"""
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        """Spatial dimension"""
        return self.points.shape[1]


def oracle_integral(x: np.ndarray, v: FieldFunction, oracle: QuadratureOracle) -> np.ndarray:
    """
    Evaluates F at the points ``x``; numerator and
    denominator use the same quadrature rule.

    Parameters
    ----------
    x: np.ndarray
        k x d evaluation points (or a single point).

    v: FieldFunction
        Function mapping M x d points to M x d_in values.

    oracle: QuadratureOracle
        Quadrature nodes and kernel parameters.

    Returns
    -------
    np.ndarray
        k x d_out values of F.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != oracle.dim:
        raise ShapeError(f"Points of dimension {x.shape[1]} for a {oracle.dim}D oracle")

    values = np.asarray(v(oracle.points), dtype=np.float64)
    if values.ndim == 1:
        values = values[:, np.newaxis]
    projected = values @ oracle.w_v

    out = np.empty((x.shape[0], projected.shape[1]))
    for start in range(0, x.shape[0], ORACLE_CHUNK):
        chunk = x[start : start + ORACLE_CHUNK]
        diff = chunk[:, np.newaxis, :] - oracle.points[np.newaxis, :, :]
        dist = np.einsum("ijk,ijk->ij", diff, diff)
        scores = -oracle.lambda_eff * dist
        weights = np.exp(scores - scores.max(axis=1, keepdims=True))
        out[start : start + ORACLE_CHUNK] = (weights @ projected) / weights.sum(
            axis=1, keepdims=True
        )
    return out


@dataclass
class Theorem1Table:
    """Deviation statistics of PosAtt from the oracle per mesh size"""

    n_list: List[int]
    lambda_eff: float
    deviations: np.ndarray
    slope: float

    @property
    def mean(self) -> np.ndarray:
        """Mean deviation per mesh size"""
        return self.deviations.mean(axis=1)

    @property
    def spread(self) -> np.ndarray:
        """Standard deviation per mesh size"""
        return self.deviations.std(axis=1)

    @property
    def median(self) -> np.ndarray:
        """Median deviation per mesh size"""
        return np.median(self.deviations, axis=1)

    def rows(self) -> List[List]:
        """Table rows n, mean, spread, median"""
        return [
            [n, m, s, med] for n, m, s, med in zip(self.n_list, self.mean, self.spread, self.median)
        ]


def theorem1_experiment(
    lambda_eff: float,
    v: FieldFunction = smooth_field,
    n_list: Sequence[int] = (64, 256, 1024),
    repetitions: int = 20,
    seed: int = 0,
    dim: int = 2,
    w_v: Optional[np.ndarray] = None,
) -> Theorem1Table:
    """
    Monte-Carlo convergence of position-attention to the
    integral operator it induces.

    For each mesh size n, uniform random meshes are drawn and
    the mean row deviation (1/n) sum_i |PosAtt(U)_i - F(x_i)|
    is recorded. The slope of log(median deviation) against
    log(n) is fitted by least squares.

    Parameters
    ----------
    lambda_eff: float
        Kernel rate.

    v: FieldFunction
        Smooth test function. Default: ``smooth_field``

    n_list: Sequence[int]
        Mesh sizes. Default: (64, 256, 1024)

    repetitions: int
        Random meshes per size. Default: 20

    seed: int
        Seed of the mesh draws. Default: 0

    dim: int
        Dimension of the unit cube. Default: 2

    w_v: Optional[np.ndarray]
        Value matrix. Default: identity

    Returns
    -------
    Theorem1Table
        Deviations and fitted slope.
    """
    n_list = [int(n) for n in n_list]
    if len(n_list) < 2 or repetitions < 1:
        raise ValueError("Need at least two mesh sizes and one repetition")

    rng = np.random.default_rng(seed)
    head = None
    deviations = np.empty((len(n_list), repetitions))

    logger.info(f"{20*'='} Position-attention quadrature convergence, lambda={lambda_eff} {20*'='}")
    for i, n in enumerate(n_list):
        oracle = QuadratureOracle.for_mesh_size(dim, n, lambda_eff, w_v)
        if head is None:
            head = att.AttentionHead(
                lambda_=att.LambdaParam.from_effective(lambda_eff, mode=att.SQUARE),
                w_v=ad.Param(oracle.w_v),
            )
        for rep in range(repetitions):
            mesh = Mesh(points=rng.uniform(0.0, 1.0, (n, dim)))
            values = np.asarray(v(mesh.points), dtype=np.float64).reshape(n, -1)
            tape = ad.Tape()
            out = att.pos_att(tape.constant(values), pairwise_sq_dist(mesh, mesh), head).numpy()
            reference = oracle_integral(mesh.points, v, oracle)
            deviations[i, rep] = np.mean(np.sum(np.abs(out - reference), axis=1))
        logger.info(
            f"n={n}: median deviation {np.median(deviations[i])} with M={oracle.size} nodes"
        )

    slope = float(np.polyfit(np.log(n_list), np.log(np.median(deviations, axis=1)), 1)[0])
    logger.info(f"Fitted log-log slope {slope}")
    return Theorem1Table(
        n_list=n_list, lambda_eff=float(lambda_eff), deviations=deviations, slope=slope
    )


@dataclass
class ConvergenceReport:
    """Test error per evaluation resolution"""

    resolutions: List[int]
    errors: List[float]
    trained_at: int
    metric: str = REL_L2_MEAN

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.resolutions, self.resolutions[1:])):
            raise ValueError(f"Resolutions must be strictly increasing: {self.resolutions}")
        if len(self.errors) != len(self.resolutions):
            raise ValueError("One error per resolution is required")

    def rows(self) -> List[List]:
        """Table rows resolution, error, trained_at"""
        return [[r, e, self.trained_at] for r, e in zip(self.resolutions, self.errors)]


def sweep_datasets(
    task: TaskConfig,
    resolutions: Sequence[int],
    seed: int = 0,
    trained_at: Optional[int] = None,
) -> List[OperatorDataset]:
    """
    Test datasets of one set of functions at every resolution.

    Periodic tasks share a fine grid holding every resolution
    and restrict the same fine draws. Darcy test data is solved
    once at the finest resolution and restricted by striding,
    so every finer resolution must be a multiple of the coarser.

    Raises
    ------
    ConfigError
        If a resolution cannot be restricted from the common grid.
    """
    resolutions = [int(r) for r in resolutions]
    if task.task != DARCY:
        covered = list(resolutions)
        if trained_at is not None:
            covered.append(int(trained_at))
        config = task.covering(covered)
        return [
            make_dataset(replace(config, input_resolution=r, output_resolution=r), seed, TEST)
            for r in resolutions
        ]

    finest = max(resolutions)
    for resolution in resolutions:
        if finest % resolution:
            raise ConfigError(
                "resolutions", f"{resolution} does not divide the finest Darcy grid {finest}"
            )
    config = replace(task, input_resolution=finest, output_resolution=finest)
    reference = make_dataset(config, seed, TEST)
    return [
        reference if r == finest else downsample_dataset(reference, finest // r)
        for r in resolutions
    ]


def super_resolution_sweep(
    model: PiTModel,
    task: TaskConfig,
    resolutions: Sequence[int],
    seed: int = 0,
    trained_at: Optional[int] = None,
    metric: str = REL_L2_MEAN,
    output_dir: Optional[PathLike] = None,
) -> ConvergenceReport:
    """
    Zero-shot evaluation at every resolution. Inputs and queries
    both use the new mesh; the test functions are the same at
    every resolution (see ``sweep_datasets``).

    Parameters
    ----------
    model: PiTModel
        Trained model.

    task: TaskConfig
        Task the model was trained on.

    resolutions: Sequence[int]
        Points per axis, strictly increasing.

    seed: int
        Run seed of the test draws. Default: 0

    trained_at: Optional[int]
        Training resolution. Default: ``task.input_resolution``

    metric: str
        Evaluation metric. Default: rel_l2_mean

    output_dir: Optional[PathLike]
        If given, ``convergence.csv`` and a plot are written.

    Returns
    -------
    ConvergenceReport
        Error per resolution.
    """
    trained_at = task.input_resolution if trained_at is None else trained_at
    resolutions = [int(r) for r in resolutions]
    errors = []

    logger.info(f"{20*'='} Super-resolution sweep {20*'='}")
    test_sets = sweep_datasets(task, resolutions, seed=seed, trained_at=trained_at)
    for resolution, dataset in zip(resolutions, test_sets):
        error = evaluate(model, dataset, metric=metric)
        model.clear_cache()
        errors.append(error)
        logger.info(f"Resolution {resolution}: {metric} = {error}")

    report = ConvergenceReport(
        resolutions=resolutions, errors=errors, trained_at=trained_at, metric=metric
    )
    if output_dir is not None:
        utils.write_csv(
            f"{output_dir}/convergence.csv", ["resolution", metric, "trained_at"], report.rows()
        )
        utils.generate_convergence_graph(resolutions, errors, trained_at, output_dir, "pit")
    return report


@dataclass
class ScalingTable:
    """Median forward time per input mesh size and affine fit"""

    n_list: List[int]
    seconds: np.ndarray
    slope: float
    intercept: float
    r_squared: float

    @property
    def median_seconds(self) -> np.ndarray:
        """Median over the timed runs"""
        return np.median(self.seconds, axis=1)

    def rows(self) -> List[List]:
        """Table rows n, median seconds"""
        return [[n, t] for n, t in zip(self.n_list, self.median_seconds)]


def affine_fit(x: Sequence[float], y: Sequence[float]) -> Tuple[float, float, float]:
    """Least-squares line y = a x + b and its R^2"""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    residual = y - (slope * x + intercept)
    total = np.sum((y - y.mean()) ** 2)
    r_squared = 1.0 - np.sum(residual**2) / total if total > 0 else 1.0
    return float(slope), float(intercept), float(r_squared)


def _benchmark_mesh(dim: int, n: int, rng: np.random.Generator) -> Mesh:
    if dim == 1:
        return Mesh.periodic_grid((n,))
    return Mesh(points=rng.uniform(0.0, 1.0, (n, dim)))


def scaling_benchmark(
    config: PiTConfig,
    n_list: Sequence[int] = (1024, 2048, 4096),
    repeats: int = 5,
    seed: int = 0,
    backward: bool = False,
    output_dir: Optional[PathLike] = None,
) -> ScalingTable:
    """
    Forward (optionally forward + backward) wall time against
    the input mesh size with N_v and d_v fixed.

    Each size runs one discarded warm-up and ``repeats`` timed
    passes with a monotonic clock; distance caches are cleared
    before every pass so geometry cost is included.
    """
    rng = np.random.default_rng(seed)
    latent_shape = config.latent_resolution
    if config.space_dim == 1:
        latent = Mesh.periodic_grid((int(np.prod(latent_shape)),))
    else:
        latent = Mesh(points=rng.uniform(0.0, 1.0, (int(np.prod(latent_shape)), config.space_dim)))
    model = build(config, latent, seed=seed)

    n_list = [int(n) for n in n_list]
    seconds = np.empty((len(n_list), repeats))

    logger.info(f"{20*'='} Scaling benchmark {20*'='}")
    for i, n in enumerate(n_list):
        mesh = _benchmark_mesh(config.space_dim, n, rng)
        values = rng.standard_normal((n, config.input_channels))
        truth = rng.standard_normal((n, config.output_channels))

        def run():
            model.clear_cache()
            tape = ad.Tape()
            out = model.forward(values, mesh, mesh, tape=tape)
            if backward:
                model.zero_grad()
                tape.backward(relative_loss(out, truth, REL_L2_MEAN))

        run()
        for rep in range(repeats):
            start = time.perf_counter()
            run()
            seconds[i, rep] = time.perf_counter() - start
        logger.info(f"N_a={n}: median {np.median(seconds[i]):.6f}s")

    slope, intercept, r_squared = affine_fit(n_list, np.median(seconds, axis=1))
    logger.info(f"Affine fit R^2 = {r_squared}")
    table = ScalingTable(
        n_list=n_list, seconds=seconds, slope=slope, intercept=intercept, r_squared=r_squared
    )
    if output_dir is not None:
        utils.write_csv(f"{output_dir}/scaling.csv", ["n_a", "seconds"], table.rows())
    return table


@dataclass
class LambdaReport:
    """Interpretable radii 1/sqrt(lambda) per layer and head"""

    layers: List[str]
    radii: List[List[float]]

    def rows(self) -> List[List]:
        """Table rows layer, head, radius"""
        return [
            [layer, head + 1, radius]
            for layer, per_head in zip(self.layers, self.radii)
            for head, radius in enumerate(per_head)
        ]

    def to_table(self) -> str:
        """Text table, one row per layer and one column per head"""
        n_heads = max(len(r) for r in self.radii)
        header = "Layer".ljust(16) + "".join(f"Head {h + 1}".rjust(12) for h in range(n_heads))
        lines = [header]
        for layer, per_head in zip(self.layers, self.radii):
            cells = "".join(
                ("-" if np.isnan(r) else f"{r:.4g}").rjust(12) for r in per_head
            )
            lines.append(layer.ljust(16) + cells)
        return "\n".join(lines)


def lambda_report(model: PiTModel) -> LambdaReport:
    """Radius of every attention head of ``model``"""
    layers, radii = [], []
    for name, layer in model.attention_layers():
        layers.append(name)
        radii.append([att.interpretable_radius(head) for head in layer.heads])
    return LambdaReport(layers=layers, radii=radii)


@dataclass
class ParamCheck:
    """Finite-difference comparison of one Param"""

    name: str
    checked: int
    max_error: float


@dataclass
class GradCheckReport:
    """Result of ``gradient_check``"""

    checks: List[ParamCheck] = field(default_factory=list)
    tolerance: float = 1e-5

    @property
    def max_error(self) -> float:
        """Largest relative error over all parameters"""
        return max((c.max_error for c in self.checks), default=0.0)

    @property
    def passed(self) -> bool:
        """True when every entry is within tolerance"""
        return self.max_error < self.tolerance

    def failures(self) -> List[ParamCheck]:
        """Parameters above tolerance"""
        return [c for c in self.checks if c.max_error >= self.tolerance]


def gradient_check(
    model: PiTModel,
    values: np.ndarray,
    input_mesh: Mesh,
    query_mesh: Mesh,
    truth: np.ndarray,
    step: float = 1e-6,
    tolerance: float = 1e-5,
    max_entries_per_param: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compares tape gradients of the relative l2 loss with
    central differences, |g - fd| / max(1, |fd|).

    Parameters
    ----------
    model: PiTModel
        Model under test; values are restored after each perturbation.

    values, truth: np.ndarray
        Input and reference values.

    input_mesh, query_mesh: Mesh
        Meshes of the forward pass.

    step: float
        Central-difference step. Default: 1e-6

    tolerance: float
        Acceptance threshold. Default: 1e-5

    max_entries_per_param: Optional[int]
        If given, only a seeded random subset of that many
        entries is perturbed per Param. Default: None (all)

    seed: int
        Seed of the subset. Default: 0

    Returns
    -------
    GradCheckReport
        Largest error per Param.
    """
    rng = np.random.default_rng(seed)

    def loss_value() -> float:
        tape = ad.Tape()
        out = model.forward(values, input_mesh, query_mesh, tape=tape)
        return relative_loss(out, truth, REL_L2_MEAN).item()

    model.zero_grad()
    tape = ad.Tape()
    out = model.forward(values, input_mesh, query_mesh, tape=tape)
    tape.backward(relative_loss(out, truth, REL_L2_MEAN))

    report = GradCheckReport(tolerance=tolerance)
    for p in model.parameters():
        if not p.trainable:
            continue
        analytic = p.grad.copy()
        entries = np.arange(p.size)
        if max_entries_per_param is not None and p.size > max_entries_per_param:
            entries = np.sort(rng.choice(p.size, size=max_entries_per_param, replace=False))

        flat = p.value.reshape(-1)
        max_error = 0.0
        for index in entries:
            original = flat[index]
            flat[index] = original + step
            plus = loss_value()
            flat[index] = original - step
            minus = loss_value()
            flat[index] = original
            estimate = (plus - minus) / (2.0 * step)
            error = abs(analytic.reshape(-1)[index] - estimate) / max(1.0, abs(estimate))
            max_error = max(max_error, error)
        report.checks.append(ParamCheck(name=p.name, checked=len(entries), max_error=max_error))
        if max_error >= tolerance:
            logger.warning(f"Gradient check failed for {p.name}: error {max_error}")
    return report


def tiny_problem(
    config: PiTConfig,
    n_points: int = 12,
    n_latent: int = 6,
    n_query: int = 10,
    seed: int = 0,
) -> Tuple[PiTModel, np.ndarray, Mesh, Mesh, np.ndarray]:
    """
    Small random problem for gradient checks: uniform point
    clouds, a farthest-point latent mesh and random values.

    Returns
    -------
    Tuple
        Model, input values, input mesh, query mesh, references.
    """
    rng = derive_rng(seed, TRAIN_DRAWS)
    dim = config.space_dim
    input_mesh = Mesh(points=rng.uniform(0.0, 1.0, (n_points, dim)))
    query_mesh = Mesh(points=rng.uniform(0.0, 1.0, (n_query, dim)))
    latent = farthest_point_sample(input_mesh, min(n_latent, n_points))
    config = replace(config, latent_resolution=(latent.size,))
    model = build(config, latent, seed=seed)
    values = rng.standard_normal((n_points, config.input_channels))
    truth = rng.standard_normal((n_query, config.output_channels))
    return model, values, input_mesh, query_mesh, truth


def gradient_check_suite(
    config: PiTConfig,
    variants: Sequence[str] = MODEL_VARIANTS,
    lambda_modes: Sequence[str] = att.LAMBDA_MODES,
    seed: int = 0,
    max_entries_per_param: Optional[int] = None,
    on_result: Optional[Callable[[str, str, GradCheckReport], None]] = None,
) -> List[Tuple[str, str, GradCheckReport]]:
    """
    Runs ``gradient_check`` on a tiny problem for every
    attention variant and lambda mode.
    """
    results = []
    for variant in variants:
        for mode in lambda_modes:
            tiny = replace(config, attention_variant=variant, lambda_mode=mode)
            model, values, input_mesh, query_mesh, truth = tiny_problem(tiny, seed=seed)
            report = gradient_check(
                model,
                values,
                input_mesh,
                query_mesh,
                truth,
                max_entries_per_param=max_entries_per_param,
                seed=seed,
            )
            logger.info(
                f"Gradient check {variant}/{mode}: max error {report.max_error:.3e} "
                f"({'ok' if report.passed else 'FAILED'})"
            )
            results.append((variant, mode, report))
            if on_result is not None:
                on_result(variant, mode, report)
    return results
