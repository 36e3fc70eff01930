"""
Synthetic operator-learning tasks.

Inputs are Gaussian random fields synthesized spectrally on a
periodic grid. Outputs come from a Gaussian smoothing operator,
an exact periodic shift (linear advection) or a 5-point finite
difference Darcy solve.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import fft, sparse
from scipy.sparse import linalg as sparse_linalg

from ._shared.errors import ConfigError, ShapeError
from ._shared.seeds import TEST_DRAWS, TRAIN_DRAWS, derive_rng
from .geometry import Mesh, grid_flat_indices, grid_pool_indices

logger = logging.getLogger(__name__)

SMOOTHING = "smoothing"
ADVECTION = "advection"
DARCY = "darcy"
TASKS = (SMOOTHING, ADVECTION, DARCY)

TRAIN = "train"
TEST = "test"

DARCY_RESIDUAL_TOL = 1e-8
MAX_FINE_RESOLUTION = 1 << 17


@dataclass
class OperatorSample:
    """One pair (a(X_a), u(X_u))"""

    inputs: np.ndarray
    outputs: np.ndarray


@dataclass
class OperatorDataset:
    """
    Samples of an operator on fixed input and output meshes.

    Parameters
    ----------
    input_mesh: Mesh
        Mesh X_a of the input functions.

    output_mesh: Mesh
        Mesh X_u of the output functions.

    inputs: np.ndarray
        S x N_a x d_a input values.

    outputs: np.ndarray
        S x N_u x d_u output values.

    split: str
        "train" or "test".

    metadata: Dict[str, str]
        Generator name and parameters.
    """

    input_mesh: Mesh
    output_mesh: Mesh
    inputs: np.ndarray
    outputs: np.ndarray
    split: str = TRAIN
    metadata: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.outputs = np.asarray(self.outputs, dtype=np.float64)
        if self.inputs.ndim != 3 or self.outputs.ndim != 3:
            raise ShapeError("Dataset values must be S x N x d arrays")
        if self.inputs.shape[0] != self.outputs.shape[0]:
            raise ShapeError(
                f"{self.inputs.shape[0]} input samples for {self.outputs.shape[0]} outputs"
            )
        if self.inputs.shape[1] != self.input_mesh.size:
            raise ShapeError(
                f"Inputs have {self.inputs.shape[1]} points, mesh has {self.input_mesh.size}"
            )
        if self.outputs.shape[1] != self.output_mesh.size:
            raise ShapeError(
                f"Outputs have {self.outputs.shape[1]} points, mesh has {self.output_mesh.size}"
            )
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.outputs))):
            raise ValueError("Dataset values must be finite")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def __getitem__(self, index: int) -> OperatorSample:
        return OperatorSample(inputs=self.inputs[index], outputs=self.outputs[index])


@dataclass
class TaskSplit:
    """Train and test datasets drawn from disjoint seed streams"""

    train: OperatorDataset
    test: OperatorDataset


@dataclass
class TaskConfig:
    """
    Parameters of the synthetic task generators.

    Resolutions count points per axis. The smoothing and
    advection tasks live on the periodic unit interval and are
    computed on a fine grid of ``fine_resolution`` points that
    every requested resolution must divide. The Darcy task
    uses an n x n interior grid of the unit square.
    """

    task: str = SMOOTHING
    n_train: int = 256
    n_test: int = 64
    input_resolution: int = 64
    output_resolution: int = 64
    fine_resolution: int = 512
    kernel_width: float = 0.05
    length_scale: float = 0.1
    variance: float = 1.0
    advection_speed: float = 1.0
    advection_time: float = 0.25
    darcy_high: float = 12.0
    darcy_low: float = 3.0
    darcy_forcing: float = 1.0

    def validate(self):
        """
        Raises
        ------
        ConfigError
            With the name of the first invalid field.
        """
        if self.task not in TASKS:
            raise ConfigError("task", f"expected one of {TASKS}")
        for key in ("n_train", "n_test", "input_resolution", "output_resolution"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be at least 1")
        if self.task == DARCY:
            if self.input_resolution > 64:
                raise ConfigError("input_resolution", "Darcy grids are limited to 64 x 64")
            if self.input_resolution % self.output_resolution:
                raise ConfigError(
                    "output_resolution", "must divide input_resolution for the Darcy task"
                )
        else:
            for key in ("input_resolution", "output_resolution"):
                if self.fine_resolution % getattr(self, key):
                    raise ConfigError(key, f"must divide fine_resolution {self.fine_resolution}")
        for key in ("kernel_width", "length_scale"):
            if not getattr(self, key) > 0:
                raise ConfigError(key, "must be positive")
        if self.variance < 0:
            raise ConfigError("variance", "must be non-negative")
        if not (self.darcy_high > 0 and self.darcy_low > 0):
            raise ConfigError("darcy_low", "Darcy coefficients must be positive")

    def covering(self, resolutions: Sequence[int]) -> "TaskConfig":
        """
        Copy whose fine grid holds every one of ``resolutions``.

        For the periodic tasks ``fine_resolution`` becomes the
        least common multiple of its value and the resolutions,
        so every resolution restricts the same fine draws. The
        Darcy task has no fine grid and is returned unchanged.

        Raises
        ------
        ConfigError
            If the common fine grid exceeds MAX_FINE_RESOLUTION.
        """
        if self.task == DARCY:
            return replace(self)
        fine = math.lcm(int(self.fine_resolution), *(int(r) for r in resolutions))
        if fine > MAX_FINE_RESOLUTION:
            raise ConfigError(
                "fine_resolution",
                f"resolutions {list(resolutions)} need a fine grid of {fine} points, "
                f"above {MAX_FINE_RESOLUTION}",
            )
        return replace(self, fine_resolution=fine)

    def metadata(self, seed: int) -> Dict[str, str]:
        """Generator description stored with the datasets"""
        meta = {key: str(value) for key, value in vars(self).items()}
        meta["seed"] = str(seed)
        return meta


def _grid_spacing(grid: Mesh) -> Tuple[float, ...]:
    spacing = []
    for axis, n in enumerate(grid.grid_shape):
        coords = grid.axis_coordinates(axis)
        spacing.append(float(coords[1] - coords[0]) if n > 1 else 1.0)
    return tuple(spacing)


def grf(
    grid: Mesh,
    length_scale: float = 0.1,
    variance: float = 1.0,
    seed: Union[int, np.random.Generator, None] = None,
    count: int = 1,
) -> np.ndarray:
    """
    Gaussian random fields with squared-exponential covariance
    variance * exp(-r^2 / (2 length_scale^2)), synthesized with
    the circulant (periodic) embedding of the grid.

    Independent complex normals are scaled by the square root
    of the eigenvalues of the circulant covariance (its discrete
    Fourier transform) and transformed back to the grid.

    Parameters
    ----------
    grid: Mesh
        Uniform structured grid; its period is n times
        the spacing along every axis.

    length_scale: float
        Correlation length. Default: 0.1

    variance: float
        Pointwise variance. Default: 1.0

    seed: Union[int, np.random.Generator, None]
        Seed or generator. Default: None

    count: int
        Number of fields. Default: 1

    Returns
    -------
    np.ndarray
        count x N values in the row-major order of the grid.
    """
    if not grid.is_grid:
        raise ValueError("Gaussian random fields need a structured grid")
    if variance < 0 or length_scale <= 0:
        raise ValueError(f"Invalid GRF parameters: variance {variance}, length {length_scale}")

    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shape = grid.grid_shape

    lags_sq = np.zeros(shape)
    for axis, (n, h) in enumerate(zip(shape, _grid_spacing(grid))):
        k = np.arange(n)
        lag = h * np.minimum(k, n - k)
        expand = [np.newaxis] * len(shape)
        expand[axis] = slice(None)
        lags_sq = lags_sq + (lag**2)[tuple(expand)]

    covariance = variance * np.exp(-lags_sq / (2.0 * length_scale**2))
    eigenvalues = np.clip(fft.fftn(covariance).real, 0.0, None)
    amplitude = np.sqrt(eigenvalues * grid.size)

    noise = rng.standard_normal((count,) + shape) + 1j * rng.standard_normal((count,) + shape)
    axes = tuple(range(1, len(shape) + 1))
    fields = fft.ifftn(amplitude * noise, axes=axes).real
    return fields.reshape(count, -1)


def grf_1d(grid: Mesh, length_scale: float = 0.1, variance: float = 1.0, seed=None, count=1):
    """GRF samples on a one-dimensional grid"""
    if grid.dim != 1:
        raise ShapeError(f"grf_1d needs a 1D grid, got dimension {grid.dim}")
    return grf(grid, length_scale=length_scale, variance=variance, seed=seed, count=count)


def grf_2d(grid: Mesh, length_scale: float = 0.1, variance: float = 1.0, seed=None, count=1):
    """GRF samples on a two-dimensional grid"""
    if grid.dim != 2:
        raise ShapeError(f"grf_2d needs a 2D grid, got dimension {grid.dim}")
    return grf(grid, length_scale=length_scale, variance=variance, seed=seed, count=count)


def gaussian_smoothing(values: np.ndarray, grid: Mesh, width: float) -> np.ndarray:
    """
    Periodic Gaussian blur u(x) = int G_w(x - y) a(y) dy by
    normalized quadrature on a uniform 1D periodic grid.

    Kernel weights use minimum-image distances and are
    normalized to unit sum, so constants are reproduced exactly.
    The weight matrix is circulant and is applied as a
    circular convolution in Fourier space.

    Parameters
    ----------
    values: np.ndarray
        S x N (or N) samples of a on the grid.

    grid: Mesh
        Periodic 1D grid.

    width: float
        Standard deviation of the kernel.

    Returns
    -------
    np.ndarray
        Smoothed values with the shape of ``values``.
    """
    if not grid.is_grid or grid.dim != 1:
        raise ValueError("gaussian_smoothing needs a periodic 1D grid")
    if width <= 0:
        raise ValueError(f"Kernel width must be positive, got {width}")

    n = grid.size
    h = _grid_spacing(grid)[0]
    k = np.arange(n)
    lag = h * np.minimum(k, n - k)
    kernel = np.exp(-0.5 * (lag / width) ** 2)
    kernel /= kernel.sum()
    values = np.asarray(values, dtype=np.float64)
    return fft.irfft(fft.rfft(values, axis=-1) * fft.rfft(kernel), n=n, axis=-1)


def advect_periodic(values: np.ndarray, grid: Mesh, shift: float) -> np.ndarray:
    """
    Exact periodic translation u(x) = a(x - shift) of samples
    of a band-limited function, by a Fourier phase shift.
    """
    if not grid.is_grid or grid.dim != 1:
        raise ValueError("advect_periodic needs a periodic 1D grid")
    n = grid.size
    period = n * _grid_spacing(grid)[0]
    values = np.asarray(values, dtype=np.float64)
    k = fft.rfftfreq(n, d=1.0 / n)
    phase = np.exp(-2j * np.pi * k * shift / period)
    return fft.irfft(fft.rfft(values, axis=-1) * phase, n=n, axis=-1)


def solve_darcy(coefficient: np.ndarray, forcing: float = 1.0) -> np.ndarray:
    """
    Solves -div(a grad u) = f on the unit square with
    homogeneous Dirichlet conditions, 5-point scheme.

    Face coefficients average the two adjacent nodes; faces on
    the boundary use the value of the interior node.

    Parameters
    ----------
    coefficient: np.ndarray
        n x n values of a on the interior nodes (i+1)/(n+1).

    forcing: float
        Constant right-hand side f. Default: 1.0

    Returns
    -------
    np.ndarray
        n x n solution.

    Raises
    ------
    ArithmeticError
        If the linear residual exceeds 1e-8.
    """
    a = np.asarray(coefficient, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"Darcy coefficient must be a square grid, got {a.shape}")
    if np.any(a <= 0):
        raise ValueError("Darcy coefficient must be positive")

    n = a.shape[0]
    inv_h2 = float((n + 1) ** 2)
    padded = np.pad(a, 1, mode="edge")
    center = padded[1:-1, 1:-1]
    east = 0.5 * (center + padded[2:, 1:-1])
    west = 0.5 * (center + padded[:-2, 1:-1])
    north = 0.5 * (center + padded[1:-1, 2:])
    south = 0.5 * (center + padded[1:-1, :-2])

    index = np.arange(n * n).reshape(n, n)
    rows = [index.ravel()]
    cols = [index.ravel()]
    vals = [((east + west + north + south) * inv_h2).ravel()]
    for coeff, (di, dj) in ((east, (1, 0)), (west, (-1, 0)), (north, (0, 1)), (south, (0, -1))):
        i0, i1 = max(0, -di), n - max(0, di)
        j0, j1 = max(0, -dj), n - max(0, dj)
        rows.append(index[i0:i1, j0:j1].ravel())
        cols.append(index[i0 + di : i1 + di, j0 + dj : j1 + dj].ravel())
        vals.append((-coeff[i0:i1, j0:j1] * inv_h2).ravel())

    matrix = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n * n, n * n)
    )
    rhs = np.full(n * n, float(forcing))
    solution = sparse_linalg.spsolve(matrix, rhs)

    residual = np.max(np.abs(matrix @ solution - rhs))
    if residual >= DARCY_RESIDUAL_TOL:
        raise ArithmeticError(f"Darcy solve residual {residual} above {DARCY_RESIDUAL_TOL}")
    return solution.reshape(n, n)


def _restrict(values: np.ndarray, fine: int, resolution: int) -> np.ndarray:
    return values[:, :: fine // resolution]


def _periodic_task(config: TaskConfig, seed: int, split: str) -> OperatorDataset:
    n = config.n_train if split == TRAIN else config.n_test
    rng = derive_rng(seed, TRAIN_DRAWS if split == TRAIN else TEST_DRAWS)
    fine_grid = Mesh.periodic_grid((config.fine_resolution,))
    a = grf_1d(fine_grid, config.length_scale, config.variance, seed=rng, count=n)

    if config.task == SMOOTHING:
        u = gaussian_smoothing(a, fine_grid, config.kernel_width)
    else:
        u = advect_periodic(a, fine_grid, config.advection_speed * config.advection_time)

    fine = config.fine_resolution
    inputs = _restrict(a, fine, config.input_resolution)[..., np.newaxis]
    outputs = _restrict(u, fine, config.output_resolution)[..., np.newaxis]
    return OperatorDataset(
        input_mesh=Mesh.periodic_grid((config.input_resolution,)),
        output_mesh=Mesh.periodic_grid((config.output_resolution,)),
        inputs=inputs,
        outputs=outputs,
        split=split,
        metadata=config.metadata(seed),
    )


def _darcy_task(config: TaskConfig, seed: int, split: str) -> OperatorDataset:
    n = config.n_train if split == TRAIN else config.n_test
    rng = derive_rng(seed, TRAIN_DRAWS if split == TRAIN else TEST_DRAWS)
    res = config.input_resolution
    grid = Mesh.interior_grid((res, res))
    fields = grf_2d(grid, config.length_scale, config.variance, seed=rng, count=n)
    coefficients = np.where(fields >= 0.0, config.darcy_high, config.darcy_low)

    solutions = np.stack(
        [
            solve_darcy(c.reshape(res, res), config.darcy_forcing).reshape(-1)
            for c in coefficients
        ]
    )

    factor = res // config.output_resolution
    index_per_axis = grid_pool_indices(grid.grid_shape, factors=(factor, factor))
    flat = grid_flat_indices(grid.grid_shape, index_per_axis)
    output_mesh = Mesh.grid([grid.axis_coordinates(a)[idx] for a, idx in enumerate(index_per_axis)])
    return OperatorDataset(
        input_mesh=grid,
        output_mesh=output_mesh,
        inputs=coefficients[..., np.newaxis],
        outputs=solutions[:, flat, np.newaxis],
        split=split,
        metadata=config.metadata(seed),
    )


def make_smoothing_task(
    n_train: int = 256,
    n_test: int = 64,
    input_resolution: int = 64,
    output_resolution: int = 64,
    kernel_width: float = 0.05,
    seed: int = 0,
    **kwargs,
) -> TaskSplit:
    """
    Gaussian smoothing operator u = G_w * a on the periodic
    unit interval, with GRF inputs.

    Outputs are computed by quadrature on the fine grid and
    restricted to the output resolution.
    """
    config = TaskConfig(
        task=SMOOTHING,
        n_train=n_train,
        n_test=n_test,
        input_resolution=input_resolution,
        output_resolution=output_resolution,
        kernel_width=kernel_width,
        **kwargs,
    )
    return make_task(config, seed)


def make_advection_task(
    advection_speed: float = 1.0,
    advection_time: float = 0.25,
    n_train: int = 256,
    n_test: int = 64,
    input_resolution: int = 64,
    output_resolution: int = 64,
    seed: int = 0,
    **kwargs,
) -> TaskSplit:
    """
    Linear advection v_t + s v_x = 0 on the periodic unit
    interval: u(x) = a(x - s T), exact at every resolution.
    """
    config = TaskConfig(
        task=ADVECTION,
        n_train=n_train,
        n_test=n_test,
        input_resolution=input_resolution,
        output_resolution=output_resolution,
        advection_speed=advection_speed,
        advection_time=advection_time,
        **kwargs,
    )
    return make_task(config, seed)


def make_darcy_like_task(
    n_train: int = 64,
    n_test: int = 16,
    input_resolution: int = 32,
    output_resolution: int = 32,
    seed: int = 0,
    **kwargs,
) -> TaskSplit:
    """
    Darcy flow -div(a grad u) = f with a piecewise constant
    coefficient, 12 where a GRF is non-negative and 3 elsewhere.
    """
    config = TaskConfig(
        task=DARCY,
        n_train=n_train,
        n_test=n_test,
        input_resolution=input_resolution,
        output_resolution=output_resolution,
        **kwargs,
    )
    return make_task(config, seed)


def make_task(config: TaskConfig, seed: int = 0) -> TaskSplit:
    """
    Generates the train and test datasets of ``config.task``.

    Parameters
    ----------
    config: TaskConfig
        Generator parameters.

    seed: int
        Run seed. Train and test draws use separate streams.
        Default: 0

    Returns
    -------
    TaskSplit
        Train and test datasets.
    """
    config.validate()
    logger.info(
        f"Generating {config.task} task: {config.n_train} train / {config.n_test} test samples "
        f"at resolution {config.input_resolution} -> {config.output_resolution}"
    )
    return TaskSplit(train=make_dataset(config, seed, TRAIN), test=make_dataset(config, seed, TEST))


def make_dataset(config: TaskConfig, seed: int = 0, split: str = TEST) -> OperatorDataset:
    """Generates a single split of ``config.task``"""
    config.validate()
    if split not in (TRAIN, TEST):
        raise ValueError(f"Unknown split {split}")
    builder = _darcy_task if config.task == DARCY else _periodic_task
    return builder(config, seed, split)


def downsample_dataset(
    ds: OperatorDataset,
    factor: Union[int, Sequence[int]],
    output_factor: Optional[Union[int, Sequence[int]]] = None,
) -> OperatorDataset:
    """
    Strided restriction of grid data to a coarser mesh.

    Parameters
    ----------
    ds: OperatorDataset
        Dataset on structured grids.

    factor: Union[int, Sequence[int]]
        Stride of the input mesh, per axis or for all axes.

    output_factor: Optional[Union[int, Sequence[int]]]
        Stride of the output mesh. Default: ``factor``

    Returns
    -------
    OperatorDataset
        Dataset on the coarser meshes.
    """
    if not (ds.input_mesh.is_grid and ds.output_mesh.is_grid):
        raise ValueError("downsample_dataset needs structured grids")
    output_factor = factor if output_factor is None else output_factor

    def restrict(mesh: Mesh, values: np.ndarray, f) -> Tuple[Mesh, np.ndarray]:
        factors = tuple(np.broadcast_to(np.asarray(f, dtype=np.int64), (mesh.dim,)))
        index_per_axis = grid_pool_indices(mesh.grid_shape, factors=factors)
        flat = grid_flat_indices(mesh.grid_shape, index_per_axis)
        axes = [mesh.axis_coordinates(a)[idx] for a, idx in enumerate(index_per_axis)]
        return Mesh.grid(axes), values[:, flat]

    input_mesh, inputs = restrict(ds.input_mesh, ds.inputs, factor)
    output_mesh, outputs = restrict(ds.output_mesh, ds.outputs, output_factor)
    metadata = dict(ds.metadata)
    metadata["downsample"] = f"{factor}/{output_factor}"
    return OperatorDataset(
        input_mesh=input_mesh,
        output_mesh=output_mesh,
        inputs=inputs,
        outputs=outputs,
        split=ds.split,
        metadata=metadata,
    )
