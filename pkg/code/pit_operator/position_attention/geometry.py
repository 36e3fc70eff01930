"""
Meshes, pairwise squared-distance matrices, quantile receptive
fields and latent-mesh construction (grid pooling and farthest
point sampling).
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numba import njit

from ._shared.errors import ShapeError
from ._shared.types import ShapeLike

logger = logging.getLogger(__name__)

GRID = "structured-grid"
POINT_CLOUD = "point-cloud"


@dataclass(frozen=True, eq=False)
class Mesh:
    """
    Set of sampling points in R^d.

    Parameters
    ----------
    points: np.ndarray
        N x d coordinates. Grids enumerate their
        points in row-major axis order.

    kind: str
        Either "structured-grid" or "point-cloud".

    grid_shape: Optional[Tuple[int, ...]]
        Number of points per axis for structured grids.
    """

    points: np.ndarray
    kind: str = POINT_CLOUD
    grid_shape: Optional[Tuple[int, ...]] = None
    key: str = field(init=False, repr=False)

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64)
        if points.ndim == 1:
            points = points[:, np.newaxis]
        if points.ndim != 2 or points.shape[0] < 1:
            raise ShapeError(f"Mesh needs an N x d array with N >= 1, got {points.shape}")
        if not np.all(np.isfinite(points)):
            raise ValueError("Mesh coordinates must be finite")

        if self.kind not in (GRID, POINT_CLOUD):
            raise ValueError(f"Unknown mesh kind {self.kind}")

        grid_shape = None
        if self.kind == GRID:
            if self.grid_shape is None:
                raise ValueError("Structured grids need grid_shape")
            grid_shape = tuple(int(s) for s in self.grid_shape)
            if int(np.prod(grid_shape)) != points.shape[0] or len(grid_shape) != points.shape[1]:
                raise ShapeError(
                    f"Grid shape {grid_shape} does not match {points.shape[0]} points "
                    f"in {points.shape[1]} dimensions"
                )

        points.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "grid_shape", grid_shape)
        digest = hashlib.sha1(points.tobytes())
        digest.update(str(points.shape).encode())
        object.__setattr__(self, "key", digest.hexdigest())

    @property
    def dim(self) -> int:
        """Spatial dimension d"""
        return self.points.shape[1]

    @property
    def size(self) -> int:
        """Number of points N"""
        return self.points.shape[0]

    @property
    def is_grid(self) -> bool:
        """True for structured grids"""
        return self.kind == GRID

    def __len__(self) -> int:
        return self.size

    @classmethod
    def grid(
        cls,
        axes: Sequence[np.ndarray],
    ) -> "Mesh":
        """
        Tensor-product grid from per-axis coordinates.

        Parameters
        ----------
        axes: Sequence[np.ndarray]
            Coordinates along each axis.

        Returns
        -------
        Mesh
            Structured grid in row-major order.
        """
        axes = [np.asarray(a, dtype=np.float64).reshape(-1) for a in axes]
        mesh = np.meshgrid(*axes, indexing="ij")
        points = np.stack([m.reshape(-1) for m in mesh], axis=-1)
        return cls(points=points, kind=GRID, grid_shape=tuple(len(a) for a in axes))

    @classmethod
    def periodic_grid(cls, shape: ShapeLike, length: float = 1.0) -> "Mesh":
        """
        Uniform grid x_i = i * length / n on [0, length)^d,
        the sampling used for periodic tasks.
        """
        return cls.grid([np.arange(n) * (length / n) for n in shape])

    @classmethod
    def interior_grid(cls, shape: ShapeLike) -> "Mesh":
        """
        Interior nodes of a uniform grid on [0, 1]^d,
        x_i = (i + 1) / (n + 1), the unknowns of a Dirichlet problem.
        """
        return cls.grid([(np.arange(n) + 1.0) / (n + 1.0) for n in shape])

    def axis_coordinates(self, axis: int) -> np.ndarray:
        """Coordinates along one axis of a structured grid"""
        if not self.is_grid:
            raise ValueError("axis_coordinates needs a structured grid")
        stride = int(np.prod(self.grid_shape[axis + 1 :]))
        return self.points[:: stride, axis][: self.grid_shape[axis]]

    def subset(self, index: np.ndarray) -> "Mesh":
        """Point cloud made of the selected points"""
        return Mesh(points=self.points[np.asarray(index)], kind=POINT_CLOUD)


@dataclass(frozen=True, eq=False)
class PairwiseDistances:
    """
    Squared Euclidean distances. Rows index the query (target)
    mesh, columns the source mesh.
    """

    matrix: np.ndarray
    source_key: str
    target_key: str

    @property
    def shape(self) -> Tuple[int, int]:
        """Shape (target points, source points)"""
        return self.matrix.shape

    @property
    def is_square_self(self) -> bool:
        """True when source and target are the same mesh"""
        return self.source_key == self.target_key


@dataclass(frozen=True, eq=False)
class ReceptiveField:
    """
    Per-row squared radii and the neighbor mask D_ik <= r_i^2.
    """

    radii_sq: np.ndarray
    quantile: float
    mask: np.ndarray

    @property
    def neighbor_lists(self) -> List[np.ndarray]:
        """Indices of the neighbors of every row"""
        return [np.flatnonzero(row) for row in self.mask]

    @property
    def counts(self) -> np.ndarray:
        """Number of neighbors per row"""
        return self.mask.sum(axis=1)


def pairwise_sq_dist(src: Mesh, dst: Mesh) -> PairwiseDistances:
    """
    Computes D_ij = ||y_i - x_j||^2 for query points y in
    ``dst`` and source points x in ``src``.

    Parameters
    ----------
    src: Mesh
        Source mesh (columns).

    dst: Mesh
        Query mesh (rows).

    Returns
    -------
    PairwiseDistances
        Matrix of shape (len(dst), len(src)).

    Raises
    ------
    ShapeError
        If the spatial dimensions differ.
    """
    if src.dim != dst.dim:
        raise ShapeError(f"Mesh dimensions differ: {src.dim} vs {dst.dim}")

    diff = dst.points[:, np.newaxis, :] - src.points[np.newaxis, :, :]
    matrix = np.einsum("ijk,ijk->ij", diff, diff)
    return PairwiseDistances(matrix=matrix, source_key=src.key, target_key=dst.key)


def quantile_radii(d: PairwiseDistances, q: float) -> ReceptiveField:
    """
    Receptive fields whose squared radius is the q-quantile of
    each row of the distance matrix.

    The quantile interpolates linearly between order statistics.
    The nearest source point is always part of the field so no
    row is empty.

    Parameters
    ----------
    d: PairwiseDistances
        Distances, rows are queries.

    q: float
        Quantile in (0, 1].

    Returns
    -------
    ReceptiveField
        Radii and neighbor mask.

    Raises
    ------
    ValueError
        If q is outside (0, 1].
    """
    if not (0.0 < q <= 1.0):
        raise ValueError(f"Quantile must lie in (0, 1], got {q}")

    radii_sq = np.quantile(d.matrix, q, axis=1, method="linear")
    mask = d.matrix <= radii_sq[:, np.newaxis]
    nearest = np.argmin(d.matrix, axis=1)
    mask[np.arange(mask.shape[0]), nearest] = True
    return ReceptiveField(radii_sq=radii_sq, quantile=float(q), mask=mask)


def pool_grid(
    m: Mesh,
    factors: Optional[Sequence[int]] = None,
    target_shape: Optional[Sequence[int]] = None,
) -> Mesh:
    """
    Strided subsampling of a structured grid.

    Parameters
    ----------
    m: Mesh
        Structured grid.

    factors: Optional[Sequence[int]]
        Stride per axis; trailing points that do not fill a
        stride are truncated.

    target_shape: Optional[Sequence[int]]
        Number of points per axis. Indices are spread evenly
        over each axis (e.g. 211 -> 32), used when no integer
        stride gives the shape.

    Returns
    -------
    Mesh
        Coarser structured grid.
    """
    if not m.is_grid:
        raise ValueError("pool_grid needs a structured grid, got a point cloud")
    if (factors is None) == (target_shape is None):
        raise ValueError("Provide exactly one of factors or target_shape")

    index_per_axis = grid_pool_indices(m.grid_shape, factors=factors, target_shape=target_shape)
    axes = [m.axis_coordinates(a)[idx] for a, idx in enumerate(index_per_axis)]
    return Mesh.grid(axes)


def grid_pool_indices(
    grid_shape: Sequence[int],
    factors: Optional[Sequence[int]] = None,
    target_shape: Optional[Sequence[int]] = None,
) -> List[np.ndarray]:
    """
    Per-axis indices kept by ``pool_grid``.
    """
    if factors is not None:
        if len(factors) != len(grid_shape) or min(factors) < 1:
            raise ValueError(f"Invalid pooling factors {factors} for grid {grid_shape}")
        return [np.arange(0, n, int(f)) for n, f in zip(grid_shape, factors)]

    if len(target_shape) != len(grid_shape):
        raise ValueError(f"Target shape {target_shape} does not match grid {grid_shape}")
    indices = []
    for n, t in zip(grid_shape, target_shape):
        if not (1 <= t <= n):
            raise ValueError(f"Cannot pool an axis of {n} points to {t}")
        if n % t == 0:
            indices.append(np.arange(0, n, n // int(t)))
            continue
        indices.append(np.unique(np.round(np.linspace(0, n - 1, int(t))).astype(np.int64)))
    return indices


def grid_flat_indices(
    grid_shape: Sequence[int], index_per_axis: Sequence[np.ndarray]
) -> np.ndarray:
    """Row-major flat indices of a tensor-product subset of a grid"""
    mesh = np.meshgrid(*index_per_axis, indexing="ij")
    return np.ravel_multi_index(tuple(m.reshape(-1) for m in mesh), tuple(grid_shape))


@njit(cache=False)
def _farthest_point_indices(points: np.ndarray, n_v: int, start: int) -> np.ndarray:
    n_points = points.shape[0]
    selected = np.empty(n_v, dtype=np.int64)
    min_dist = np.full(n_points, np.inf)
    taken = np.zeros(n_points, dtype=np.bool_)
    current = start

    for k in range(n_v):
        selected[k] = current
        taken[current] = True
        best = -1.0
        best_index = 0
        for i in range(n_points):
            dist = 0.0
            for j in range(points.shape[1]):
                delta = points[i, j] - points[current, j]
                dist += delta * delta
            if dist < min_dist[i]:
                min_dist[i] = dist
            # selected points and their duplicates both sit at 0
            if not taken[i] and min_dist[i] > best:
                best = min_dist[i]
                best_index = i
        current = best_index

    return selected


def farthest_point_sample(
    m: Mesh,
    n_v: int,
    seed: Optional[int] = None,
    start_index: Optional[int] = 0,
) -> Mesh:
    """
    Greedy farthest point sampling.

    Parameters
    ----------
    m: Mesh
        Mesh to subsample.

    n_v: int
        Number of points to keep.

    seed: Optional[int]
        Seed drawing the starting point when
        ``start_index`` is None. Default: None

    start_index: Optional[int]
        First selected point. Default: 0

    Returns
    -------
    Mesh
        Point cloud, subset of ``m.points`` in selection order.
    """
    return m.subset(farthest_point_indices(m, n_v, seed=seed, start_index=start_index))


def farthest_point_indices(
    m: Mesh,
    n_v: int,
    seed: Optional[int] = None,
    start_index: Optional[int] = 0,
) -> np.ndarray:
    """Indices selected by ``farthest_point_sample``"""
    if not (1 <= n_v <= m.size):
        raise ValueError(f"Cannot sample {n_v} points from a mesh of {m.size}")

    if start_index is None:
        start_index = int(np.random.default_rng(seed).integers(m.size))
    if not (0 <= start_index < m.size):
        raise ValueError(f"Start index {start_index} outside the mesh")

    return _farthest_point_indices(np.ascontiguousarray(m.points), int(n_v), int(start_index))


def build_latent_mesh(
    m: Mesh,
    latent_resolution: Sequence[int],
    seed: Optional[int] = None,
) -> Mesh:
    """
    Latent mesh for the Processor: pooling for structured
    grids, farthest point sampling for point clouds.

    Parameters
    ----------
    m: Mesh
        Input mesh.

    latent_resolution: Sequence[int]
        Target grid shape, or a single point count.

    seed: Optional[int]
        Seed used for point clouds. Default: None

    Returns
    -------
    Mesh
        Latent mesh.
    """
    latent_resolution = tuple(int(n) for n in latent_resolution)
    if m.is_grid and len(latent_resolution) == m.dim:
        if tuple(latent_resolution) == m.grid_shape:
            return m
        return pool_grid(m, target_shape=latent_resolution)

    n_v = int(np.prod(latent_resolution))
    if n_v == m.size:
        return m
    logger.info(f"Sampling {n_v} latent points out of {m.size} with farthest point sampling")
    return farthest_point_sample(m, n_v, seed=seed, start_index=0)
