"""Wendland-kernel parameterization of stationary velocity fields.

A velocity field is a finite kernel expansion ``v(x) = sum_i phi(|x - x_i|) a_i``
over control points ``x_i`` with vector coefficients ``a_i`` (mm). The kernel is
the compactly supported Wendland C2 function, so every evaluation only touches
control points within the support radius.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from itertools import chain

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from paddit.models.volumes import DisplacementField, FloatArray, GridGeometry, IntArray
from paddit.schemas import KernelConfig

GRAM_JITTER = 1e-8


def wendland_c2(u: FloatArray) -> FloatArray:
    """phi(u) = (1 - u)^4 (4u + 1) on [0, 1), zero beyond."""
    u = np.asarray(u, dtype=np.float64)
    inside = np.clip(1.0 - u, 0.0, None)
    return inside**4 * (4.0 * u + 1.0)


def kernel_eval(cfg: KernelConfig | float, r: FloatArray | float) -> FloatArray | float:
    """Kernel value at distance ``r`` (mm); ``cfg`` may be a config or a radius."""
    radius = cfg if isinstance(cfg, float | int) else cfg.support_radius
    if radius is None:
        raise ValueError("kernel config has no resolved support radius")
    value = wendland_c2(np.asarray(r, dtype=np.float64) / float(radius))
    return float(value) if np.ndim(value) == 0 else value


def kernel_grad(offsets: FloatArray, radius: float) -> FloatArray:
    """Gradient of ``phi(|d| / R)`` with respect to ``d`` for offsets ``d`` of shape (n, ndim)."""
    u = np.linalg.norm(offsets, axis=-1) / radius
    scale = -20.0 * np.clip(1.0 - u, 0.0, None) ** 3 / radius**2
    return scale[:, None] * offsets


@dataclass(frozen=True, eq=False)
class GramMatrix:
    """Kernel evaluations between control points plus diagonal jitter."""

    entries: FloatArray = field(repr=False)
    jitter: float = GRAM_JITTER

    @cached_property
    def cholesky_lower(self) -> FloatArray:
        return linalg.cholesky(self.entries, lower=True)

    @cached_property
    def log_det(self) -> float:
        return float(2.0 * np.sum(np.log(np.diag(self.cholesky_lower))))

    @property
    def size(self) -> int:
        return int(self.entries.shape[0])

    def inverse(self) -> FloatArray:
        return linalg.cho_solve((self.cholesky_lower, True), np.eye(self.size))


@dataclass(frozen=True, eq=False)
class ControlGrid:
    """Control-point positions (mm) over a reference grid."""

    geometry: GridGeometry
    positions: FloatArray = field(repr=False)
    support_radius: float = 16.0

    def __post_init__(self) -> None:
        positions = np.array(self.positions, dtype=np.float64).reshape(-1, self.geometry.ndim)
        if positions.shape[0] == 0:
            raise ValueError("a control grid needs at least one control point")
        low, high = self.geometry.bounds()
        tol = 1e-9 * max(1.0, float(np.max(np.abs(high))))
        if np.any(positions < low - tol) or np.any(positions > high + tol):
            raise ValueError("control points must lie within the volume bounds")
        if not self.support_radius > 0:
            raise ValueError("support radius must be positive")
        positions.setflags(write=False)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "support_radius", float(self.support_radius))

    @classmethod
    def regular(cls, geometry: GridGeometry, cfg: KernelConfig) -> ControlGrid:
        """Control points every ``cfg.control_spacing`` voxels, centered in the volume."""
        axes = []
        for size, step in zip(geometry.dims, cfg.spacing_for(geometry.ndim)):
            count = (size - 1) // step + 1
            offset = ((size - 1) - (count - 1) * step) / 2.0
            axes.append(offset + step * np.arange(count, dtype=np.float64))
        lattice = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, geometry.ndim)
        return cls(geometry, geometry.index_to_world(lattice), cfg.radius_for(geometry.spacing))

    @property
    def size(self) -> int:
        return int(self.positions.shape[0])

    @property
    def ndim(self) -> int:
        return self.geometry.ndim

    @cached_property
    def tree(self) -> cKDTree:
        return cKDTree(self.positions)

    @cached_property
    def sparse_gram(self) -> sparse.csr_matrix:
        """Unjittered Gram matrix keeping only pairs within the support."""
        pairs = np.asarray(
            self.tree.query_pairs(self.support_radius, output_type="ndarray"), dtype=np.int64
        ).reshape(-1, 2)
        i, j = pairs[:, 0], pairs[:, 1]
        dist = np.linalg.norm(self.positions[i] - self.positions[j], axis=1)
        off = wendland_c2(dist / self.support_radius)
        diag = np.arange(self.size)
        rows = np.concatenate([diag, i, j])
        cols = np.concatenate([diag, j, i])
        vals = np.concatenate([np.ones(self.size), off, off])
        return sparse.csr_matrix((vals, (rows, cols)), shape=(self.size, self.size))

    @cached_property
    def gram(self) -> GramMatrix:
        return gram_matrix(self)

    @cached_property
    def log_det_gram(self) -> float:
        """``log det K`` of the jittered Gram from a sparse LU factorization."""
        jittered = (self.sparse_gram + GRAM_JITTER * sparse.identity(self.size)).tocsc()
        factor = splu(jittered)
        return float(np.sum(np.log(np.abs(factor.U.diagonal()))))

    def permuted(self, order: IntArray) -> ControlGrid:
        return ControlGrid(self.geometry, self.positions[order], self.support_radius)


@dataclass(frozen=True, eq=False)
class KernelVelocityField:
    grid: ControlGrid
    coeffs: FloatArray = field(repr=False)

    def __post_init__(self) -> None:
        coeffs = np.array(self.coeffs, dtype=np.float64)
        expected = (self.grid.size, self.grid.ndim)
        if coeffs.shape != expected:
            raise ValueError(f"coefficients shape {coeffs.shape} does not match {expected}")
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("velocity coefficients must be finite")
        coeffs.setflags(write=False)
        object.__setattr__(self, "coeffs", coeffs)

    @classmethod
    def zeros(cls, grid: ControlGrid) -> KernelVelocityField:
        return cls(grid, np.zeros((grid.size, grid.ndim)))

    @classmethod
    def from_flat(cls, grid: ControlGrid, q: FloatArray) -> KernelVelocityField:
        return cls(grid, np.asarray(q).reshape(grid.size, grid.ndim))

    def flat(self) -> FloatArray:
        return self.coeffs.reshape(-1).copy()

    def negated(self) -> KernelVelocityField:
        return KernelVelocityField(self.grid, -self.coeffs)


@dataclass(frozen=True, eq=False)
class KernelBlock:
    """Kernel weights between M evaluation points and the control points."""

    rows: IntArray
    cols: IntArray
    offsets: FloatArray
    weights: FloatArray
    n_points: int
    n_controls: int

    @cached_property
    def matrix(self) -> sparse.csr_matrix:
        return sparse.csr_matrix(
            (self.weights, (self.rows, self.cols)), shape=(self.n_points, self.n_controls)
        )


def kernel_block(grid: ControlGrid, points: FloatArray) -> KernelBlock:
    """Pair every point with the control points inside its support ball."""
    neighbours = grid.tree.query_ball_point(points, r=grid.support_radius)
    counts = np.fromiter((len(n) for n in neighbours), dtype=np.int64, count=len(neighbours))
    rows = np.repeat(np.arange(points.shape[0], dtype=np.int64), counts)
    cols = np.fromiter(chain.from_iterable(neighbours), dtype=np.int64, count=int(counts.sum()))
    offsets = points[rows] - grid.positions[cols]
    weights = wendland_c2(np.linalg.norm(offsets, axis=1) / grid.support_radius)
    return KernelBlock(rows, cols, offsets, weights, points.shape[0], grid.size)


def velocity_at_points(v: KernelVelocityField, points: FloatArray) -> FloatArray:
    """Velocities at an (M, ndim) array of physical points."""
    return np.asarray(kernel_block(v.grid, points).matrix @ v.coeffs)


def velocity_at(v: KernelVelocityField, p: FloatArray | tuple[float, ...]) -> FloatArray:
    points = np.asarray(p, dtype=np.float64)
    lead = points.shape[:-1]
    vel = velocity_at_points(v, points.reshape(-1, v.grid.ndim))
    return vel[0] if not lead else vel.reshape(lead + (v.grid.ndim,))


def dense_velocity(v: KernelVelocityField, g: GridGeometry) -> DisplacementField:
    """Rasterize the velocity at every voxel center of ``g``."""
    v.grid.geometry.require_same(g, "velocity grid and target geometry")
    centers = g.voxel_centers().reshape(-1, g.ndim)
    return DisplacementField(g, velocity_at_points(v, centers).reshape(g.dims + (g.ndim,)))


def norm_sq(v: KernelVelocityField) -> float:
    """RKHS norm ``sum_i sum_j phi(|x_i - x_j|) a_i . a_j`` over the sparse Gram."""
    return float(np.sum(v.coeffs * (v.grid.sparse_gram @ v.coeffs)))


def gram_matrix(grid: ControlGrid, cfg: KernelConfig | None = None) -> GramMatrix:
    radius = grid.support_radius if cfg is None else cfg.radius_for(grid.geometry.spacing)
    entries = wendland_c2(cdist(grid.positions, grid.positions) / radius)
    entries[np.diag_indices_from(entries)] += GRAM_JITTER
    return GramMatrix(entries)


def sample_prior(
    grid: ControlGrid, rng: np.random.Generator, scale: float = 1.0
) -> KernelVelocityField:
    """Draw coefficients from the Gaussian with precision ``K`` (density ``exp(-|v|^2 / 2)``)."""
    z = rng.standard_normal((grid.size, grid.ndim))
    coeffs = linalg.solve_triangular(grid.gram.cholesky_lower.T, z, lower=False)
    return KernelVelocityField(grid, scale * coeffs)
