"""Exponential map of stationary velocity fields.

Particles start at the voxel centers and follow ``y <- y + (t / steps) v(y)``
for ``steps`` explicit Euler steps; the velocity is evaluated from the kernel
expansion at every step, never from a rasterized field. The displacement is
``d(x) = y_steps(x) - x``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from paddit.core.errors import InversionError
from paddit.core.logging import get_logger
from paddit.models.volumes import DisplacementField, FloatArray, GridGeometry, ScalarVolume
from paddit.registration.interpolation import cubic_at_indices
from paddit.registration.kernels import KernelBlock, KernelVelocityField, kernel_block
from paddit.schemas import FlowConfig

logger = get_logger(__name__)

DEFAULT_INVERSION_TOLERANCE = 0.5


@dataclass(frozen=True, eq=False)
class FlowTrace:
    """End points of the Euler flow and, optionally, the kernel blocks of every step."""

    final: FloatArray
    blocks: list[KernelBlock]


def integrate_points(
    v: KernelVelocityField,
    points: FloatArray,
    time: float,
    steps: int,
    keep_blocks: bool = False,
) -> FlowTrace:
    h = time / steps
    blocks = []
    y = points
    for _ in range(steps):
        block = kernel_block(v.grid, y)
        if keep_blocks:
            blocks.append(block)
        y = y + h * (block.matrix @ v.coeffs)
    return FlowTrace(y, blocks)


def exponentiate(
    v: KernelVelocityField, g: GridGeometry, fc: FlowConfig | None = None
) -> DisplacementField:
    """Displacement of ``Exp(time * v)`` sampled at the voxel centers of ``g``."""
    fc = fc or FlowConfig()
    centers = g.voxel_centers().reshape(-1, g.ndim)
    if fc.time == 0.0:
        return DisplacementField.zeros(g)
    final = integrate_points(v, centers, fc.time, fc.steps).final
    return DisplacementField(g, (final - centers).reshape(g.dims + (g.ndim,)))


def _sample_displacement(d: DisplacementField, coords: FloatArray) -> FloatArray:
    """Cubic interpolation of each displacement component at index coordinates."""
    return np.stack(
        [cubic_at_indices(d.vectors[..., c], coords)[0] for c in range(d.geometry.ndim)],
        axis=-1,
    )


def inverse_residual(d: DisplacementField, d_inv: DisplacementField) -> FloatArray:
    """Per-voxel ``|phi(phi_inv(x)) - x|`` in voxels."""
    geometry = d.geometry
    spacing = np.asarray(geometry.spacing)
    grid = geometry.index_grid().reshape(-1, geometry.ndim)
    u = d_inv.vectors.reshape(-1, geometry.ndim)
    composed = u + _sample_displacement(d, grid + u / spacing)
    return np.linalg.norm(composed / spacing, axis=-1).reshape(geometry.dims)


def invert(
    d: DisplacementField,
    iters: int = 10,
    velocity: KernelVelocityField | None = None,
    flow: FlowConfig | None = None,
    tolerance: float | None = DEFAULT_INVERSION_TOLERANCE,
) -> DisplacementField:
    """Inverse displacement of ``x -> x + d(x)``.

    With the generating velocity available the inverse is the flow of ``-v``
    over the same time; otherwise ``u <- -d(x + u)`` is iterated ``iters``
    times. Raises :class:`InversionError` when the composition residual
    exceeds ``tolerance`` voxels.
    """
    geometry = d.geometry
    if velocity is not None:
        d_inv = exponentiate(velocity.negated(), geometry, flow)
    else:
        if iters < 1:
            raise ValueError("fixed-point inversion needs at least one iteration")
        spacing = np.asarray(geometry.spacing)
        grid = geometry.index_grid().reshape(-1, geometry.ndim)
        u = -d.vectors.reshape(-1, geometry.ndim)
        for _ in range(iters):
            u = -_sample_displacement(d, grid + u / spacing)
        d_inv = DisplacementField(geometry, u.reshape(geometry.dims + (geometry.ndim,)))

    if tolerance is not None:
        residual = float(np.max(inverse_residual(d, d_inv)))
        logger.debug(f"Inverse residual: max={residual:.4f} voxels")
        if residual > tolerance:
            raise InversionError(
                f"inverse did not converge: max residual {residual:.4f} voxels "
                f"exceeds {tolerance}",
                max_residual=residual,
            )
    return d_inv


def jacobian_determinant(d: DisplacementField) -> ScalarVolume:
    """``det(I + grad d)`` per voxel; central differences inside, one-sided at the border."""
    geometry = d.geometry
    ndim = geometry.ndim
    jac = np.zeros(geometry.dims + (ndim, ndim))
    for c in range(ndim):
        partials = np.gradient(d.vectors[..., c], *geometry.spacing)
        for a in range(ndim):
            jac[..., c, a] = partials[a] + (1.0 if a == c else 0.0)
    return ScalarVolume(geometry, np.linalg.det(jac))

