"""Catmull-Rom cubic and nearest-neighbor sampling of grid volumes.

Images are resampled with the Catmull-Rom cubic (interpolating, no
prefilter), label maps with nearest neighbor. Both clamp to the edge outside
the grid. Warps evaluate the source at ``x + d(x)`` for every voxel center
``x``, working in index coordinates so that a zero displacement hits the grid
nodes exactly.
"""

from __future__ import annotations

from itertools import product

import numpy as np

from paddit.models.volumes import (
    DisplacementField,
    FloatArray,
    GridGeometry,
    IntArray,
    LabelVolume,
    ScalarVolume,
)

_STENCIL_OFFSETS = np.arange(-1, 3)


def catmull_rom_weights(frac: FloatArray) -> FloatArray:
    """Weights of nodes ``i-1 .. i+2`` for fractional offsets ``frac`` in [0, 1]."""
    f = frac[..., None]
    f2 = f * f
    f3 = f2 * f
    coeffs = np.concatenate(
        [
            -f3 + 2.0 * f2 - f,
            3.0 * f3 - 5.0 * f2 + 2.0,
            -3.0 * f3 + 4.0 * f2 + f,
            f3 - f2,
        ],
        axis=-1,
    )
    return 0.5 * coeffs


def catmull_rom_derivative_weights(frac: FloatArray) -> FloatArray:
    f = frac[..., None]
    f2 = f * f
    coeffs = np.concatenate(
        [
            -3.0 * f2 + 4.0 * f - 1.0,
            9.0 * f2 - 10.0 * f,
            -9.0 * f2 + 8.0 * f + 1.0,
            3.0 * f2 - 2.0 * f,
        ],
        axis=-1,
    )
    return 0.5 * coeffs


def _axis_stencil(coords: FloatArray, size: int) -> tuple[IntArray, FloatArray, FloatArray]:
    """Node indices, weights and derivative weights along one axis.

    Coordinates outside ``[0, size-1]`` are clamped; the derivative there is
    zero because the clamped interpolant is constant in that direction.
    """
    inside = (coords >= 0.0) & (coords <= size - 1)
    clamped = np.clip(coords, 0.0, size - 1)
    base = np.floor(clamped)
    frac = clamped - base
    nodes = np.clip(base.astype(np.int64)[:, None] + _STENCIL_OFFSETS, 0, size - 1)
    weights = catmull_rom_weights(frac)
    dweights = catmull_rom_derivative_weights(frac) * inside[:, None]
    return nodes, weights, dweights


def cubic_at_indices(
    values: FloatArray, coords: FloatArray, with_gradient: bool = False
) -> tuple[FloatArray, FloatArray | None]:
    """Interpolate ``values`` at index coordinates ``coords`` of shape (M, ndim).

    Returns the interpolated values and, when requested, the gradient with
    respect to the index coordinates, shape (M, ndim).
    """
    ndim = values.ndim
    stencils = [_axis_stencil(coords[:, axis], values.shape[axis]) for axis in range(ndim)]
    out = np.zeros(coords.shape[0])
    grad = np.zeros(coords.shape) if with_gradient else None

    for taps in product(range(4), repeat=ndim):
        samples = values[tuple(stencils[a][0][:, taps[a]] for a in range(ndim))]
        axis_weights = [stencils[a][1][:, taps[a]] for a in range(ndim)]
        weight = axis_weights[0]
        for w in axis_weights[1:]:
            weight = weight * w
        out += weight * samples
        if grad is not None:
            for axis in range(ndim):
                partial = stencils[axis][2][:, taps[axis]]
                for other in range(ndim):
                    if other != axis:
                        partial = partial * axis_weights[other]
                grad[:, axis] += partial * samples
    return out, grad


def nearest_at_indices(labels: IntArray, coords: FloatArray) -> IntArray:
    """Nearest voxel label; halfway ties go to the lower index, outside clamps."""
    index = []
    for axis in range(labels.ndim):
        nearest = np.ceil(coords[:, axis] - 0.5).astype(np.int64)
        index.append(np.clip(nearest, 0, labels.shape[axis] - 1))
    return labels[tuple(index)]


def _as_points(geometry: GridGeometry, p: FloatArray) -> tuple[FloatArray, tuple[int, ...]]:
    points = np.asarray(p, dtype=np.float64)
    if points.shape[-1] != geometry.ndim:
        raise ValueError(f"points must have {geometry.ndim} coordinates, got {points.shape}")
    lead = points.shape[:-1]
    return geometry.world_to_index(points.reshape(-1, geometry.ndim)), lead


def sample_cubic(vol: ScalarVolume, p: FloatArray | tuple[float, ...]) -> FloatArray | float:
    """Catmull-Rom value at physical point(s) ``p`` (shape ``(..., ndim)``)."""
    coords, lead = _as_points(vol.geometry, np.asarray(p))
    values, _ = cubic_at_indices(vol.values, coords)
    return float(values[0]) if not lead else values.reshape(lead)


def sample_nearest(labels: LabelVolume, p: FloatArray | tuple[float, ...]) -> IntArray | int:
    coords, lead = _as_points(labels.geometry, np.asarray(p))
    found = nearest_at_indices(labels.labels, coords)
    return int(found[0]) if not lead else found.reshape(lead)


def image_gradient(vol: ScalarVolume, p: FloatArray | tuple[float, ...]) -> FloatArray:
    """Spatial gradient of the cubic interpolant at ``p``, per mm."""
    coords, lead = _as_points(vol.geometry, np.asarray(p))
    _, grad = cubic_at_indices(vol.values, coords, with_gradient=True)
    assert grad is not None
    grad = grad / np.asarray(vol.geometry.spacing)
    return grad[0] if not lead else grad.reshape(lead + (vol.geometry.ndim,))


def _warped_indices(d: DisplacementField) -> FloatArray:
    geometry = d.geometry
    return (geometry.index_grid() + d.in_voxels()).reshape(-1, geometry.ndim)


def warp_image(vol: ScalarVolume, d: DisplacementField) -> ScalarVolume:
    """``output(x) = vol(x + d(x))`` with cubic interpolation."""
    vol.geometry.require_same(d.geometry, "image and displacement")
    values, _ = cubic_at_indices(vol.values, _warped_indices(d))
    return ScalarVolume(vol.geometry, values.reshape(vol.geometry.dims))


def warp_labels(labels: LabelVolume, d: DisplacementField) -> LabelVolume:
    """``output(x) = labels(x + d(x))`` with nearest-neighbor lookup."""
    labels.geometry.require_same(d.geometry, "labels and displacement")
    found = nearest_at_indices(labels.labels, _warped_indices(d))
    return LabelVolume(labels.geometry, found.reshape(labels.geometry.dims))
