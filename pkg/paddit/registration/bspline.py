"""Random free-form deformations: the B-spline augmentation baseline.

Every axis with ``n`` voxels carries ``cp + 2`` control nodes: ``cp`` nodes
spread uniformly from the first to the last voxel plus one margin node on
each side. Node coefficients are i.i.d. ``N(0, sd^2)`` in voxels, and the
dense field is their tensor-product uniform cubic B-spline interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from paddit.models.volumes import (
    DisplacementField,
    FloatArray,
    GridGeometry,
    LabelVolume,
    ScalarVolume,
)
from paddit.registration.flow import jacobian_determinant
from paddit.registration.interpolation import warp_image, warp_labels
from paddit.schemas import BsplineConfig


def bspline_weights(t: FloatArray) -> FloatArray:
    """Uniform cubic B-spline basis at fractional offsets ``t``; shape ``t.shape + (4,)``."""
    t = np.asarray(t, dtype=np.float64)
    t2 = t * t
    t3 = t2 * t
    return (
        np.stack(
            [
                (1.0 - t) ** 3,
                3.0 * t3 - 6.0 * t2 + 4.0,
                -3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0,
                t3,
            ],
            axis=-1,
        )
        / 6.0
    )


def lattice_spacing(size: int, cp: int) -> float:
    """Voxels between neighbouring control nodes on an axis of ``size`` voxels."""
    return (size - 1) / (cp - 1)


def axis_weight_matrix(size: int, cp: int) -> FloatArray:
    """``(size, cp + 2)`` matrix mapping node coefficients to voxel values on one axis."""
    u = np.arange(size, dtype=np.float64) / lattice_spacing(size, cp) + 1.0
    base = np.clip(np.floor(u).astype(np.int64) - 1, 0, cp - 2)
    weights = bspline_weights(u - 1.0 - base)
    matrix = np.zeros((size, cp + 2))
    rows = np.arange(size)
    for offset in range(4):
        matrix[rows, base + offset] = weights[:, offset]
    return matrix


def evaluate_lattice(coeffs: FloatArray, g: GridGeometry) -> DisplacementField:
    """Dense displacement from node coefficients in voxels, shape ``(cp_0 + 2, ..., ndim)``."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim != g.ndim + 1 or coeffs.shape[-1] != g.ndim:
        raise ValueError(f"coefficients of shape {coeffs.shape} do not fit a {g.ndim}D grid")
    dense = coeffs
    for axis, size in enumerate(g.dims):
        matrix = axis_weight_matrix(size, coeffs.shape[axis] - 2)
        dense = np.moveaxis(np.tensordot(matrix, dense, axes=([1], [axis])), 0, axis)
    return DisplacementField(g, dense * np.asarray(g.spacing))


def sample_bspline_field(
    cfg: BsplineConfig, g: GridGeometry, rng: np.random.Generator | None = None
) -> DisplacementField:
    """Random FFD with i.i.d. ``N(0, sd^2)`` voxel displacements at every control node."""
    rng = rng or np.random.default_rng(cfg.seed)
    shape = tuple(cp + 2 for cp in cfg.cp_for(g.ndim)) + (g.ndim,)
    coeffs = cfg.sd * rng.standard_normal(shape)
    return evaluate_lattice(coeffs, g)


@dataclass(frozen=True, eq=False)
class BaselineWarp:
    """Warped pair plus the field that produced it."""

    image: ScalarVolume
    labels: LabelVolume | None
    field: DisplacementField

    @property
    def checksum(self) -> str:
        return self.field.checksum()

    @property
    def min_jacobian(self) -> float:
        return float(np.min(jacobian_determinant(self.field).values))


def apply_baseline(
    img: ScalarVolume,
    lbl: LabelVolume | None,
    cfg: BsplineConfig,
    rng: np.random.Generator | None = None,
) -> BaselineWarp:
    """Warp an image (cubic) and its labels (nearest) with one random B-spline field."""
    if lbl is not None:
        img.geometry.require_same(lbl.geometry, "image and labels")
    d = sample_bspline_field(cfg, img.geometry, rng)
    return BaselineWarp(
        image=warp_image(img, d),
        labels=warp_labels(lbl, d) if lbl is not None else None,
        field=d,
    )
