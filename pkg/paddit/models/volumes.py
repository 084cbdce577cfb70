"""Regular-grid volume containers.

Arrays are indexed ``[i0, i1, (i2)]`` with axis ``k`` matching ``dims[k]``,
``spacing[k]`` and ``origin[k]``. Physical position of voxel ``idx`` is
``origin + idx * spacing`` (no rotation; inputs are assumed pre-aligned).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from paddit.core.errors import GeometryMismatchError

FloatArray = NDArray[np.float64]
IntArray = NDArray[np.int64]

MIN_AXIS_VOXELS = 4


@dataclass(frozen=True)
class GridGeometry:
    dims: tuple[int, ...]
    spacing: tuple[float, ...]
    origin: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.dims)
        if len(dims) not in (2, 3):
            raise ValueError(f"grids must have 2 or 3 axes, got {len(dims)}")
        if any(d < MIN_AXIS_VOXELS for d in dims):
            raise ValueError(f"every axis needs at least {MIN_AXIS_VOXELS} voxels, got {dims}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != len(dims) or any(not s > 0 or not np.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be {len(dims)} positive values, got {self.spacing}")
        origin = tuple(float(o) for o in self.origin) if self.origin else (0.0,) * len(dims)
        if len(origin) != len(dims):
            raise ValueError(f"origin must have {len(dims)} values, got {self.origin}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def voxel_count(self) -> int:
        return int(np.prod(self.dims))

    def world_to_index(self, points: FloatArray) -> FloatArray:
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.origin)) / np.asarray(
            self.spacing
        )

    def index_to_world(self, indices: FloatArray) -> FloatArray:
        return np.asarray(indices, dtype=np.float64) * np.asarray(self.spacing) + np.asarray(
            self.origin
        )

    def index_grid(self) -> FloatArray:
        """Voxel indices as an array of shape ``dims + (ndim,)``."""
        axes = [np.arange(d, dtype=np.float64) for d in self.dims]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def voxel_centers(self) -> FloatArray:
        """Physical voxel centers as an array of shape ``dims + (ndim,)``."""
        return self.index_to_world(self.index_grid())

    def bounds(self) -> tuple[FloatArray, FloatArray]:
        low = np.asarray(self.origin)
        high = self.index_to_world(np.asarray(self.dims, dtype=np.float64) - 1.0)
        return low, high

    def require_same(self, other: GridGeometry, what: str = "volumes") -> None:
        if self != other:
            raise GeometryMismatchError(f"{what} live on different grids: {self} vs {other}")


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    geometry: GridGeometry
    values: FloatArray = field(repr=False)

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.shape != self.geometry.dims:
            raise ValueError(f"values shape {values.shape} does not match {self.geometry.dims}")
        if not np.all(np.isfinite(values)):
            raise ValueError("scalar volume contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def with_values(self, values: FloatArray) -> ScalarVolume:
        return ScalarVolume(self.geometry, values)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    geometry: GridGeometry
    labels: IntArray = field(repr=False)

    def __post_init__(self) -> None:
        raw = np.asarray(self.labels)
        if raw.shape != self.geometry.dims:
            raise ValueError(f"labels shape {raw.shape} does not match dims {self.geometry.dims}")
        if raw.dtype.kind == "f" and not np.array_equal(raw, np.round(raw)):
            raise ValueError("labels must be integers")
        labels = raw.astype(np.int64, copy=True)
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be non-negative")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    def label_set(self) -> set[int]:
        return {int(v) for v in np.unique(self.labels)}


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-voxel displacement in mm; ``vectors`` has shape ``dims + (ndim,)``."""

    geometry: GridGeometry
    vectors: FloatArray = field(repr=False)

    def __post_init__(self) -> None:
        vectors = np.array(self.vectors, dtype=np.float64)
        expected = self.geometry.dims + (self.geometry.ndim,)
        if vectors.shape != expected:
            raise ValueError(f"vectors shape {vectors.shape} does not match {expected}")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("displacement field contains non-finite components")
        vectors.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)

    @classmethod
    def zeros(cls, geometry: GridGeometry) -> DisplacementField:
        return cls(geometry, np.zeros(geometry.dims + (geometry.ndim,)))

    def in_voxels(self) -> FloatArray:
        return self.vectors / np.asarray(self.geometry.spacing)

    def max_displacement_voxels(self) -> float:
        return float(np.max(np.linalg.norm(self.in_voxels(), axis=-1)))

    def checksum(self) -> str:
        """SHA-256 over geometry and vector bytes; shared by image and label warps."""
        digest = hashlib.sha256()
        digest.update(repr((self.geometry.dims, self.geometry.spacing)).encode())
        digest.update(np.ascontiguousarray(self.vectors, dtype="<f8").tobytes())
        return digest.hexdigest()
