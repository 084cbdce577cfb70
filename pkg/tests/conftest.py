"""Pytest configuration and fixtures."""

from pathlib import Path

import numpy as np
import pytest

from paddit.models.volumes import GridGeometry, LabelVolume, ScalarVolume
from paddit.registration.kernels import ControlGrid
from paddit.schemas import KernelConfig, PopulationConfig
from worker.augmentation.synthetic import SyntheticPopulation, generate_synthetic


def blob_image(geometry: GridGeometry, center_shift: float = 0.0) -> ScalarVolume:
    """Smooth Gaussian blob; nonzero gradient almost everywhere."""
    idx = geometry.index_grid()
    center = (np.asarray(geometry.dims) - 1) / 2.0 + center_shift
    r2 = np.sum((idx - center) ** 2, axis=-1)
    return ScalarVolume(geometry, np.exp(-r2 / (2.0 * (0.2 * min(geometry.dims)) ** 2)))


@pytest.fixture
def geometry_2d() -> GridGeometry:
    """16x16 grid with unit spacing."""
    return GridGeometry((16, 16), (1.0, 1.0))


@pytest.fixture
def kernel_3x3() -> KernelConfig:
    """Control points at 0.5, 7.5 and 14.5 on a 16-voxel axis."""
    return KernelConfig(control_spacing=7, support_radius=14.0)


@pytest.fixture
def grid_3x3(geometry_2d: GridGeometry, kernel_3x3: KernelConfig) -> ControlGrid:
    return ControlGrid.regular(geometry_2d, kernel_3x3)


@pytest.fixture
def blob(geometry_2d: GridGeometry) -> ScalarVolume:
    return blob_image(geometry_2d)


@pytest.fixture
def blob_labels(blob: ScalarVolume) -> LabelVolume:
    return LabelVolume(blob.geometry, (blob.values > 0.5).astype(np.int64))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_population_cfg() -> PopulationConfig:
    return PopulationConfig(
        n_subjects=3, dims=(16, 16), noise_std=0.02, control_spacing=7, seed=7, flow_steps=4
    )


@pytest.fixture
def synthetic_dataset(
    tmp_path: Path, small_population_cfg: PopulationConfig
) -> SyntheticPopulation:
    """Three-subject raw-format dataset written under ``tmp_path / 'data'``."""
    return generate_synthetic(small_population_cfg, tmp_path / "data")


@pytest.fixture
def manifest_path(tmp_path: Path, synthetic_dataset: SyntheticPopulation) -> Path:
    return tmp_path / "data" / "manifest.json"
