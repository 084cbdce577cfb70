"""Synthetic 2D blob populations with known deformations.

A base image (disk and ellipse union with a bright lesion blob) is warped by
prior-sampled kernel velocity fields, one per subject, and corrupted with
Gaussian noise. The base image is the population mean by construction, so it
serves as the ground truth for template recovery.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel
from scipy import ndimage

from paddit.core.errors import DataError
from paddit.core.logging import get_logger
from paddit.models.volumes import FloatArray, GridGeometry, LabelVolume, ScalarVolume
from paddit.registration.flow import exponentiate
from paddit.registration.hmc import chain_rng
from paddit.registration.interpolation import warp_image, warp_labels
from paddit.registration.kernels import ControlGrid, KernelVelocityField, sample_prior
from paddit.schemas import (
    DatasetManifest,
    FlowConfig,
    KernelConfig,
    PopulationConfig,
    SubjectEntry,
)
from worker.ingestion.manifest import write_manifest
from worker.ingestion.volume_io import save_volume

logger = get_logger(__name__)

CHANNEL = "image"
SHAPE_THRESHOLD = 0.5
TRUTH_JSON = "ground_truth.json"
TRUTH_ARRAYS = "ground_truth.npz"


class GroundTruthRecord(BaseModel):
    population: PopulationConfig
    subject_ids: list[str]
    support_radius: float


def base_shapes(geometry: GridGeometry) -> tuple[FloatArray, FloatArray]:
    """``(shape_mask, lesion_mask)`` as 0/1 arrays in index space."""
    idx = geometry.index_grid()
    dims = np.asarray(geometry.dims, dtype=np.float64)
    center = (dims - 1.0) / 2.0
    size = float(dims.min())
    rel = idx - center

    disk = np.sum(rel**2, axis=-1) <= (0.25 * size) ** 2
    ell = rel - np.array([0.1 * dims[0], 0.0])
    ellipse = (ell[..., 0] / (0.22 * dims[0])) ** 2 + (ell[..., 1] / (0.14 * dims[1])) ** 2 <= 1.0
    shape = disk | ellipse

    lesion_center = np.array([-0.08 * dims[0], 0.06 * dims[1]])
    lesion_radius = max(2.0, 0.07 * size)
    lesion = np.sum((rel - lesion_center) ** 2, axis=-1) <= lesion_radius**2
    return shape.astype(np.float64), (lesion & shape).astype(np.float64)


def base_image(geometry: GridGeometry, lesion_intensity: float) -> ScalarVolume:
    shape, lesion = base_shapes(geometry)
    values = np.where(lesion > 0, lesion_intensity, shape)
    return ScalarVolume(geometry, ndimage.gaussian_filter(values, sigma=1.0, mode="nearest"))


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Everything needed to rebuild every subject exactly."""

    cfg: PopulationConfig
    grid: ControlGrid
    base: ScalarVolume
    coefficients: list[FloatArray]
    noise: list[FloatArray]
    subject_ids: list[str]

    @property
    def geometry(self) -> GridGeometry:
        return self.base.geometry

    @property
    def mean_shape(self) -> LabelVolume:
        """Population mean shape: the undeformed base shape."""
        shape, _ = base_shapes(self.geometry)
        return LabelVolume(self.geometry, shape)

    @property
    def lesion(self) -> LabelVolume:
        _, lesion = base_shapes(self.geometry)
        return LabelVolume(self.geometry, lesion)

    def field(self, k: int) -> KernelVelocityField:
        return KernelVelocityField(self.grid, self.coefficients[k])

    def recompute(self, k: int) -> tuple[ScalarVolume, LabelVolume]:
        d = exponentiate(self.field(k), self.geometry, FlowConfig(steps=self.cfg.flow_steps))
        warped = warp_image(self.base, d)
        return warped.with_values(warped.values + self.noise[k]), warp_labels(self.lesion, d)


@dataclass(frozen=True, eq=False)
class SyntheticPopulation:
    truth: GroundTruth
    images: list[ScalarVolume]
    labels: list[LabelVolume]
    manifest: DatasetManifest | None = None


def _population_grid(cfg: PopulationConfig, geometry: GridGeometry) -> ControlGrid:
    return ControlGrid.regular(geometry, KernelConfig(control_spacing=cfg.control_spacing))


def simulate_population(cfg: PopulationConfig) -> SyntheticPopulation:
    geometry = GridGeometry(cfg.dims, (cfg.spacing, cfg.spacing))
    grid = _population_grid(cfg, geometry)
    base = base_image(geometry, cfg.lesion_intensity)

    coefficients, noise = [], []
    for k in range(cfg.n_subjects):
        rng = chain_rng(cfg.seed, k, 0)
        coefficients.append(sample_prior(grid, rng, scale=cfg.deformation_scale).coeffs)
        noise.append(cfg.noise_std * rng.standard_normal(geometry.dims))
    subject_ids = [f"subject_{k:03d}" for k in range(cfg.n_subjects)]
    truth = GroundTruth(cfg, grid, base, coefficients, noise, subject_ids)

    images, labels = [], []
    for k in range(cfg.n_subjects):
        image, label = truth.recompute(k)
        images.append(image)
        labels.append(label)
    return SyntheticPopulation(truth, images, labels)


def generate_synthetic(cfg: PopulationConfig, out_dir: Path | str) -> SyntheticPopulation:
    """Simulate a population and write it as a raw-format dataset with its ground truth."""
    out_dir = Path(out_dir)
    population = simulate_population(cfg)
    truth = population.truth

    entries = []
    for sid, image, label in zip(truth.subject_ids, population.images, population.labels):
        image_rel = Path("images") / f"{sid}_{CHANNEL}.raw"
        label_rel = Path("labels") / f"{sid}_label.raw"
        save_volume(image, out_dir / image_rel)
        save_volume(label, out_dir / label_rel)
        entries.append(SubjectEntry(subject_id=sid, images={CHANNEL: image_rel}, label=label_rel))
    manifest = DatasetManifest(root=Path("."), subjects=entries)
    write_manifest(manifest, out_dir / "manifest.json")

    save_volume(truth.base, out_dir / "mean_image.raw")
    save_volume(truth.mean_shape, out_dir / "mean_shape.raw")
    record = GroundTruthRecord(
        population=cfg, subject_ids=truth.subject_ids, support_radius=truth.grid.support_radius
    )
    (out_dir / TRUTH_JSON).write_text(record.model_dump_json(indent=2) + "\n", encoding="utf-8")
    arrays = {"base": truth.base.values}
    for k in range(cfg.n_subjects):
        arrays[f"coefficients_{k}"] = truth.coefficients[k]
        arrays[f"noise_{k}"] = truth.noise[k]
    np.savez(out_dir / TRUTH_ARRAYS, **arrays)

    logger.info(
        f"Synthetic population written to {out_dir}: {cfg.n_subjects} subjects, dims={cfg.dims}, "
        f"noise_std={cfg.noise_std}, deformation_scale={cfg.deformation_scale}"
    )
    return SyntheticPopulation(truth, population.images, population.labels, manifest)


def load_ground_truth(out_dir: Path | str) -> GroundTruth:
    out_dir = Path(out_dir)
    try:
        record = GroundTruthRecord.model_validate_json((out_dir / TRUTH_JSON).read_text())
        with np.load(out_dir / TRUTH_ARRAYS) as arrays:
            base = arrays["base"]
            n = record.population.n_subjects
            coefficients = [arrays[f"coefficients_{k}"] for k in range(n)]
            noise = [arrays[f"noise_{k}"] for k in range(n)]
    except (FileNotFoundError, KeyError) as exc:
        raise DataError(f"{out_dir}: incomplete ground-truth record: {exc}") from exc

    cfg = record.population
    geometry = GridGeometry(cfg.dims, (cfg.spacing, cfg.spacing))
    grid = _population_grid(cfg, geometry)
    base_volume = ScalarVolume(geometry, base)
    return GroundTruth(cfg, grid, base_volume, coefficients, noise, record.subject_ids)


def dice(a: LabelVolume | FloatArray, b: LabelVolume | FloatArray) -> float:
    """Overlap ``2|A and B| / (|A| + |B|)`` of the nonzero voxels; 1.0 when both are empty."""
    mask_a = np.asarray(a.labels if isinstance(a, LabelVolume) else a) > 0
    mask_b = np.asarray(b.labels if isinstance(b, LabelVolume) else b) > 0
    total = int(mask_a.sum() + mask_b.sum())
    if total == 0:
        return 1.0
    return 2.0 * float(np.logical_and(mask_a, mask_b).sum()) / total


def threshold(volume: ScalarVolume, level: float = SHAPE_THRESHOLD) -> LabelVolume:
    return LabelVolume(volume.geometry, (volume.values > level).astype(np.int64))
