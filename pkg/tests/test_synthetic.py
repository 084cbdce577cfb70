"""Tests for synthetic populations and overlap helpers."""

from pathlib import Path

import numpy as np
import pytest

from paddit.core.errors import DataError
from paddit.models.volumes import GridGeometry, LabelVolume, ScalarVolume
from paddit.schemas import PopulationConfig
from worker.augmentation.synthetic import (
    SyntheticPopulation,
    base_shapes,
    dice,
    load_ground_truth,
    simulate_population,
    threshold,
)
from worker.ingestion.manifest import load_dataset, load_manifest


def test_undeformed_noiseless_population_is_the_base(
    small_population_cfg: PopulationConfig,
) -> None:
    """Test that zero deformation and zero noise reproduce the ground-truth mean."""
    cfg = small_population_cfg.model_copy(update={"deformation_scale": 0.0, "noise_std": 0.0})
    population = simulate_population(cfg)
    for image, label in zip(population.images, population.labels):
        assert np.array_equal(image.values, population.truth.base.values)
        assert np.array_equal(label.labels, population.truth.lesion.labels)


def test_written_dataset_matches_memory(
    tmp_path: Path, synthetic_dataset: SyntheticPopulation
) -> None:
    manifest = load_manifest(tmp_path / "data" / "manifest.json")
    subjects = load_dataset(manifest)
    assert len(subjects) == 3
    for subject, image, label in zip(
        subjects, synthetic_dataset.images, synthetic_dataset.labels
    ):
        assert np.allclose(subject.images["image"].values, image.values, atol=1e-6)
        assert np.array_equal(subject.label.labels, label.labels)
    assert (tmp_path / "data" / "mean_image.raw").exists()
    assert (tmp_path / "data" / "mean_shape.raw").exists()


def test_ground_truth_rebuilds_every_subject(
    tmp_path: Path, synthetic_dataset: SyntheticPopulation
) -> None:
    """Test that the stored coefficients and noise regenerate the subjects exactly."""
    truth = load_ground_truth(tmp_path / "data")
    assert truth.subject_ids == ["subject_000", "subject_001", "subject_002"]
    assert truth.grid.support_radius == synthetic_dataset.truth.grid.support_radius
    for k, (image, label) in enumerate(zip(synthetic_dataset.images, synthetic_dataset.labels)):
        rebuilt_image, rebuilt_label = truth.recompute(k)
        assert np.array_equal(rebuilt_image.values, image.values)
        assert np.array_equal(rebuilt_label.labels, label.labels)


def test_population_depends_on_seed(small_population_cfg: PopulationConfig) -> None:
    a = simulate_population(small_population_cfg)
    b = simulate_population(small_population_cfg)
    c = simulate_population(small_population_cfg.model_copy(update={"seed": 8}))
    assert np.array_equal(a.images[1].values, b.images[1].values)
    assert not np.array_equal(a.images[1].values, c.images[1].values)


def test_missing_ground_truth(tmp_path: Path) -> None:
    with pytest.raises(DataError):
        load_ground_truth(tmp_path)


def test_lesion_lies_inside_the_shape() -> None:
    shape, lesion = base_shapes(GridGeometry((32, 32), (1.0, 1.0)))
    assert set(np.unique(shape)) == {0.0, 1.0}
    assert lesion.sum() > 0
    assert np.all(shape[lesion > 0] == 1.0)


def test_dice_values() -> None:
    a = np.zeros((4, 4))
    b = np.zeros((4, 4))
    assert dice(a, b) == 1.0

    a[:2] = 1
    assert dice(a, a) == 1.0
    b[2:] = 1
    assert dice(a, b) == 0.0

    c = np.zeros((4, 4))
    c[1:3] = 1
    assert dice(a, c) == pytest.approx(0.5)


def test_dice_accepts_label_volumes() -> None:
    g = GridGeometry((4, 4), (1.0, 1.0))
    labels = np.zeros((4, 4), dtype=np.int64)
    labels[0, :] = 3
    assert dice(LabelVolume(g, labels), labels > 0) == 1.0


def test_threshold() -> None:
    g = GridGeometry((4, 4), (1.0, 1.0))
    values = np.linspace(0.0, 1.0, 16).reshape(4, 4)
    mask = threshold(ScalarVolume(g, values))
    assert mask.label_set() == {0, 1}
    assert np.array_equal(mask.labels, (values > 0.5).astype(np.int64))
