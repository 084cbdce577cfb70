"""Tests for Monte-Carlo EM template estimation."""

from pathlib import Path

import numpy as np
import pytest

from paddit.core.errors import GeometryMismatchError
from paddit.models.template import TemplateModel
from paddit.models.volumes import GridGeometry, ScalarVolume
from paddit.registration.kernels import ControlGrid, KernelVelocityField, sample_prior
from paddit.registration.template_em import (
    complete_data_negative_log_likelihood,
    e_step,
    estimate_template,
    initialize_template,
    m_step,
    warp_samples,
)
from paddit.schemas import (
    EmConfig,
    FlowConfig,
    HmcConfig,
    KernelConfig,
    PopulationConfig,
    RegistrationConfig,
)
from tests.conftest import blob_image
from worker.augmentation.synthetic import dice, simulate_population, threshold
from worker.ingestion.checkpoint import load_checkpoint, save_checkpoint


@pytest.fixture
def small_hmc() -> HmcConfig:
    return HmcConfig(burn_in=4, samples=2, thin=1, leapfrog_steps=3, min_acceptance=0.0, seed=5)


@pytest.fixture
def rc() -> RegistrationConfig:
    return RegistrationConfig(flow=FlowConfig(steps=4))


@pytest.fixture
def pair(geometry_2d: GridGeometry) -> list[ScalarVolume]:
    return [blob_image(geometry_2d), blob_image(geometry_2d, center_shift=1.0)]


def constant(geometry: GridGeometry, value: float) -> ScalarVolume:
    return ScalarVolume(geometry, np.full(geometry.dims, value))


def test_initialize_from_identical_images(blob: ScalarVolume) -> None:
    """Test that identical inputs give that image and the sigma floor."""
    model = initialize_template([blob, blob, blob])
    assert np.array_equal(model.template.values, blob.values)
    value_range = float(blob.values.max() - blob.values.min())
    assert model.sigma == pytest.approx(1e-4 * value_range)
    assert model.iterations_done == 0


def test_initialize_from_constants(geometry_2d: GridGeometry) -> None:
    """Test the voxelwise mean and pooled standard deviation."""
    model = initialize_template([constant(geometry_2d, 1.0), constant(geometry_2d, 3.0)])
    assert np.allclose(model.template.values, 2.0)
    assert model.sigma == pytest.approx(1.0)
    assert model.intensity_range == (1.0, 3.0)


def test_identical_constants_use_absolute_floor(geometry_2d: GridGeometry) -> None:
    model = initialize_template([constant(geometry_2d, 0.7)] * 2)
    assert model.sigma == pytest.approx(1e-4)


def test_initialize_needs_two_matching_images(blob: ScalarVolume) -> None:
    with pytest.raises(ValueError):
        initialize_template([blob])
    other = ScalarVolume(GridGeometry((16, 16), (2.0, 1.0)), blob.values)
    with pytest.raises(GeometryMismatchError):
        initialize_template([blob, other])


def test_m_step_with_zero_fields_is_plain_mean(
    pair: list[ScalarVolume], grid_3x3: ControlGrid, rc: RegistrationConfig
) -> None:
    """Test that unwarped inputs give their mean and pooled residual."""
    model = initialize_template(pair)
    zero = KernelVelocityField.zeros(grid_3x3)
    updated = m_step(pair, [[zero], [zero]], model, rc.flow)
    mean = (pair[0].values + pair[1].values) / 2
    assert np.allclose(updated.template.values, mean, atol=1e-12)
    expected = np.sqrt(np.mean((pair[0].values - mean) ** 2))
    assert updated.sigma == pytest.approx(expected, rel=1e-10)


def test_m_step_floors_sigma_for_identical_warps(
    blob: ScalarVolume, grid_3x3: ControlGrid, rc: RegistrationConfig
) -> None:
    model = initialize_template([blob, blob])
    zero = KernelVelocityField.zeros(grid_3x3)
    updated = m_step([blob, blob], [[zero], [zero]], model, rc.flow)
    assert updated.sigma == model.sigma_floor


def test_m_step_minimizes_complete_data_objective(
    pair: list[ScalarVolume], grid_3x3: ControlGrid, rc: RegistrationConfig
) -> None:
    """Test that no perturbation of template or sigma lowers the objective."""
    rng = np.random.default_rng(8)
    samples = [[sample_prior(grid_3x3, rng, 1.0) for _ in range(3)] for _ in pair]
    model = m_step(pair, samples, initialize_template(pair), rc.flow)
    warped = warp_samples(pair, samples, rc.flow)
    best = complete_data_negative_log_likelihood(warped, model.template, model.sigma)
    slack = 1e-8 * abs(best)
    for _ in range(100):
        delta = 0.01 * rng.standard_normal(model.template.geometry.dims)
        moved = model.template.with_values(model.template.values + delta)
        sigma = model.sigma * (1.0 + 0.05 * rng.standard_normal())
        assert complete_data_negative_log_likelihood(warped, moved, model.sigma) >= best - slack
        assert complete_data_negative_log_likelihood(warped, model.template, sigma) >= best - slack


def test_m_step_keeps_edge_overshoot(
    geometry_2d: GridGeometry, grid_3x3: ControlGrid, rc: RegistrationConfig
) -> None:
    """Test that the template is the unclipped warped mean at a sharp step edge."""
    values = np.zeros(geometry_2d.dims)
    values[:, 7:] = 1.0
    edge = ScalarVolume(geometry_2d, values)
    coeffs = np.tile([0.0, 0.1], (grid_3x3.size, 1))
    shift = KernelVelocityField(grid_3x3, coeffs)
    model = m_step([edge, edge], [[shift], [shift]], initialize_template([edge, edge]), rc.flow)

    warped = warp_samples([edge, edge], [[shift], [shift]], rc.flow)
    assert np.allclose(model.template.values, warped[0][0].values, atol=1e-15)
    assert model.intensity_range == (0.0, 1.0)
    assert model.template.values.max() > 1.0
    best = complete_data_negative_log_likelihood(warped, model.template, model.sigma)
    clipped = model.template.with_values(np.clip(model.template.values, 0.0, 1.0))
    assert complete_data_negative_log_likelihood(warped, clipped, model.sigma) > best


def test_e_step_counts_and_threading(
    pair: list[ScalarVolume],
    kernel_3x3: KernelConfig,
    small_hmc: HmcConfig,
    rc: RegistrationConfig,
) -> None:
    """Test N x S samples and identical results for one or two worker threads."""
    model = initialize_template(pair, kernel_3x3)
    cfg = EmConfig(iterations=1, hmc=small_hmc)
    serial = e_step(pair, model, cfg, rc, jobs=1)
    threaded = e_step(pair, model, cfg, rc, jobs=2)
    assert sum(len(s.fields) for s in serial) == 2 * small_hmc.samples
    for a, b in zip(serial, threaded):
        for va, vb in zip(a.fields, b.fields):
            assert np.array_equal(va.coeffs, vb.coeffs)


def test_e_step_on_identical_images_stays_near_zero(
    blob: ScalarVolume, grid_3x3: ControlGrid, kernel_3x3: KernelConfig, rc: RegistrationConfig
) -> None:
    """Test that registering a template to itself gives samples well inside the prior scale."""
    images = [blob, blob]
    model = initialize_template(images, kernel_3x3).updated(sigma=0.05)
    cfg = EmConfig(iterations=1, hmc=HmcConfig(samples=5, seed=2))
    subjects = e_step(images, model, cfg, rc)
    coeffs = np.stack([v.coeffs for subject in subjects for v in subject.fields])
    assert coeffs.shape[0] == 10
    assert np.all(np.isfinite(coeffs))
    prior_scale = float(np.sqrt(np.mean(np.diag(grid_3x3.gram.inverse()))))
    assert np.mean(np.abs(coeffs)) < 0.5 * prior_scale


def test_identical_constant_images_keep_template(
    geometry_2d: GridGeometry,
    kernel_3x3: KernelConfig,
    small_hmc: HmcConfig,
    rc: RegistrationConfig,
) -> None:
    """Test that EM on identical flat images returns that image."""
    images = [constant(geometry_2d, 0.4)] * 3
    model = estimate_template(images, kernel_3x3, EmConfig(iterations=2, hmc=small_hmc), rc)
    assert np.allclose(model.template.values, 0.4, atol=1e-6)
    assert len(model.em_trace) == 2


def test_estimate_template_records_trace(
    pair: list[ScalarVolume],
    kernel_3x3: KernelConfig,
    small_hmc: HmcConfig,
    rc: RegistrationConfig,
) -> None:
    calls: list[int] = []

    def on_iteration(model: TemplateModel, iteration: int) -> None:
        calls.append(iteration)

    model = estimate_template(
        pair,
        kernel_3x3,
        EmConfig(iterations=3, hmc=small_hmc),
        rc,
        on_iteration=on_iteration,
        subject_ids=["a", "b"],
    )
    assert calls == [0, 1, 2]
    assert [entry.iteration for entry in model.em_trace] == [0, 1, 2]
    assert all(len(entry.acceptance_rates) == 2 for entry in model.em_trace)
    assert model.subject_ids == ["a", "b"]
    assert len(model.samples) == 2
    assert all(len(s) == small_hmc.samples for s in model.samples)


def test_resume_from_checkpoint_is_bit_identical(
    tmp_path: Path,
    pair: list[ScalarVolume],
    kernel_3x3: KernelConfig,
    small_hmc: HmcConfig,
    rc: RegistrationConfig,
) -> None:
    """Test that stopping after one iteration and resuming matches an uninterrupted run."""
    full = estimate_template(pair, kernel_3x3, EmConfig(iterations=2, hmc=small_hmc), rc)

    partial = estimate_template(pair, kernel_3x3, EmConfig(iterations=1, hmc=small_hmc), rc)
    save_checkpoint(partial, tmp_path / "ckpt")
    restored = load_checkpoint(tmp_path / "ckpt" / "checkpoint.json")
    assert restored.iterations_done == 1
    resumed = estimate_template(
        pair, kernel_3x3, EmConfig(iterations=2, hmc=small_hmc), rc, resume_from=restored
    )

    assert np.array_equal(resumed.template.values, full.template.values)
    assert resumed.sigma == full.sigma
    assert [e.neg_log_posterior for e in resumed.em_trace] == [
        e.neg_log_posterior for e in full.em_trace
    ]


@pytest.mark.slow
def test_template_recovers_population_mean_shape() -> None:
    """Test template recovery on a ten-subject synthetic population."""
    simulate_cfg = PopulationConfig(n_subjects=10, dims=(32, 32), seed=3)
    population = simulate_population(simulate_cfg)
    hmc = HmcConfig(burn_in=30, samples=5, thin=1, leapfrog_steps=10, min_acceptance=0.0, seed=1)
    model = estimate_template(
        population.images,
        KernelConfig(control_spacing=simulate_cfg.control_spacing),
        EmConfig(iterations=5, hmc=hmc),
        RegistrationConfig(flow=FlowConfig(steps=simulate_cfg.flow_steps)),
    )
    truth = population.truth
    assert dice(threshold(model.template), truth.mean_shape) >= 0.9

    template_mse = float(np.mean((model.template.values - truth.base.values) ** 2))
    subject_mse = [float(np.mean((im.values - truth.base.values) ** 2)) for im in population.images]
    assert template_mse < float(np.median(subject_mse))
