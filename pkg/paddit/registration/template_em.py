"""Monte-Carlo EM estimation of the template ``I_T`` and noise level ``sigma``.

E-step: for every observation an HMC chain samples velocity fields from the
posterior given the current template. M-step: the template becomes the mean
of all warped observations and ``sigma^2`` their mean squared residual. Only
images take part; labels enter at augmentation time.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from paddit.core.errors import DegenerateChainError
from paddit.core.logging import get_logger
from paddit.models.template import EmTraceEntry, TemplateModel, sigma_floor_for
from paddit.models.volumes import FloatArray, GridGeometry, ScalarVolume
from paddit.registration.flow import exponentiate
from paddit.registration.hmc import chain_rng, run_chain
from paddit.registration.interpolation import warp_image
from paddit.registration.kernels import ControlGrid, KernelVelocityField
from paddit.registration.posterior import LOG_2PI, PosteriorTarget, log_prior
from paddit.schemas import ChainDiagnostics, EmConfig, FlowConfig, KernelConfig, RegistrationConfig

logger = get_logger(__name__)

IterationCallback = Callable[[TemplateModel, int], None]


@dataclass(frozen=True, eq=False)
class SubjectSamples:
    """E-step output for one observation."""

    fields: list[KernelVelocityField]
    diagnostics: ChainDiagnostics
    last_state: FloatArray


def _common_geometry(images: Sequence[ScalarVolume]) -> GridGeometry:
    if len(images) < 2:
        raise ValueError(f"template estimation needs at least 2 images, got {len(images)}")
    geometry = images[0].geometry
    for image in images[1:]:
        geometry.require_same(image.geometry, "template inputs")
    return geometry


def initialize_template(
    images: Sequence[ScalarVolume], kernel: KernelConfig | None = None
) -> TemplateModel:
    """Voxelwise mean template; ``sigma^2`` is the voxel-averaged variance across inputs."""
    geometry = _common_geometry(images)
    stack = np.stack([image.values for image in images])
    mean = stack.mean(axis=0)
    variance = float(np.mean((stack - mean) ** 2))
    low, high = float(stack.min()), float(stack.max())
    sigma = max(math.sqrt(variance), sigma_floor_for(high - low))
    return TemplateModel(
        template=ScalarVolume(geometry, mean),
        sigma=sigma,
        kernel=kernel or KernelConfig(),
        intensity_range=(low, high),
    )


def _run_subject_chain(
    k: int,
    image: ScalarVolume,
    model: TemplateModel,
    grid: ControlGrid,
    cfg: EmConfig,
    rc: RegistrationConfig,
    iteration: int,
    init: FloatArray,
) -> SubjectSamples:
    rc = rc.model_copy(update={"sigma": model.sigma})
    target = PosteriorTarget(image, model.template, grid, rc)
    rng = chain_rng(cfg.hmc.seed, k, iteration)
    try:
        result = run_chain(target, init, cfg.hmc, rng)
    except DegenerateChainError as exc:
        raise exc.with_subject(k) from exc
    fields = [KernelVelocityField.from_flat(grid, q) for q in result.samples]
    return SubjectSamples(fields, result.diagnostics, result.final_state.q)


def e_step(
    images: Sequence[ScalarVolume],
    model: TemplateModel,
    cfg: EmConfig,
    rc: RegistrationConfig | None = None,
    iteration: int = 0,
    warm_states: Sequence[FloatArray] | None = None,
    jobs: int = 1,
) -> list[SubjectSamples]:
    """``S`` posterior velocity samples per image given the current template and sigma.

    Chains are independent and seeded per (seed, subject, iteration), so the
    result does not depend on ``jobs``.
    """
    rc = rc or RegistrationConfig()
    geometry = _common_geometry(images)
    geometry.require_same(model.template.geometry, "images and template")
    grid = ControlGrid.regular(geometry, model.kernel)
    zero = np.zeros(grid.size * grid.ndim)
    inits = [
        warm_states[k] if warm_states is not None and cfg.warm_start else zero
        for k in range(len(images))
    ]

    def run(k: int) -> SubjectSamples:
        return _run_subject_chain(k, images[k], model, grid, cfg, rc, iteration, inits[k])

    if jobs <= 1:
        return [run(k) for k in range(len(images))]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run, range(len(images))))


def warp_samples(
    images: Sequence[ScalarVolume],
    samples: Sequence[Sequence[KernelVelocityField]],
    flow: FlowConfig | None = None,
) -> list[list[ScalarVolume]]:
    """``I_k o Exp(v_ks)`` for every image and sample."""
    if len(samples) != len(images):
        raise ValueError("need one sample list per image")
    warped = []
    for image, fields in zip(images, samples):
        if not fields:
            raise ValueError("every image needs at least one velocity sample")
        warped.append([warp_image(image, exponentiate(v, image.geometry, flow)) for v in fields])
    return warped


def complete_data_negative_log_likelihood(
    warped: Sequence[Sequence[ScalarVolume]], template: ScalarVolume, sigma: float
) -> float:
    """``sum_k sum_s -log p(I_k | v_ks, I_T, sigma)`` over pre-warped observations."""
    voxels = template.geometry.voxel_count
    total = 0.0
    for subject in warped:
        for w in subject:
            sq = float(np.sum((template.values - w.values) ** 2))
            total += voxels * math.log(sigma) + 0.5 * voxels * LOG_2PI + sq / (2.0 * sigma**2)
    return total


def m_step(
    images: Sequence[ScalarVolume],
    samples: Sequence[Sequence[KernelVelocityField]],
    model: TemplateModel,
    flow: FlowConfig | None = None,
) -> TemplateModel:
    """Closed-form template and sigma given fixed samples.

    The template is the mean of all warped observations and ``sigma^2`` the mean
    squared residual to it, floored. Cubic overshoot at sharp edges can carry
    the template slightly outside the input intensity range.
    """
    warped = warp_samples(images, samples, flow)
    flat = [w.values for subject in warped for w in subject]
    mean = np.sum(flat, axis=0) / len(flat)
    template = ScalarVolume(model.template.geometry, mean)
    sq = sum(float(np.sum((template.values - w) ** 2)) for w in flat)
    sigma2 = sq / (len(flat) * template.geometry.voxel_count)
    sigma = max(math.sqrt(sigma2), model.sigma_floor)
    return model.updated(template=template, sigma=sigma)


def _neg_log_posterior(
    images: Sequence[ScalarVolume],
    samples: Sequence[Sequence[KernelVelocityField]],
    model: TemplateModel,
    flow: FlowConfig,
) -> float:
    warped = warp_samples(images, samples, flow)
    nll = complete_data_negative_log_likelihood(warped, model.template, model.sigma)
    return nll - sum(log_prior(v) for fields in samples for v in fields)


def estimate_template(
    images: Sequence[ScalarVolume],
    kernel_cfg: KernelConfig,
    em_cfg: EmConfig,
    rc: RegistrationConfig | None = None,
    jobs: int = 1,
    on_iteration: IterationCallback | None = None,
    resume_from: TemplateModel | None = None,
    subject_ids: Sequence[str] | None = None,
) -> TemplateModel:
    """Alternate E and M steps ``em_cfg.iterations`` times from the mean template."""
    rc = rc or RegistrationConfig()
    if resume_from is not None:
        model = resume_from
        logger.info(f"Resuming template estimation after iteration {model.iterations_done}")
    else:
        model = initialize_template(images, kernel_cfg)
    if subject_ids is not None:
        model = model.updated(subject_ids=list(subject_ids))
    logger.info(
        f"Estimating template from {len(images)} images: "
        f"iterations={em_cfg.iterations}, S={em_cfg.hmc.samples}, sigma0={model.sigma:.4g}"
    )

    warm = [np.asarray(s[-1]) for s in model.samples] if model.samples else None
    for iteration in range(model.iterations_done, em_cfg.iterations):
        drawn = e_step(images, model, em_cfg, rc, iteration, warm, jobs)
        samples = [subject.fields for subject in drawn]
        model = m_step(images, samples, model, rc.flow)
        objective = _neg_log_posterior(images, samples, model, rc.flow)
        entry = EmTraceEntry(
            iteration=iteration,
            neg_log_posterior=objective,
            sigma=model.sigma,
            acceptance_rates=[subject.diagnostics.acceptance_rate for subject in drawn],
        )
        warm = [subject.last_state for subject in drawn]
        model = model.updated(
            em_trace=[*model.em_trace, entry],
            samples=[[v.flat() for v in fields] for fields in samples],
        )
        logger.info(
            f"EM iteration {iteration + 1}/{em_cfg.iterations}: "
            f"objective={objective:.6g}, sigma={model.sigma:.4g}"
        )
        if on_iteration is not None:
            on_iteration(model, iteration)
    return model
