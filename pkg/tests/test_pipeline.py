"""Tests for the augmentation pipelines."""

import json
from pathlib import Path

import pytest

from paddit.core.errors import DataError
from paddit.core.events import drain, subscribe, unsubscribe
from paddit.models.template import TemplateModel
from paddit.registration.template_em import estimate_template, initialize_template
from paddit.schemas import (
    AugmentationSpec,
    BsplineConfig,
    DatasetManifest,
    EmConfig,
    FlowConfig,
    HmcConfig,
    KernelConfig,
    RegistrationConfig,
)
from worker.augmentation.pipeline import (
    BASELINE_GRID_CP,
    BASELINE_GRID_SD,
    load_provenance,
    run_baseline,
    run_baseline_grid,
    run_paddit,
)
from worker.augmentation.synthetic import SyntheticPopulation
from worker.ingestion.manifest import load_manifest


@pytest.fixture
def manifest(manifest_path: Path) -> DatasetManifest:
    return load_manifest(manifest_path)


@pytest.fixture
def rc() -> RegistrationConfig:
    return RegistrationConfig(flow=FlowConfig(steps=4))


@pytest.fixture
def quick_hmc() -> HmcConfig:
    return HmcConfig(burn_in=5, samples=1, thin=1, leapfrog_steps=3, min_acceptance=0.0)


@pytest.fixture
def template(synthetic_dataset: SyntheticPopulation, kernel_3x3: KernelConfig) -> TemplateModel:
    return initialize_template(synthetic_dataset.images, kernel_3x3)


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in root.rglob("*") if p.is_file()}


@pytest.mark.asyncio
async def test_baseline_writes_pairs_and_manifest(
    tmp_path: Path, manifest: DatasetManifest
) -> None:
    """Test A pairs per subject plus the originals-first output manifest."""
    spec = AugmentationSpec(
        method="bspline",
        augmentations_per_subject=2,
        bspline=BsplineConfig(cp=4, sd=1.0),
        include_originals=True,
        seed=3,
    )
    report = await run_baseline(manifest, spec, tmp_path / "out")
    assert report.pairs_written == 6
    assert report.originals == 3
    assert report.exit_code == 0

    out = load_manifest(tmp_path / "out" / "manifest.json")
    ids = [s.subject_id for s in out.subjects]
    assert ids[:3] == ["subject_000", "subject_001", "subject_002"]
    assert ids[3:5] == ["subject_000_aug00", "subject_000_aug01"]
    assert len(ids) == 9

    record = load_provenance(tmp_path / "out" / "augmented" / "subject_001_aug01.provenance.json")
    assert record.method == "bspline"
    assert record.bspline == BsplineConfig(cp=4, sd=1.0, seed=3)
    assert record.image_field_checksum == record.label_field_checksum
    assert set(record.outputs) == {"image", "label"}


@pytest.mark.asyncio
async def test_zero_sd_baseline_copies_inputs(tmp_path: Path, manifest: DatasetManifest) -> None:
    """Test that the identity deformation reproduces every input file byte for byte."""
    spec = AugmentationSpec(
        method="bspline", augmentations_per_subject=1, bspline=BsplineConfig(cp=4, sd=0.0)
    )
    await run_baseline(manifest, spec, tmp_path / "out")
    data = manifest.root
    for sid in ["subject_000", "subject_001", "subject_002"]:
        aug = tmp_path / "out" / "augmented"
        assert (aug / f"{sid}_aug00_image.raw").read_bytes() == (
            data / "images" / f"{sid}_image.raw"
        ).read_bytes()
        assert (aug / f"{sid}_aug00_label.raw").read_bytes() == (
            data / "labels" / f"{sid}_label.raw"
        ).read_bytes()
        assert (aug / f"{sid}_aug00_image.json").read_bytes() == (
            data / "images" / f"{sid}_image.json"
        ).read_bytes()


@pytest.mark.asyncio
async def test_output_independent_of_jobs(tmp_path: Path, manifest: DatasetManifest) -> None:
    spec = AugmentationSpec(
        method="bspline", augmentations_per_subject=2, bspline=BsplineConfig(cp=5, sd=2.0), seed=9
    )
    await run_baseline(manifest, spec, tmp_path / "serial", jobs=1)
    await run_baseline(manifest, spec, tmp_path / "parallel", jobs=3)
    assert tree_bytes(tmp_path / "serial") == tree_bytes(tmp_path / "parallel")


@pytest.mark.asyncio
async def test_nifti_output_format(tmp_path: Path, manifest: DatasetManifest) -> None:
    spec = AugmentationSpec(method="bspline", augmentations_per_subject=1)
    await run_baseline(manifest, spec, tmp_path / "out", fmt="nifti")
    assert (tmp_path / "out" / "augmented" / "subject_002_aug00_image.nii.gz").exists()
    assert load_manifest(tmp_path / "out" / "manifest.json").subjects[0].images["image"].name == (
        "subject_000_aug00_image.nii.gz"
    )


@pytest.mark.asyncio
async def test_paddit_identity_time_copies_inputs(
    tmp_path: Path,
    manifest: DatasetManifest,
    template: TemplateModel,
    rc: RegistrationConfig,
    quick_hmc: HmcConfig,
) -> None:
    """Test that t = 0 gives byte-identical images and labels."""
    spec = AugmentationSpec(augmentations_per_subject=2, fixed_time=0.0, seed=1)
    report = await run_paddit(manifest, spec, template, rc, quick_hmc, tmp_path / "out")
    assert report.pairs_written == 6
    for record in report.provenance:
        assert record.time == 0.0
        assert record.min_jacobian == 1.0
    aug = tmp_path / "out" / "augmented"
    assert (aug / "subject_001_aug01_image.raw").read_bytes() == (
        manifest.root / "images" / "subject_001_image.raw"
    ).read_bytes()
    assert (aug / "subject_001_aug01_label.raw").read_bytes() == (
        manifest.root / "labels" / "subject_001_label.raw"
    ).read_bytes()


@pytest.mark.asyncio
async def test_paddit_run_is_diffeomorphic_and_reproducible(
    tmp_path: Path,
    manifest: DatasetManifest,
    template: TemplateModel,
    rc: RegistrationConfig,
    quick_hmc: HmcConfig,
) -> None:
    spec = AugmentationSpec(augmentations_per_subject=2, seed=4)
    first = await run_paddit(manifest, spec, template, rc, quick_hmc, tmp_path / "a", jobs=2)
    await run_paddit(manifest, spec, template, rc, quick_hmc, tmp_path / "b", jobs=1)
    assert first.exit_code == 0
    assert all(record.min_jacobian > 0.0 for record in first.provenance)
    assert all(0.0 <= record.time <= 1.0 for record in first.provenance)
    assert all(record.chain is not None for record in first.provenance)
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


@pytest.mark.asyncio
async def test_degenerate_chain_skips_subjects(
    tmp_path: Path,
    manifest: DatasetManifest,
    template: TemplateModel,
    rc: RegistrationConfig,
) -> None:
    """Test that failing chains are reported per subject and yield exit code 3."""
    hmc = HmcConfig(
        step_size=5.0, adapt_step_size=False, burn_in=0, samples=1, thin=1, min_acceptance=0.99
    )
    queue = await subscribe()
    try:
        report = await run_paddit(
            manifest, AugmentationSpec(augmentations_per_subject=1), template, rc, hmc, tmp_path
        )
        events = drain(queue)
    finally:
        unsubscribe(queue)
    assert report.exit_code == 3
    assert report.failed_subjects == ["subject_000", "subject_001", "subject_002"]
    assert report.pairs_written == 0
    assert sum(1 for e in events if e["type"] == "subject_failed") == 3
    assert events[-1]["type"] == "run_completed"


@pytest.mark.asyncio
async def test_reused_samples(
    tmp_path: Path,
    manifest: DatasetManifest,
    synthetic_dataset: SyntheticPopulation,
    kernel_3x3: KernelConfig,
    template: TemplateModel,
    rc: RegistrationConfig,
    quick_hmc: HmcConfig,
) -> None:
    """Test augmentation from stored E-step samples and the errors when they are unusable."""
    spec = AugmentationSpec(augmentations_per_subject=3, reuse_samples=True)
    with pytest.raises(DataError):
        await run_paddit(manifest, spec, template, rc, quick_hmc, tmp_path / "none")

    fitted = estimate_template(
        synthetic_dataset.images,
        kernel_3x3,
        EmConfig(iterations=1, hmc=quick_hmc.model_copy(update={"samples": 2})),
        rc,
        subject_ids=[s.subject_id for s in manifest.subjects],
    )
    report = await run_paddit(manifest, spec, fitted, rc, quick_hmc, tmp_path / "reused")
    assert report.pairs_written == 9
    assert all(r.reused_sample and r.chain is None for r in report.provenance)

    respaced = fitted.updated(kernel=KernelConfig(control_spacing=5))
    with pytest.raises(DataError, match="coefficients"):
        await run_paddit(manifest, spec, respaced, rc, quick_hmc, tmp_path / "respaced")
    assert not (tmp_path / "respaced").exists()


@pytest.mark.asyncio
async def test_unknown_channel_rejected(
    tmp_path: Path,
    manifest: DatasetManifest,
    template: TemplateModel,
    rc: RegistrationConfig,
    quick_hmc: HmcConfig,
) -> None:
    with pytest.raises(DataError):
        await run_paddit(
            manifest, AugmentationSpec(), template, rc, quick_hmc, tmp_path, channel="flair"
        )


@pytest.mark.asyncio
async def test_progress_events(tmp_path: Path, manifest: DatasetManifest) -> None:
    queue = await subscribe()
    try:
        spec = AugmentationSpec(method="bspline", augmentations_per_subject=2)
        await run_baseline(manifest, spec, tmp_path / "out", jobs=2)
        events = drain(queue)
    finally:
        unsubscribe(queue)
    types = [e["type"] for e in events]
    assert types.count("subject_started") == 3
    assert types.count("pair_written") == 6
    assert types[-1] == "run_completed"
    assert events[-1]["pairs_written"] == 6


@pytest.mark.asyncio
async def test_baseline_grid_summary(tmp_path: Path, manifest: DatasetManifest) -> None:
    """Test the full Cp x Sd sweep and its summary file."""
    spec = AugmentationSpec(method="bspline", augmentations_per_subject=1, seed=2)
    summary = await run_baseline_grid(manifest, spec, tmp_path / "grid")
    assert len(summary) == len(BASELINE_GRID_CP) * len(BASELINE_GRID_SD) == 9
    assert {(e.cp, e.sd) for e in summary} == {
        (cp, sd) for cp in BASELINE_GRID_CP for sd in BASELINE_GRID_SD
    }
    for entry in summary:
        assert entry.pairs == 3
        assert entry.min_jacobian <= entry.mean_min_jacobian
        assert (tmp_path / "grid" / entry.directory / "manifest.json").exists()
    written = json.loads((tmp_path / "grid" / "grid_summary.json").read_text())
    assert [row["directory"] for row in written][0] == "cp4_sd2"
