"""End-to-end augmentation runs: PADDIT posterior warps and the B-spline baseline.

Output tree of a run::

    out/
      augmented/<subject>_aug<a>_<channel>.raw   (+ .json header)
      augmented/<subject>_aug<a>_label.raw
      augmented/<subject>_aug<a>.provenance.json
      originals/<subject>_<channel>.raw          (with include_originals)
      manifest.json                              (originals first, then augmented pairs)

Subjects are processed concurrently (bounded by ``jobs``) on worker threads.
Every subject draws from its own counter-based random streams, so the
contents do not depend on scheduling.
"""

from __future__ import annotations

import asyncio
import json
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel

from paddit.core.errors import DataError, NumericalError
from paddit.core.events import broadcast_event, make_event
from paddit.core.logging import get_logger
from paddit.models.template import TemplateModel
from paddit.models.volumes import DisplacementField, FloatArray
from paddit.registration.bspline import sample_bspline_field
from paddit.registration.flow import exponentiate, jacobian_determinant
from paddit.registration.hmc import chain_rng, run_chain
from paddit.registration.interpolation import warp_image, warp_labels
from paddit.registration.kernels import ControlGrid, KernelVelocityField
from paddit.registration.posterior import PosteriorTarget
from paddit.schemas import (
    AugmentationSpec,
    BsplineConfig,
    ChainDiagnostics,
    DatasetManifest,
    FlowConfig,
    HmcConfig,
    PairProvenance,
    RegistrationConfig,
    SubjectEntry,
)
from worker.ingestion.manifest import SubjectData, load_dataset, write_manifest
from worker.ingestion.volume_io import save_volume

logger = get_logger(__name__)

OutputFormat = Literal["raw", "nifti"]

# Stream keys for chain_rng's third component; EM iterations use 0, 1, 2, ...
AUGMENTATION_STREAM = 2**32
TIME_STREAM = 2**32 + 1

BASELINE_GRID_CP = (4, 8, 16)
BASELINE_GRID_SD = (2.0, 4.0, 6.0)


@dataclass
class AugmentationReport:
    out_dir: Path
    provenance: list[PairProvenance] = field(default_factory=list)
    originals: int = 0
    failed_subjects: list[str] = field(default_factory=list)

    @property
    def pairs_written(self) -> int:
        return len(self.provenance)

    @property
    def exit_code(self) -> int:
        return NumericalError.exit_code if self.failed_subjects else 0


class GridSummaryEntry(BaseModel):
    cp: int
    sd: float
    directory: str
    pairs: int
    min_jacobian: float
    mean_min_jacobian: float
    folded_pairs: int


@dataclass(frozen=True)
class OutputLayout:
    root: Path
    fmt: OutputFormat = "raw"

    @property
    def suffix(self) -> str:
        return ".raw" if self.fmt == "raw" else ".nii.gz"

    def augmented(self, subject_id: str, a: int, part: str) -> Path:
        return Path("augmented") / f"{subject_id}_aug{a:02d}_{part}{self.suffix}"

    def original(self, subject_id: str, part: str) -> Path:
        return Path("originals") / f"{subject_id}_{part}{self.suffix}"

    def provenance(self, subject_id: str, a: int) -> Path:
        return Path("augmented") / f"{subject_id}_aug{a:02d}.provenance.json"


def _min_jacobian(d: DisplacementField) -> float:
    return float(np.min(jacobian_determinant(d).values))


def _write_pair(
    layout: OutputLayout,
    subject: SubjectData,
    a: int,
    d: DisplacementField,
    record: dict,
) -> PairProvenance:
    """Warp every channel and the label with ``d`` and write them with their provenance."""
    outputs: dict[str, str] = {}
    for channel, image in subject.images.items():
        rel = layout.augmented(subject.subject_id, a, channel)
        save_volume(warp_image(image, d), layout.root / rel)
        outputs[channel] = rel.as_posix()
    checksum = d.checksum()
    label_checksum = None
    if subject.label is not None:
        rel = layout.augmented(subject.subject_id, a, "label")
        save_volume(warp_labels(subject.label, d), layout.root / rel)
        outputs["label"] = rel.as_posix()
        label_checksum = checksum

    provenance = PairProvenance(
        subject_id=subject.subject_id,
        augmentation_index=a,
        image_field_checksum=checksum,
        label_field_checksum=label_checksum,
        min_jacobian=_min_jacobian(d),
        outputs=outputs,
        **record,
    )
    path = layout.root / layout.provenance(subject.subject_id, a)
    path.write_text(provenance.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info(
        f"Wrote {subject.subject_id} augmentation {a} "
        f"(method={provenance.method}, min_jacobian={provenance.min_jacobian:.3f})"
    )
    return provenance


def _copy_originals(layout: OutputLayout, subjects: Sequence[SubjectData]) -> None:
    for subject in subjects:
        for channel, image in subject.images.items():
            save_volume(image, layout.root / layout.original(subject.subject_id, channel))
        if subject.label is not None:
            save_volume(subject.label, layout.root / layout.original(subject.subject_id, "label"))


def _output_manifest(
    layout: OutputLayout,
    subjects: Sequence[SubjectData],
    provenance: Sequence[PairProvenance],
    include_originals: bool,
) -> DatasetManifest:
    entries = []
    if include_originals:
        for subject in subjects:
            entries.append(
                SubjectEntry(
                    subject_id=subject.subject_id,
                    images={
                        c: layout.original(subject.subject_id, c) for c in subject.images
                    },
                    label=(
                        layout.original(subject.subject_id, "label")
                        if subject.label is not None
                        else None
                    ),
                )
            )
    for record in provenance:
        outputs = dict(record.outputs)
        label = outputs.pop("label", None)
        entries.append(
            SubjectEntry(
                subject_id=f"{record.subject_id}_aug{record.augmentation_index:02d}",
                images={c: Path(p) for c, p in outputs.items()},
                label=Path(label) if label is not None else None,
            )
        )
    return DatasetManifest(root=Path("."), subjects=entries)


async def _run_subjects(
    subjects: Sequence[SubjectData],
    spec: AugmentationSpec,
    layout: OutputLayout,
    augment_subject: Callable[[int, SubjectData], list[PairProvenance]],
    jobs: int,
) -> AugmentationReport:
    layout.root.mkdir(parents=True, exist_ok=True)
    report = AugmentationReport(out_dir=layout.root)
    if spec.include_originals:
        await asyncio.to_thread(_copy_originals, layout, subjects)
        report.originals = len(subjects)

    semaphore = asyncio.Semaphore(max(1, jobs))

    async def process_with_semaphore(k: int) -> list[PairProvenance] | None:
        subject = subjects[k]
        async with semaphore:
            await broadcast_event(
                make_event("subject_started", subject_id=subject.subject_id, method=spec.method)
            )
            try:
                records = await asyncio.to_thread(augment_subject, k, subject)
            except NumericalError as exc:
                logger.error(f"Skipping subject {subject.subject_id}: {exc}")
                await broadcast_event(
                    make_event("subject_failed", subject_id=subject.subject_id, error=str(exc))
                )
                return None
            for record in records:
                await broadcast_event(
                    make_event(
                        "pair_written",
                        subject_id=record.subject_id,
                        augmentation_index=record.augmentation_index,
                        method=record.method,
                        min_jacobian=record.min_jacobian,
                    )
                )
            return records

    results = await asyncio.gather(*[process_with_semaphore(k) for k in range(len(subjects))])
    for subject, records in zip(subjects, results):
        if records is None:
            report.failed_subjects.append(subject.subject_id)
        else:
            report.provenance.extend(records)

    manifest = _output_manifest(layout, subjects, report.provenance, spec.include_originals)
    await asyncio.to_thread(write_manifest, manifest, layout.root / "manifest.json")
    await broadcast_event(
        make_event(
            "run_completed",
            method=spec.method,
            pairs_written=report.pairs_written,
            originals=report.originals,
            failed_subjects=list(report.failed_subjects),
        )
    )
    logger.info(
        f"Augmentation done: {report.pairs_written} pairs, {report.originals} originals, "
        f"{len(report.failed_subjects)} subjects skipped"
    )
    return report


def _stored_samples(model: TemplateModel, subject_id: str, k: int) -> list[FloatArray]:
    if subject_id in model.subject_ids:
        k = model.subject_ids.index(subject_id)
    if k >= len(model.samples) or not model.samples[k]:
        raise DataError(f"template checkpoint holds no E-step samples for subject {subject_id}")
    return model.samples[k]


def _check_stored_samples(model: TemplateModel, grid: ControlGrid) -> None:
    """Stored samples must have one coefficient per control point and axis of ``grid``."""
    expected = grid.size * grid.ndim
    for k, samples in enumerate(model.samples):
        subject_id = model.subject_ids[k] if k < len(model.subject_ids) else f"#{k}"
        for q in samples:
            if np.size(q) != expected:
                raise DataError(
                    f"stored samples for subject {subject_id} have {np.size(q)} coefficients "
                    f"but the control grid needs {expected}; the kernel changed since estimation"
                )


@dataclass(frozen=True, eq=False)
class PadditSubjectAugmenter:
    """Draws ``A`` posterior velocity samples per subject and applies ``Exp(t v)``."""

    model: TemplateModel
    grid: ControlGrid
    rc: RegistrationConfig
    hmc: HmcConfig
    spec: AugmentationSpec
    channel: str
    layout: OutputLayout

    def draw(
        self, k: int, subject: SubjectData
    ) -> tuple[list[FloatArray], ChainDiagnostics | None]:
        A = self.spec.augmentations_per_subject
        if self.spec.reuse_samples:
            stored = _stored_samples(self.model, subject.subject_id, k)
            return [stored[a % len(stored)] for a in range(A)], None
        target = PosteriorTarget(
            subject.images[self.channel],
            self.model.template,
            self.grid,
            self.rc.model_copy(update={"sigma": self.model.sigma}),
        )
        cfg = self.hmc.model_copy(update={"samples": A, "seed": self.spec.seed})
        rng = chain_rng(self.spec.seed, k, AUGMENTATION_STREAM)
        result = run_chain(target, np.zeros(self.grid.size * self.grid.ndim), cfg, rng)
        return result.samples, result.diagnostics

    def __call__(self, k: int, subject: SubjectData) -> list[PairProvenance]:
        samples, diagnostics = self.draw(k, subject)
        time_rng = chain_rng(self.spec.seed, k, TIME_STREAM)
        records = []
        for a, q in enumerate(samples):
            drawn = float(time_rng.uniform())
            t = self.spec.fixed_time if self.spec.fixed_time is not None else drawn
            v = KernelVelocityField.from_flat(self.grid, q)
            d = exponentiate(v, subject.geometry, FlowConfig(steps=self.rc.flow.steps, time=t))
            record = {
                "method": "paddit",
                "seed": self.spec.seed,
                "time": t,
                "chain": diagnostics,
                "reused_sample": self.spec.reuse_samples,
            }
            records.append(_write_pair(self.layout, subject, a, d, record))
        return records


async def run_paddit(
    manifest: DatasetManifest,
    spec: AugmentationSpec,
    model: TemplateModel,
    rc: RegistrationConfig,
    hmc_cfg: HmcConfig,
    out_dir: Path,
    jobs: int = 1,
    channel: str | None = None,
    fmt: OutputFormat = "raw",
) -> AugmentationReport:
    """``A`` posterior-sampled warps per subject; image and label share each transformation."""
    subjects = await asyncio.to_thread(load_dataset, manifest)
    channel = channel or manifest.channels[0]
    if channel not in manifest.channels:
        raise DataError(f"channel {channel!r} not in manifest channels {manifest.channels}")
    geometry = subjects[0].geometry
    model.template.geometry.require_same(geometry, "template and dataset")
    grid = ControlGrid.regular(geometry, model.kernel)
    if spec.reuse_samples:
        _check_stored_samples(model, grid)
    layout = OutputLayout(Path(out_dir), fmt)
    augmenter = PadditSubjectAugmenter(
        model=model,
        grid=grid,
        rc=rc,
        hmc=hmc_cfg,
        spec=spec.model_copy(update={"method": "paddit"}),
        channel=channel,
        layout=layout,
    )
    logger.info(
        f"PADDIT augmentation: {len(subjects)} subjects x {spec.augmentations_per_subject}, "
        f"seed={spec.seed}, jobs={jobs}"
    )
    return await _run_subjects(subjects, augmenter.spec, layout, augmenter, jobs)


@dataclass(frozen=True, eq=False)
class BaselineSubjectAugmenter:
    cfg: BsplineConfig
    spec: AugmentationSpec
    layout: OutputLayout

    def __call__(self, k: int, subject: SubjectData) -> list[PairProvenance]:
        records = []
        for a in range(self.spec.augmentations_per_subject):
            d = sample_bspline_field(self.cfg, subject.geometry, chain_rng(self.spec.seed, k, a))
            record = {"method": "bspline", "seed": self.spec.seed, "bspline": self.cfg}
            records.append(_write_pair(self.layout, subject, a, d, record))
        return records


async def run_baseline(
    manifest: DatasetManifest,
    spec: AugmentationSpec,
    out_dir: Path,
    jobs: int = 1,
    fmt: OutputFormat = "raw",
) -> AugmentationReport:
    """Random B-spline warps in the same output layout as :func:`run_paddit`."""
    subjects = await asyncio.to_thread(load_dataset, manifest)
    cfg = (spec.bspline or BsplineConfig()).model_copy(update={"seed": spec.seed})
    layout = OutputLayout(Path(out_dir), fmt)
    augmenter = BaselineSubjectAugmenter(
        cfg=cfg,
        spec=spec.model_copy(update={"method": "bspline", "bspline": cfg}),
        layout=layout,
    )
    logger.info(
        f"B-spline augmentation: {len(subjects)} subjects x {spec.augmentations_per_subject}, "
        f"cp={cfg.cp}, sd={cfg.sd}, seed={spec.seed}"
    )
    return await _run_subjects(subjects, augmenter.spec, layout, augmenter, jobs)


async def run_baseline_grid(
    manifest: DatasetManifest,
    spec: AugmentationSpec,
    out_dir: Path,
    cps: Sequence[int] = BASELINE_GRID_CP,
    sds: Sequence[float] = BASELINE_GRID_SD,
    jobs: int = 1,
    fmt: OutputFormat = "raw",
) -> list[GridSummaryEntry]:
    """Run every (cp, sd) configuration into ``cp<cp>_sd<sd>/`` and summarize Jacobians."""
    out_dir = Path(out_dir)
    summary = []
    for cp in cps:
        for sd in sds:
            name = f"cp{cp}_sd{sd:g}"
            config_spec = spec.model_copy(
                update={"method": "bspline", "bspline": BsplineConfig(cp=cp, sd=sd, seed=spec.seed)}
            )
            report = await run_baseline(manifest, config_spec, out_dir / name, jobs, fmt)
            jacobians = [p.min_jacobian for p in report.provenance]
            summary.append(
                GridSummaryEntry(
                    cp=cp,
                    sd=sd,
                    directory=name,
                    pairs=report.pairs_written,
                    min_jacobian=min(jacobians),
                    mean_min_jacobian=float(np.mean(jacobians)),
                    folded_pairs=sum(1 for j in jacobians if j <= 0.0),
                )
            )
            logger.info(
                f"Grid {name}: min_jacobian={summary[-1].min_jacobian:.3f}, "
                f"folded={summary[-1].folded_pairs}/{report.pairs_written}"
            )
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "grid_summary.json").write_text(
        json.dumps([entry.model_dump() for entry in summary], indent=2) + "\n", encoding="utf-8"
    )
    return summary


def load_provenance(path: Path | str) -> PairProvenance:
    return PairProvenance.model_validate_json(Path(path).read_text(encoding="utf-8"))
