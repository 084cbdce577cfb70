"""EM checkpoints: ``checkpoint.json``, ``template.raw``/``.json`` and ``samples.npz``.

``samples.npz`` holds the float64 template (``template``) and, per subject
``k``, the last E-step coefficient samples (``subject_k``, shape ``(S, D)``).
The raw template is a float32 copy for viewing and downstream tools.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from paddit.core.errors import DataError
from paddit.core.logging import get_logger
from paddit.models.template import EmTraceEntry, TemplateModel
from paddit.models.volumes import GridGeometry, ScalarVolume
from paddit.schemas import KernelConfig
from worker.ingestion.volume_io import save_volume

logger = get_logger(__name__)

CHECKPOINT_FILE = "checkpoint.json"
TEMPLATE_FILE = "template.raw"
SAMPLES_FILE = "samples.npz"


class CheckpointRecord(BaseModel):
    iteration: int = Field(ge=0, description="EM iterations completed")
    sigma: float = Field(gt=0.0)
    kernel: KernelConfig
    intensity_range: tuple[float, float]
    dims: list[int]
    spacing: list[float]
    origin: list[float]
    subject_ids: list[str] = Field(default_factory=list)
    em_trace: list[EmTraceEntry] = Field(default_factory=list)


def checkpoint_dir(path: Path | str) -> Path:
    path = Path(path)
    return path.parent if path.name == CHECKPOINT_FILE else path


def save_checkpoint(model: TemplateModel, out_dir: Path | str) -> Path:
    """Write ``model`` into ``out_dir``, replacing any earlier checkpoint there."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    g = model.template.geometry
    record = CheckpointRecord(
        iteration=model.iterations_done,
        sigma=model.sigma,
        kernel=model.kernel,
        intensity_range=model.intensity_range,
        dims=list(g.dims),
        spacing=list(g.spacing),
        origin=list(g.origin),
        subject_ids=model.subject_ids,
        em_trace=model.em_trace,
    )
    arrays = {"template": model.template.values}
    for k, samples in enumerate(model.samples):
        arrays[f"subject_{k}"] = np.stack(samples)
    np.savez(out_dir / SAMPLES_FILE, **arrays)
    save_volume(model.template, out_dir / TEMPLATE_FILE)
    path = out_dir / CHECKPOINT_FILE
    path.write_text(record.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info(f"Checkpoint written to {out_dir} after iteration {record.iteration}")
    return path


def load_checkpoint(path: Path | str) -> TemplateModel:
    """Restore a model from a checkpoint directory or its ``checkpoint.json``."""
    directory = checkpoint_dir(path)
    try:
        record = CheckpointRecord.model_validate_json(
            (directory / CHECKPOINT_FILE).read_text(encoding="utf-8")
        )
    except FileNotFoundError as exc:
        raise DataError(f"no checkpoint found in {directory}") from exc
    except ValidationError as exc:
        raise DataError(f"{directory / CHECKPOINT_FILE}: invalid checkpoint: {exc}") from exc

    geometry = GridGeometry(tuple(record.dims), tuple(record.spacing), tuple(record.origin))
    try:
        with np.load(directory / SAMPLES_FILE) as arrays:
            template = ScalarVolume(geometry, arrays["template"])
            count = sum(1 for key in arrays.files if key.startswith("subject_"))
            samples = [list(arrays[f"subject_{k}"]) for k in range(count)]
    except (FileNotFoundError, KeyError, ValueError) as exc:
        raise DataError(f"{directory / SAMPLES_FILE}: unreadable checkpoint arrays: {exc}") from exc

    return TemplateModel(
        template=template,
        sigma=record.sigma,
        kernel=record.kernel,
        intensity_range=record.intensity_range,
        em_trace=record.em_trace,
        subject_ids=record.subject_ids,
        samples=samples,
    )
