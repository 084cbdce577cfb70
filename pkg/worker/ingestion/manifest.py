"""Dataset manifests and loading their subjects into memory."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from pydantic import ValidationError

from paddit.core.errors import GeometryMismatchError, ManifestError
from paddit.core.logging import get_logger
from paddit.models.volumes import GridGeometry, LabelVolume, ScalarVolume
from paddit.schemas import DatasetManifest
from worker.ingestion.volume_io import load_volume

logger = get_logger(__name__)


@dataclass(frozen=True, eq=False)
class SubjectData:
    subject_id: str
    images: dict[str, ScalarVolume]
    label: LabelVolume | None

    @property
    def geometry(self) -> GridGeometry:
        return next(iter(self.images.values())).geometry


def load_manifest(path: Path | str) -> DatasetManifest:
    """Parse a manifest JSON file and check that every referenced file exists.

    A relative ``root`` (or a missing one) is taken relative to the manifest's
    own directory.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        manifest = DatasetManifest.model_validate(raw)
    except FileNotFoundError as exc:
        raise ManifestError(f"manifest not found: {path}") from exc
    except (json.JSONDecodeError, ValidationError) as exc:
        raise ManifestError(f"{path}: invalid manifest: {exc}") from exc

    root = manifest.root if manifest.root.is_absolute() else path.parent / manifest.root
    manifest = manifest.model_copy(update={"root": root})
    if not manifest.subjects:
        raise ManifestError(f"{path}: manifest lists no subjects")

    channels = set(manifest.channels)
    missing = []
    for subject in manifest.subjects:
        if set(subject.images) != channels:
            raise ManifestError(
                f"subject {subject.subject_id} has channels {sorted(subject.images)}, "
                f"expected {sorted(channels)}"
            )
        files = list(subject.images.values()) + ([subject.label] if subject.label else [])
        missing.extend(str(manifest.resolve(f)) for f in files if not manifest.resolve(f).exists())
    if missing:
        raise ManifestError(f"{path}: missing files: {', '.join(missing)}")

    logger.info(
        f"Loaded manifest {path}: {len(manifest.subjects)} subjects, channels={sorted(channels)}"
    )
    return manifest


def load_subject(manifest: DatasetManifest, index: int) -> SubjectData:
    entry = manifest.subjects[index]
    images = {}
    for channel, rel in entry.images.items():
        volume = load_volume(manifest.resolve(rel), kind="image")
        assert isinstance(volume, ScalarVolume)
        images[channel] = volume
    label = None
    if entry.label is not None:
        loaded = load_volume(manifest.resolve(entry.label), kind="label")
        assert isinstance(loaded, LabelVolume)
        label = loaded

    geometry = next(iter(images.values())).geometry
    for channel, volume in images.items():
        geometry.require_same(volume.geometry, f"subject {entry.subject_id} channel {channel}")
    if label is not None:
        geometry.require_same(label.geometry, f"subject {entry.subject_id} label")
    return SubjectData(entry.subject_id, images, label)


def load_dataset(manifest: DatasetManifest) -> list[SubjectData]:
    """Load every subject; all subjects must share one grid geometry."""
    subjects = [load_subject(manifest, i) for i in range(len(manifest.subjects))]
    reference = subjects[0].geometry
    for subject in subjects[1:]:
        if subject.geometry != reference:
            raise GeometryMismatchError(
                f"subject {subject.subject_id} has geometry {subject.geometry}, "
                f"expected {reference}"
            )
    return subjects


def write_manifest(manifest: DatasetManifest, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path
