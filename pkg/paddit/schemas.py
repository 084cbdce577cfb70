"""Pydantic schemas for run configuration, manifests and provenance records."""

from __future__ import annotations

from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

U64_MAX = 2**64 - 1


class KernelConfig(BaseModel):
    """Wendland kernel parameterization of the velocity field."""

    control_spacing: int | tuple[int, ...] = Field(default=8)
    support_radius: float | None = Field(default=None, gt=0)
    order: Literal["wendland_c2"] = "wendland_c2"

    @field_validator("control_spacing")
    @classmethod
    def _spacing_at_least_one_voxel(cls, value: int | tuple[int, ...]) -> int | tuple[int, ...]:
        values = (value,) if isinstance(value, int) else value
        if not values or any(v < 1 for v in values):
            raise ValueError("control spacing must be at least one voxel on every axis")
        return value

    def spacing_for(self, ndim: int) -> tuple[int, ...]:
        if isinstance(self.control_spacing, int):
            return (self.control_spacing,) * ndim
        if len(self.control_spacing) != ndim:
            raise ValueError(
                f"control spacing has {len(self.control_spacing)} axes, grid has {ndim}"
            )
        return tuple(self.control_spacing)

    def radius_for(self, voxel_spacing: tuple[float, ...]) -> float:
        """Support radius in mm; defaults to twice the physical control spacing."""
        if self.support_radius is not None:
            return self.support_radius
        steps = self.spacing_for(len(voxel_spacing))
        return 2.0 * max(s * h for s, h in zip(steps, voxel_spacing))


class FlowConfig(BaseModel):
    """Euler integration of a stationary velocity field."""

    steps: int = Field(default=8, ge=1)
    time: float = Field(default=1.0, ge=0.0, le=1.0)


class RegistrationConfig(BaseModel):
    """Weights of the registration energy and the image noise model."""

    model_config = ConfigDict(populate_by_name=True)

    lambda_: float = Field(default=1.0, ge=0.0, alias="lambda")
    sigma: float = Field(default=1.0, gt=0.0)
    flow: FlowConfig = Field(default_factory=FlowConfig)


class HmcConfig(BaseModel):
    step_size: float = Field(default=0.01, gt=0.0)
    leapfrog_steps: int = Field(default=20, ge=1)
    burn_in: int = Field(default=50, ge=0)
    samples: int = Field(default=10, ge=1)
    thin: int = Field(default=2, ge=1)
    seed: int = Field(default=0, ge=0, le=U64_MAX)
    adapt_step_size: bool = True
    step_jitter: float = Field(default=0.1, ge=0.0, lt=1.0)
    target_acceptance: float = Field(default=0.65, gt=0.0, lt=1.0)
    min_acceptance: float = Field(default=0.05, ge=0.0, lt=1.0)


class ChainDiagnostics(BaseModel):
    acceptance_rate: float = Field(ge=0.0, le=1.0)
    mean_energy_error: float
    tuned_step_size: float
    divergent_steps: int = 0


class EmConfig(BaseModel):
    iterations: int = Field(default=10, ge=1)
    hmc: HmcConfig = Field(default_factory=HmcConfig)
    warm_start: bool = True


class BsplineConfig(BaseModel):
    """Random free-form deformation baseline: Cp control points per axis, Sd voxels."""

    cp: int | tuple[int, ...] = Field(default=8)
    sd: float = Field(default=4.0, ge=0.0)
    seed: int = Field(default=0, ge=0, le=U64_MAX)

    @field_validator("cp")
    @classmethod
    def _cubic_support(cls, value: int | tuple[int, ...]) -> int | tuple[int, ...]:
        values = (value,) if isinstance(value, int) else value
        if not values or any(v < 4 for v in values):
            raise ValueError("a cubic B-spline lattice needs at least 4 control points per axis")
        return value

    def cp_for(self, ndim: int) -> tuple[int, ...]:
        if isinstance(self.cp, int):
            return (self.cp,) * ndim
        if len(self.cp) != ndim:
            raise ValueError(f"cp has {len(self.cp)} axes, grid has {ndim}")
        return tuple(self.cp)


class PopulationConfig(BaseModel):
    """Synthetic 2D blob population used for desk-scale verification."""

    n_subjects: int = Field(default=10, ge=1)
    dims: tuple[int, int] = (32, 32)
    spacing: float = Field(default=1.0, gt=0.0)
    noise_std: float = Field(default=0.05, ge=0.0)
    deformation_scale: float = Field(default=1.0, ge=0.0)
    control_spacing: int = Field(default=8, ge=1)
    lesion_intensity: float = 2.0
    seed: int = Field(default=0, ge=0, le=U64_MAX)
    flow_steps: int = Field(default=8, ge=1)

    @field_validator("dims")
    @classmethod
    def _stencil_fits(cls, value: tuple[int, int]) -> tuple[int, int]:
        if any(d < 4 for d in value):
            raise ValueError("every axis needs at least 4 voxels")
        return value


class SubjectEntry(BaseModel):
    subject_id: str = Field(min_length=1)
    images: dict[str, Path]
    label: Path | None = None

    @field_validator("images")
    @classmethod
    def _at_least_one_channel(cls, value: dict[str, Path]) -> dict[str, Path]:
        if not value:
            raise ValueError("a subject needs at least one image channel")
        return value


class DatasetManifest(BaseModel):
    """Subjects of a dataset; relative paths resolve against ``root``."""

    root: Path = Path(".")
    subjects: list[SubjectEntry]

    @model_validator(mode="after")
    def _unique_subjects(self) -> DatasetManifest:
        ids = [s.subject_id for s in self.subjects]
        if len(ids) != len(set(ids)):
            raise ValueError("subject ids must be unique")
        return self

    def resolve(self, path: Path) -> Path:
        return path if path.is_absolute() else self.root / path

    @property
    def channels(self) -> list[str]:
        return list(self.subjects[0].images) if self.subjects else []


class AugmentationSpec(BaseModel):
    method: Literal["paddit", "bspline"] = "paddit"
    augmentations_per_subject: int = Field(default=2, ge=1)
    seed: int = Field(default=0, ge=0, le=U64_MAX)
    bspline: BsplineConfig | None = None
    template_checkpoint: Path | None = None
    include_originals: bool = False
    reuse_samples: bool = False
    # Forces every integration time; used to check the identity flow
    fixed_time: float | None = Field(default=None, ge=0.0, le=1.0)


class PairProvenance(BaseModel):
    """Record written next to every emitted image/label pair."""

    subject_id: str
    augmentation_index: int
    method: Literal["paddit", "bspline"]
    seed: int
    time: float | None = None
    image_field_checksum: str
    label_field_checksum: str | None = None
    min_jacobian: float
    chain: ChainDiagnostics | None = None
    bspline: BsplineConfig | None = None
    reused_sample: bool = False
    outputs: dict[str, str] = Field(default_factory=dict)


class RunConfig(BaseModel):
    """Contents of a ``--config`` JSON file; CLI flags override its values."""

    kernel: KernelConfig = Field(default_factory=KernelConfig)
    registration: RegistrationConfig = Field(default_factory=RegistrationConfig)
    em: EmConfig = Field(default_factory=EmConfig)
    bspline: BsplineConfig = Field(default_factory=BsplineConfig)
    augmentation: AugmentationSpec = Field(default_factory=AugmentationSpec)
    population: PopulationConfig = Field(default_factory=PopulationConfig)
