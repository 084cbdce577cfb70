"""Estimated population template and its EM history."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from pydantic import BaseModel, Field

from paddit.models.volumes import FloatArray, ScalarVolume
from paddit.schemas import KernelConfig

SIGMA_FLOOR_FRACTION = 1e-4


class EmTraceEntry(BaseModel):
    """One EM iteration as recorded in the model and its checkpoints."""

    iteration: int = Field(ge=0)
    neg_log_posterior: float
    sigma: float = Field(gt=0.0)
    acceptance_rates: list[float] = Field(default_factory=list)


def sigma_floor_for(intensity_range: float) -> float:
    """Lower bound on sigma: 1e-4 of the input intensity range (1e-4 for flat inputs)."""
    return SIGMA_FLOOR_FRACTION * intensity_range if intensity_range > 0 else SIGMA_FLOOR_FRACTION


@dataclass(frozen=True, eq=False)
class TemplateModel:
    template: ScalarVolume
    sigma: float
    kernel: KernelConfig
    intensity_range: tuple[float, float]
    em_trace: list[EmTraceEntry] = field(default_factory=list)
    subject_ids: list[str] = field(default_factory=list)
    # Last E-step coefficient samples per subject, shape (S, P * ndim) each
    samples: list[list[FloatArray]] = field(default_factory=list, repr=False)

    @property
    def sigma_floor(self) -> float:
        low, high = self.intensity_range
        return sigma_floor_for(high - low)

    @property
    def iterations_done(self) -> int:
        return len(self.em_trace)

    def updated(self, **changes: object) -> TemplateModel:
        return replace(self, **changes)  # type: ignore[arg-type]
