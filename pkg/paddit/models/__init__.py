"""Volume and template containers."""

from paddit.models.template import EmTraceEntry, TemplateModel
from paddit.models.volumes import DisplacementField, GridGeometry, LabelVolume, ScalarVolume

__all__ = [
    "DisplacementField",
    "EmTraceEntry",
    "GridGeometry",
    "LabelVolume",
    "ScalarVolume",
    "TemplateModel",
]
