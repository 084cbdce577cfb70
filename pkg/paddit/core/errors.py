"""Exception hierarchy; each family maps to one CLI exit code."""

from __future__ import annotations

from typing import Any


class PadditError(Exception):
    """Base class for all PADDIT errors."""

    exit_code = 1


class UsageError(PadditError):
    """Invalid command-line usage or configuration values."""


class DataError(PadditError):
    """Input data cannot be used as given."""

    exit_code = 2


class GeometryMismatchError(DataError, ValueError):
    """Two volumes that must share a grid do not."""


class VolumeFormatError(DataError):
    """A volume file is malformed, truncated or of an unsupported kind."""


class ManifestError(DataError):
    """A dataset manifest is invalid or references missing files."""


class NumericalError(PadditError):
    """A numerical procedure failed to produce a usable result."""

    exit_code = 3


class DegenerateChainError(NumericalError):
    """An HMC chain accepted too few proposals to be trusted."""

    def __init__(
        self, message: str, diagnostics: Any = None, subject_index: int | None = None
    ) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics
        self.subject_index = subject_index

    def with_subject(self, subject_index: int) -> DegenerateChainError:
        return DegenerateChainError(
            f"subject {subject_index}: {self}", self.diagnostics, subject_index
        )


class InversionError(NumericalError):
    """Fixed-point or flow inversion left a residual above tolerance."""

    def __init__(self, message: str, max_residual: float) -> None:
        super().__init__(message)
        self.max_residual = max_residual
