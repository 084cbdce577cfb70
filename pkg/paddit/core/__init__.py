# Core module exports
from paddit.core.config import settings
from paddit.core.errors import DataError, NumericalError, PadditError
from paddit.core.logging import get_logger

__all__ = [
    "settings",
    "get_logger",
    "PadditError",
    "DataError",
    "NumericalError",
]
