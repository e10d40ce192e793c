"""Open-set recognition: DHRNet classifiers with EVT-based unknown rejection."""
from .errors import (
    ConfigurationError,
    CrosrError,
    DegenerateFitError,
    FittingError,
    FormatError,
    InputError,
    NumericalError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "CrosrError",
    "DegenerateFitError",
    "FittingError",
    "FormatError",
    "InputError",
    "NumericalError",
]
