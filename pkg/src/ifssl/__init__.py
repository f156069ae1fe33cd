"""Iterative label filtering with semi-supervised learning on small dense nets."""

from ifssl.errors import (
    ConfigurationError,
    DivergenceError,
    FormatError,
    InputError,
    ParseError,
    UndefinedAccuracyError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DivergenceError",
    "FormatError",
    "InputError",
    "ParseError",
    "UndefinedAccuracyError",
]
