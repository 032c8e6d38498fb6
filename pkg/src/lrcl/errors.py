"""Exception types shared across the package.

The CLI maps these onto stable exit codes: configuration and usage
problems exit 2, corrupted files exit 3, non-finite numerics exit 4.
"""


class LrclError(Exception):
    """Base class for all package errors."""


class ShapeError(LrclError):
    """A tensor dimension does not match what an operation requires."""


class ParameterError(LrclError):
    """A scalar argument is outside its legal range (p >= 1, tau <= 0, ...)."""


class DegenerateVectorError(LrclError):
    """A vector with (near-)zero norm reached a normalization step."""


class LabelError(LrclError):
    """A class label lies outside [0, C)."""


class DataError(LrclError):
    """A dataset violates a precondition (too short, too small, empty batch)."""


class ConfigError(LrclError):
    """A configuration document is malformed or contains unknown keys."""


class AdapterError(LrclError):
    """A source dataset tree cannot be ingested (missing files, bad alignment)."""


class CorruptionError(LrclError):
    """A binary artifact fails its integrity checks (magic, offsets, truncation)."""


class NumericError(LrclError):
    """Training produced a non-finite loss."""
