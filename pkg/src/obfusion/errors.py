"""Exception taxonomy shared across the package.

The CLI maps these onto stable exit codes (see cli.py): config/validation
problems exit 2, missing prerequisites exit 3, schema mismatches exit 4,
anything else exit 1.
"""


class ObfusionError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(ObfusionError):
    """Invalid configuration, parameters, or preconditions."""


class ShapeError(ObfusionError):
    """Array shape or dimension mismatch."""


class SchemaError(ObfusionError):
    """Attribute schema mismatch or unknown attribute name."""


class DependencyError(ObfusionError):
    """A required prerequisite artifact is missing."""


class DataFormatError(ObfusionError):
    """Corrupt or unsupported on-disk artifact."""


class NumericError(ObfusionError):
    """Non-finite values where finite ones are required (diverged training,
    NaN gradients, singular schedule entries)."""


class SamplingError(ObfusionError):
    """Not enough eligible samples to honor a sampling request."""
