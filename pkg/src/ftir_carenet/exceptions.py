"""Exception types raised across the package.

Most inherit from ``ValueError`` so callers that only care about bad input can
catch a single class.
"""


class CubeFormatError(ValueError):
    """File does not follow the HSC1 layout (bad magic, bad header)."""


class ValidationError(ValueError):
    """A data object violates its invariants (non-finite values, bad shapes)."""


class RangeError(ValueError):
    """Value outside its permitted range."""


class AxisRangeError(RangeError):
    """Requested wavenumber window does not intersect the axis."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown configuration key."""


class SegmentationError(RuntimeError):
    """Tissue segmentation could not form two clusters."""


class EMSCModelError(ValueError):
    """EMSC design matrix is rank deficient."""


class CorrectionError(ArithmeticError):
    """EMSC multiplicative coefficient too small to invert."""


class NormalizationError(ArithmeticError):
    """Spectrum is constant and cannot be min-max scaled."""


class SchemaError(ValueError):
    """Label is not valid for the task schema."""


class DecodeError(ValueError):
    """Raw network output cannot be decoded."""


class LossError(ArithmeticError):
    """Loss evaluated to NaN or inf."""


class GraphError(ValueError):
    """Shape mismatch or missing layer in a network graph."""


class SplitError(ValueError):
    """Not enough patients to build the requested split."""
