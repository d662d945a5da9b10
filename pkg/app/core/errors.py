"""Error hierarchy shared by every service.

Exit codes are a stable contract of the CLI: 1 for validation and domain
errors, 2 for I/O errors.
"""

EXIT_DOMAIN = 1
EXIT_IO = 2


class PoseKitError(Exception):
    exit_code: int = EXIT_DOMAIN


class ConfigError(PoseKitError):
    """Shape or configuration mismatch."""


class UnsupportedLayerError(PoseKitError):
    """Layer or kernel outside the supported vocabulary."""


class NumericFaultError(PoseKitError):
    """NaN/Inf produced, fp16 overflow or integer accumulator overflow."""


class WeightStoreError(PoseKitError):
    """Missing parameters or a manifest that does not cover the blob."""


class AnnotationError(PoseKitError):
    """Malformed annotation/detection record or empty ground truth."""


class QuantizationError(PoseKitError):
    """Invalid quantization inputs (e.g. empty calibration set)."""


class DataFileError(PoseKitError):
    """Missing, unreadable or truncated input file."""

    exit_code = EXIT_IO
