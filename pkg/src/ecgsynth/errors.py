"""Exception types shared across the toolkit."""


class EcgSynthError(Exception):
    """Base class for all toolkit errors."""


class ParseError(EcgSynthError):
    """Malformed header or manifest content; carries the offending line number."""

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class UnsupportedFormat(EcgSynthError):
    """Signal storage format code outside the supported set."""


class TruncatedData(EcgSynthError):
    """Binary payload shorter than the header declares."""


class RangeError(EcgSynthError):
    """Value cannot be represented in the target integer range."""


class UnsupportedRatio(EcgSynthError):
    """Resampling ratio is not an integer up or down factor."""


class SchemaError(EcgSynthError):
    """Datasets disagree on structure (lead count, sampling rate, ...)."""


class StratifyError(EcgSynthError):
    """A class has too few records to honour the requested split."""


class PadError(EcgSynthError):
    """Requested pad length shorter than the series."""


class HopError(EcgSynthError):
    """STFT hop larger than the analysis window."""


class ShapeError(EcgSynthError):
    """Tensor shapes incompatible with the requested operation."""


class NumericError(EcgSynthError):
    """NaN/Inf encountered where finite values are required."""


class VersionError(EcgSynthError):
    """Checkpoint version or architecture descriptor mismatch."""


class ChecksumError(EcgSynthError):
    """Checkpoint payload corrupt or truncated."""


class StateError(EcgSynthError):
    """Operation invoked in an invalid model state (e.g. stage order)."""


class SourceError(EcgSynthError):
    """A required data source (real or synthetic) is unavailable."""


class SampleSizeError(EcgSynthError):
    """Too few records for a statistically meaningful procedure."""


class StepError(EcgSynthError):
    """Diffusion step index outside the schedule."""


class ConfigError(EcgSynthError):
    """Run configuration invalid; message lists every offending key."""
