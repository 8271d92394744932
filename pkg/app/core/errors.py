"""
Error hierarchy shared by the kernels, services, CLI and HTTP API.

Every error carries a machine-parsable ``error_code`` and the process exit
code the CLI uses when the error escapes a command.
"""

from typing import Optional


class LffnError(Exception):
    """Base class for all domain errors."""

    error_code: str = "LFFN_ERROR"
    exit_code: int = 1

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def one_line(self) -> str:
        """Single-line ``error=<CODE> message="..."`` rendering for the CLI."""
        text = self.message.replace("\n", " ").replace('"', "'")
        return f'error={self.error_code} message="{text}"'


class ConfigurationError(LffnError):
    """Invalid configuration, parameter layout or pyramid level."""

    error_code = "CONFIG_ERROR"
    exit_code = 2


class DimensionError(ConfigurationError):
    """Tensor shapes do not agree; the message names the offending axes."""

    error_code = "DIMENSION_ERROR"


class DataError(LffnError):
    """Input data could not be read, generated or sampled."""

    error_code = "DATA_ERROR"
    exit_code = 3


class ParseError(DataError):
    """Malformed line in a ground-truth or prediction file."""

    error_code = "PARSE_ERROR"

    def __init__(self, message: str, line_number: Optional[int] = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class GenerationError(DataError):
    """Synthetic scene could not be placed within the retry budget."""

    error_code = "GENERATION_ERROR"


class SamplingError(DataError):
    """No anchors of either kind are available to sample."""

    error_code = "SAMPLING_ERROR"


class VersionError(DataError):
    """Container format or checkpoint is incompatible with this build."""

    error_code = "VERSION_ERROR"


class NumericError(LffnError):
    """Numerical failure (non-finite loss, undefined operation)."""

    error_code = "NUMERIC_ERROR"
    exit_code = 4


class DomainError(NumericError):
    """Input outside the mathematical domain of an operation."""

    error_code = "DOMAIN_ERROR"


class LossError(NumericError):
    """Loss cannot be computed for the given minibatch."""

    error_code = "LOSS_ERROR"


class LabelIndexError(NumericError, IndexError):
    """Class label outside the logits range."""

    error_code = "INDEX_ERROR"


class InternalError(LffnError):
    """Unexpected failure outside the domain hierarchy (a bug, or the environment)."""

    error_code = "INTERNAL_ERROR"
    exit_code = 1
