"""Error types for ssmvdm.

This module provides the exception hierarchy shared by every layer of the
package, so callers can handle failures precisely or broadly.

Example:
    Basic error handling:
    >>> try:
    ...     video = read_video(path)
    ... except VideoFormatError as e:
    ...     print(f"bad file: expected {e.expected}, got {e.received}")
    ... except SsmVdmError as e:
    ...     print(f"ssmvdm error: {e}")
"""

from typing import Any, Optional, Sequence


class SsmVdmError(Exception):
    """Base exception for all ssmvdm errors.

    All package-specific exceptions inherit from this class, allowing for
    broad exception handling when specific error types don't matter.
    """


class ValidationError(SsmVdmError):
    """Raised when an argument to a public operation is invalid.

    This includes:
    - Empty or non-positive shapes
    - Diffusion steps outside the schedule
    - Non-positive step sizes or unstable state matrices

    Attributes:
        field: The argument that failed validation
        value: The invalid value
    """

    def __init__(self, message: str, field: Optional[str] = None, value: Any = None):
        self.field = field
        self.value = value
        super().__init__(message)


class ConfigurationError(SsmVdmError):
    """Raised when a configuration is invalid.

    Attributes:
        parameter: The configuration parameter that has an issue
        suggestion: Optional suggestion for fixing the issue
    """

    def __init__(
        self, message: str, parameter: Optional[str] = None, suggestion: Optional[str] = None
    ):
        self.parameter = parameter
        self.suggestion = suggestion
        if suggestion:
            message = f"{message}\nSuggestion: {suggestion}"
        super().__init__(message)


class ShapeError(SsmVdmError):
    """Raised when tensor extents disagree.

    Attributes:
        expected: The extents that were required
        received: The extents that were given
    """

    def __init__(
        self,
        message: str,
        expected: Optional[Sequence[int]] = None,
        received: Optional[Sequence[int]] = None,
    ):
        self.expected = tuple(expected) if expected is not None else None
        self.received = tuple(received) if received is not None else None
        if expected is not None and received is not None:
            message = f"{message} (expected {self.expected}, got {self.received})"
        super().__init__(message)


class NonFiniteError(SsmVdmError):
    """Raised when a NaN or Inf reaches a public operation.

    Attributes:
        name: Name of the offending tensor
    """

    def __init__(self, message: str, name: Optional[str] = None):
        self.name = name
        super().__init__(message)


class UnsupportedOperationError(SsmVdmError):
    """Raised when a loss cannot be differentiated.

    Attributes:
        op: The operation (or graph fragment) that has no backward
    """

    def __init__(self, message: str, op: Optional[str] = None):
        self.op = op
        super().__init__(message)


class FormatError(SsmVdmError):
    """Raised when a binary file violates its layout.

    This is the base class for file-format errors:
    - Unexpected magic bytes
    - Unsupported format versions
    - Truncated payloads

    Attributes:
        expected: What was expected
        received: What was actually read
    """

    def __init__(self, message: str, expected: Optional[str] = None, received: Optional[str] = None):
        self.expected = expected
        self.received = received
        super().__init__(message)


class VideoFormatError(FormatError):
    """Raised when a ``.vvid`` video file cannot be parsed or written."""


class CheckpointFormatError(FormatError):
    """Raised when a model checkpoint cannot be parsed."""


class DataError(SsmVdmError):
    """Raised when a dataset or output directory is unusable.

    Attributes:
        path: The path involved, if any
    """

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        super().__init__(message)


class CapacityError(SsmVdmError):
    """Raised when a measurement exceeds the activation budget.

    Attributes:
        seq_len: Sequence length L at which capacity ran out
        requested_bytes: Live activation bytes when the limit was crossed
        limit_bytes: Configured budget, if any
    """

    def __init__(
        self,
        message: str,
        seq_len: Optional[int] = None,
        requested_bytes: Optional[int] = None,
        limit_bytes: Optional[int] = None,
    ):
        self.seq_len = seq_len
        self.requested_bytes = requested_bytes
        self.limit_bytes = limit_bytes
        if seq_len is not None:
            message = f"{message} (L={seq_len})"
        super().__init__(message)


class GradientCheckError(SsmVdmError):
    """Raised when analytic and numeric gradients disagree.

    Attributes:
        failures: Names of the checks that failed
    """

    def __init__(self, message: str, failures: Optional[Sequence[str]] = None):
        self.failures = list(failures or [])
        super().__init__(message)
