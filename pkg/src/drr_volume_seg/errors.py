"""
Exception hierarchy for drr-volume-seg.

Every error derives from ``DrrSegError`` and from the builtin that matches its
nature, so callers may catch either ``DrrSegError`` or e.g. ``ValueError``.
"""

from typing import Any, Optional


class DrrSegError(Exception):
    """Base class for all package errors."""


class ShapeError(DrrSegError, ValueError):
    """Tensor or volume extents are inconsistent with an operation."""


class ConfigError(DrrSegError, ValueError):
    """A configuration violates an invariant that pydantic cannot check alone."""


class PhantomError(DrrSegError, ValueError):
    """A phantom specification cannot be realised (e.g. organs leave the body)."""


class GeometryError(DrrSegError, ValueError):
    """Degenerate or invalid projection geometry."""


class EvaluationError(DrrSegError, ValueError):
    """A metric is undefined for the given inputs."""


class FormatError(DrrSegError, ValueError):
    """Malformed binary file."""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)


class TruncatedFileError(FormatError):
    """File ended before the declared payload."""


class UnsupportedVersionError(FormatError):
    """File declares a format version this package cannot read."""


class TrainingDivergedError(DrrSegError, RuntimeError):
    """Loss became NaN or infinite during optimisation."""

    def __init__(self, step: int, terms: dict[str, Any]):
        self.step = step
        self.terms = terms
        detail = ", ".join(f"{k}={v}" for k, v in terms.items())
        super().__init__(f"Training diverged at step {step}: {detail}")
