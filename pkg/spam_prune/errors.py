"""Exception hierarchy for spam_prune."""

from __future__ import annotations

from typing import Any, Dict, Optional


class SpamPruneError(Exception):
    """Base class for all errors raised by spam_prune."""


class StructuralError(SpamPruneError, ValueError):
    """Shapes, indices or layouts do not fit together."""


class LayerCollapseError(StructuralError):
    """Structured pruning would remove every unit of a layer."""


class NumericalError(SpamPruneError, ArithmeticError):
    """A computation produced or met a non-finite or invalid value.

    Args:
        message: Human readable description.
        diagnostics: Optional numbers that help locate the failure
            (minimum eigenvalue, minimum precision, epoch index, ...).
    """

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class ResourceError(SpamPruneError):
    """A configured size cap would be exceeded."""


class FormatError(SpamPruneError, ValueError):
    """A file does not follow its declared format.

    Args:
        message: Human readable description.
        offset: Byte offset of the problem for binary formats.
        line: One-based line number of the problem for text formats.
    """

    def __init__(
        self,
        message: str,
        offset: Optional[int] = None,
        line: Optional[int] = None,
    ):
        location = []
        if offset is not None:
            location.append(f"byte offset {offset}")
        if line is not None:
            location.append(f"line {line}")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)
        self.offset = offset
        self.line = line


class StalenessError(SpamPruneError):
    """A posterior snapshot was built for different parameters."""


class ConfigError(SpamPruneError, ValueError):
    """An experiment configuration failed validation."""
