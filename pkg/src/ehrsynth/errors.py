"""Exception hierarchy shared across the package.

Every error raised on a user-facing path derives from EhrSynthError so the
CLI can map failure classes to distinct exit codes.
"""

from __future__ import annotations


class EhrSynthError(Exception):
    """Base class for all package errors."""


class ConfigError(EhrSynthError):
    """Invalid configuration: bad types, out-of-range values, missing keys."""

    exit_code = 2


class DataError(EhrSynthError):
    """Invalid data: malformed files, schema mismatches, unknown codes."""

    exit_code = 3


class NumericError(EhrSynthError):
    """Numeric failure: non-finite loss, degenerate distribution, etc."""

    exit_code = 4


class UnknownCodeError(DataError):
    """A record references a code absent from its modality's vocabulary."""

    def __init__(self, modality: str, code: str):
        super().__init__(f"unknown code {code!r} for modality {modality!r}")
        self.modality = modality
        self.code = code


class SchemaMismatchError(DataError):
    """Two components disagree about the corpus schema."""


class MalformedLineError(DataError):
    """A corpus file line failed to parse."""

    def __init__(self, path: str, line_number: int, reason: str):
        super().__init__(f"{path}:{line_number}: {reason}")
        self.path = path
        self.line_number = line_number
        self.reason = reason


class GrammarViolationError(DataError):
    """A token sequence violates the record grammar."""

    def __init__(self, position: int, reason: str):
        super().__init__(f"grammar violation at token {position}: {reason}")
        self.position = position
        self.reason = reason


class DimensionMismatchError(ConfigError):
    """Tensor or feature dimensions are inconsistent with the configuration."""
