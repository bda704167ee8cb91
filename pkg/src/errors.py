"""Exception hierarchy.

Every error also derives from the closest builtin so callers may catch either
the specific class or the generic one (e.g. ``ValueError``).
"""

from __future__ import annotations


class UniMSError(Exception):
    """Base class for all errors raised by this package."""


class InputError(UniMSError, ValueError):
    """Invalid document, example or argument supplied by the caller."""


class DimensionError(UniMSError, ValueError):
    """Tensor shapes do not agree."""


class NumericError(UniMSError, ArithmeticError):
    """NaN, infinity or another non-finite value reached a computation."""


class ConfigError(UniMSError, ValueError):
    """Invalid or mismatched configuration."""


class FormatError(UniMSError, ValueError):
    """A file on disk does not follow its declared format."""


class ScoreLookupError(UniMSError, KeyError):
    """A document id is missing from an externally supplied score file."""


class IntegrityError(UniMSError, ValueError):
    """Checkpoint manifest and payload disagree."""
