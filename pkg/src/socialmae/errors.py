"""
errors.py
=========

Exception hierarchy shared by the library and the CLI. The CLI maps
:py:class:`UsageError` and :py:class:`ConfigurationError` to exit code 2 and
every other :py:class:`SocialMAEError` to exit code 1.
"""

from typing import List, Optional, Sequence


class SocialMAEError(Exception):
    pass


class ConfigurationError(SocialMAEError):
    """An invalid configuration or geometry. `keys` lists every offending (dotted) config key."""

    def __init__(self, message: str, keys: Optional[List[str]] = None):
        super().__init__(message)
        self.keys = keys or []


class ShapeError(ConfigurationError):
    """Operands of a numeric primitive whose shapes are not compatible."""

    def __init__(self, op: str, *shapes: Sequence[int]):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        super().__init__("%s: incompatible shapes %s" % (op, " and ".join(str(s) for s in self.shapes)))


class UsageError(SocialMAEError):
    pass


class DataError(SocialMAEError):
    """A problem with an input record. The `clip_id` points at the offending record."""

    def __init__(self, message: str, clip_id: Optional[str] = None):
        self.clip_id = clip_id
        super().__init__(message if clip_id is None else "%s (clip %s)" % (message, clip_id))


class InternalError(SocialMAEError):
    pass


class NonFiniteError(SocialMAEError):
    """A NaN/Inf loss or gradient. `details` carries diagnostics (parameter names or clip ids)."""

    def __init__(self, message: str, details: Optional[List[str]] = None):
        self.details = details or []
        super().__init__(message if not self.details else "%s: %s" % (message, ", ".join(self.details)))
