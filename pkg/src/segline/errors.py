"""Exception hierarchy shared across the package.

Every error segline raises deliberately derives from SeglineError, so
callers (the CLI in particular) can distinguish "this tool rejected the
input or configuration" from genuine bugs.
"""


class SeglineError(Exception):
    """Base class for all errors raised by segline."""


class ConfigError(SeglineError):
    """A configuration value or combination of values is invalid."""
