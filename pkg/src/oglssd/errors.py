"""Exception hierarchy. Each family maps to a distinct CLI exit code."""

from __future__ import annotations


class OGLSError(Exception):
    exit_code = 1


class ConfigError(OGLSError, ValueError):
    exit_code = 2


class DataError(OGLSError, ValueError):
    exit_code = 3


class NumericError(OGLSError, ArithmeticError):
    exit_code = 4


class ArtifactIOError(OGLSError, OSError):
    exit_code = 5


class ContextWindowError(ConfigError):
    """A sequence does not fit the model's context window."""


class ShapeError(OGLSError, ValueError):
    exit_code = 4


class PoolError(OGLSError, ValueError):
    """A guidance pool was empty where a nonempty one is required."""

    exit_code = 4


class ContractError(OGLSError, ValueError):
    exit_code = 4
