"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2, DataError
subclasses -> 3, and OSError/IOError -> 1.
"""

from __future__ import annotations


class SoftPatchError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(SoftPatchError):
    """Invalid configuration value or malformed config file."""


class SchemaError(ConfigError):
    """JSON document violates a documented schema.

    ``pointer`` is a JSON pointer ("/records/3/id") to the offending field.
    """

    def __init__(self, message: str, pointer: str = ""):
        self.pointer = pointer
        super().__init__(f"{message} (at {pointer or '/'})")


class DataError(SoftPatchError):
    """Input data violates a precondition or an on-disk contract."""


class MalformedHeader(DataError):
    """Binary file does not start with the expected magic/header."""


class UnsupportedVersion(DataError):
    """Binary container has an unknown format version."""


class TruncatedPayload(DataError):
    """Binary file ends before the header-declared payload does."""


class NonFiniteValue(DataError):
    """A tensor payload contains NaN or Inf.

    ``index`` is the flat (row-major) index of the first offending value.
    """

    def __init__(self, index: int):
        self.index = index
        super().__init__(f"non-finite value at flat index {index}")


class DuplicateId(DataError):
    """A manifest contains the same sample id twice."""


class InsufficientSamples(DataError):
    """Too few samples for the requested statistic (e.g. N <= lof_k)."""


class InfeasibleRatio(DataError):
    """Noise ratio cannot be met from the available anomalous pool."""


class UndefinedMetric(DataError):
    """Metric is undefined for the given inputs (e.g. single-class AUROC)."""


class DimensionMismatch(DataError):
    """Feature dimensions disagree between two inputs."""


class EmptyBank(DataError):
    """Operation requires a non-empty memory bank."""


class GenerationError(DataError):
    """Synthetic generator self-check failed."""
