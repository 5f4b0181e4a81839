"""Exception types raised across the package."""


class MeloError(Exception):
    """Base class for all package errors."""


class ShapeError(MeloError, ValueError):
    """Tensor shapes are incompatible."""


class CompatibilityError(MeloError, ValueError):
    """An adapter does not fit the backbone it is attached to."""


class FormatError(MeloError, ValueError):
    """A serialized file has the wrong magic, version or layout."""


class ChecksumError(FormatError):
    """A serialized file failed its CRC32 check (corrupt or truncated)."""


class MergeStateError(MeloError, RuntimeError):
    """Unmerging an adapter that is not merged, or merging one twice."""


class RegistryError(MeloError):
    pass


class DuplicateTaskError(RegistryError, KeyError):
    pass


class UnknownTaskError(RegistryError, KeyError):
    pass


class NoActiveTaskError(RegistryError, RuntimeError):
    pass


class TrainingDivergedError(MeloError, FloatingPointError):
    """Loss became non-finite. ``history`` holds the epochs completed so far."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


class UndefinedMetricError(MeloError, ValueError):
    """Metric is undefined for the input (e.g. AUC with one class present)."""


class BenchValidityError(MeloError, AssertionError):
    """A strategy's outputs differ from the reference single-model outputs."""
