"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DCDGError(Exception):
    exit_code = 1


class ConfigError(DCDGError, ValueError):
    exit_code = 2


class DataError(DCDGError, ValueError):
    exit_code = 3


class ShapeError(DCDGError, ValueError):
    exit_code = 3


class DomainError(DCDGError, ValueError):
    """Loss targets or scores outside their admissible set."""

    exit_code = 3


class TrainingAbort(DCDGError, RuntimeError):
    exit_code = 4


class ContractViolation(TrainingAbort):
    """A parameter group that must stay frozen changed during a step."""


class ArtifactIOError(DCDGError, OSError):
    exit_code = 5


class UndefinedMetric(DataError):
    """Metric has no value for this input (e.g. MSD with an empty surface)."""
