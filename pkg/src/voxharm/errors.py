"""Exception types shared across the package."""


class VoxharmError(Exception):
    """Base class for all package errors."""


class DegenerateVolume(VoxharmError):
    """Volume has no intensity range (constant data)."""


class InvalidPlan(VoxharmError):
    """Window plan cannot cover the volume."""


class InconsistentWindowSet(VoxharmError):
    """Window set does not match its declared offsets/shape."""


class FormatError(VoxharmError):
    """On-disk volume file is malformed."""


class ShapeError(VoxharmError):
    """Array shape does not match the expected configuration."""


class LabelError(VoxharmError):
    """Scanner label vector is invalid for the configured scanner count."""


class DomainError(VoxharmError):
    """Numeric input outside the mathematically valid domain."""


class InvalidConfig(VoxharmError):
    """Configuration value out of range or inconsistent."""


class ConfigError(InvalidConfig):
    """Run configuration unusable for the requested operation."""


class ConvergenceError(VoxharmError):
    """Iterative fit failed to converge; carries the optimizer trace."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


class EmptyInput(VoxharmError):
    """Operation received an empty collection."""


class TrainingDiverged(VoxharmError):
    """A non-finite loss appeared during training; carries the loss report."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report
