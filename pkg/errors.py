"""
Exception types shared by the ddec modules.

Every error raised on purpose by the toolkit derives from DdecError, which is
a ValueError so that callers catching ValueError keep working.
"""


class DdecError(ValueError):
    """Base class for all toolkit errors."""

    code = "ddec_error"


class SystemValidationError(DdecError):
    code = "invalid_system"


class DimensionError(DdecError):
    code = "dimension_mismatch"


class GridError(DdecError):
    code = "invalid_grid"


class StepTooLargeError(DdecError):
    code = "step_too_large"


class LatticeOverflowError(DdecError):
    code = "lattice_overflow"


class NeumannSplitError(DdecError):
    code = "no_valid_split"


class WindowError(DdecError):
    code = "window_exceeded"


class BoundaryZeroError(DdecError):
    code = "boundary_zero"


class PhaseTrackingError(DdecError):
    code = "phase_tracking_underflow"


class MemoryBudgetError(DdecError):
    code = "memory_budget"


class ConfigError(DdecError):
    code = "invalid_config"
