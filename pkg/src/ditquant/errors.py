"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """A scalar argument (timestep, class index, bit width) is out of range."""


class ContractError(ValueError):
    """A caller violated an operation precondition (non-scalar loss, bad input range)."""


class ConfigError(ValueError):
    """A run configuration is malformed or internally inconsistent."""


class CalibrationError(RuntimeError):
    """Calibration could not proceed (empty sample filter, missing stats, NaN gradients)."""
