"""Exception hierarchy shared by every subpackage."""


class VioError(Exception):
    """Base class for library errors."""


class DimensionError(VioError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(VioError, ValueError):
    """A configuration value is invalid or inconsistent."""


class FormatError(VioError, ValueError):
    """An input file is malformed."""


class ContractError(VioError, ValueError):
    """A precondition of an operation was violated."""


class TrainingError(VioError, RuntimeError):
    """Training or curvature estimation produced a non-finite value."""
