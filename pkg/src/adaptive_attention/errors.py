"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class InvalidMaskError(ValueError):
    """A softmax mask selects no position along the reduced axis."""


class NumericError(FloatingPointError):
    """A non-finite value appeared where finite values are required."""


class ContractError(ValueError):
    """An API precondition was violated by the caller."""


class ConfigurationError(ValueError):
    """A configuration value or parameter shape is inconsistent."""


class InputError(ValueError):
    """Input data cannot be processed (empty sequence, bad label, ...)."""


class DataFormatError(ValueError):
    """A data or checkpoint file is malformed."""


class TrainingDivergedError(FloatingPointError):
    """Training produced a non-finite loss.

    ``diagnostics`` holds the step, batch index and loss terms at failure.
    """

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
