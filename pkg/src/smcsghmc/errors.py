"""Exception hierarchy shared across the package."""


class SMCError(Exception):
    """Base class for all package errors."""


class ConfigError(SMCError, ValueError):
    pass


class ContractViolation(SMCError, ValueError):
    pass


class ShapeError(SMCError, ValueError):
    pass


class DegenerateWeights(SMCError, ValueError):
    """All importance weights are zero (every log-weight is -inf)."""


class NumericalError(SMCError, ArithmeticError):
    def __init__(self, message, particle=None):
        if particle is not None:
            message = f"{message} (particle {particle})"
        super().__init__(message)
        self.particle = particle


class EmptyBatch(SMCError, ValueError):
    pass


class EmptyInput(SMCError, ValueError):
    pass


class InsufficientData(SMCError, ValueError):
    pass


class FormatError(SMCError, ValueError):
    pass


class TrainingDiverged(SMCError, ArithmeticError):
    pass


class DegeneracyError(SMCError, RuntimeError):
    """Raised when every particle has collapsed; carries the run diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics
