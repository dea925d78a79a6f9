"""Exception types raised across the package."""


class ScalError(Exception):
    """Base class for all package errors."""


class ShapeError(ScalError, ValueError):
    pass


class NumericDomainError(ScalError, ArithmeticError):
    """Raised for log of a nonpositive value or division by zero."""


class ContractError(ScalError, ValueError):
    """A precondition of an operation was violated."""


class DegenerateVectorError(ScalError, ValueError):
    """A vector that must be normalized has zero norm."""


class MissingClassError(ScalError, ValueError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(f"no samples for class(es) {self.missing}")


class TrainingDivergenceError(ScalError, RuntimeError):
    """A loss or gradient became non-finite during training."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConfigError(ScalError, ValueError):
    """Invalid experiment configuration; carries field-level diagnostics."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class ChecksumError(ScalError, ValueError):
    pass
