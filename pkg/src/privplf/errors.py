"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class PlfError(Exception):
    """Base class for every error raised by :mod:`privplf`."""

    exit_code = 1


class InputError(PlfError, ValueError):
    """Malformed or inconsistent user input (case files, graphs, configs)."""

    exit_code = 2


class CaseSyntaxError(InputError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")


class CaseValidationError(InputError):
    pass


class NumericalError(PlfError):
    """Singular or ill-conditioned linear algebra."""

    exit_code = 1


class SingularSystemError(NumericalError):
    def __init__(self, message: str, condition: float = float("inf")):
        self.condition = condition
        super().__init__(message)


class RankDeficientError(NumericalError):
    pass


class ConvergenceError(PlfError):
    """An iterative routine ran out of iterations."""

    exit_code = 3

    def __init__(self, message: str, residuals=None):
        self.residuals = residuals
        super().__init__(message)


class ProtocolError(PlfError):
    """Failure inside the distributed protocol, tagged with the algorithm step."""

    def __init__(self, step: int, cause: Exception):
        self.step = step
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__(f"step {step}: {cause}")
