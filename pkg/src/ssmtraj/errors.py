"""Exception hierarchy shared by all ssmtraj modules."""


class ContractError(ValueError):
    """An operation was called outside its documented contract."""


class NumericsError(ArithmeticError):
    """Base class for numerical failures that are not caller mistakes."""


class DecompositionError(NumericsError):
    """A matrix factorisation failed even after the jitter ladder."""


class DivergenceError(NumericsError):
    """A computation produced non-finite values."""


class SchemaError(ValueError):
    """An input table is missing a required column."""

    def __init__(self, column: str, message: str | None = None):
        self.column = column
        super().__init__(message or f"missing required column: {column!r}")


class RowError(ValueError):
    """A row of an input table could not be parsed."""

    def __init__(self, line_number: int, message: str):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


class FormatError(ValueError):
    """A binary container has a bad magic, version or framing."""


class TrainingAbortError(RuntimeError):
    """Training diverged; carries the last good parameter state."""

    def __init__(self, message: str, best_state=None, log=None):
        self.best_state = best_state
        self.log = log or []
        super().__init__(message)


class UsageError(ValueError):
    """Bad command-line flag or config file content (CLI exit code 2)."""
