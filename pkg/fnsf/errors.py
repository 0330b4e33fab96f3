"""Exception hierarchy; each class carries the CLI exit code it maps to."""


class FnsfError(Exception):
    exit_code = 1


class UsageError(FnsfError, ValueError):
    """Bad arguments or violated preconditions."""

    exit_code = 2


class DataIOError(FnsfError, OSError):
    """Unreadable, unwritable or malformed files."""

    exit_code = 3


class NumericError(FnsfError, ArithmeticError):
    """Non-finite values during a computation.

    `where` names the step (iteration number, layer index) that produced them.
    """

    exit_code = 4

    def __init__(self, message: str, where: int | None = None):
        super().__init__(message)
        self.where = where


class BudgetError(FnsfError, MemoryError):
    """A dense allocation would exceed the configured memory budget."""

    exit_code = 5

    def __init__(self, message: str, required_bytes: int = 0):
        super().__init__(message)
        self.required_bytes = required_bytes
