"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes violate an operation's shape contract."""


class ContractError(ValueError):
    """An argument violates a documented precondition."""


class NumericsError(ArithmeticError):
    """A computation produced non-finite values."""


class FormatError(ValueError):
    """A file does not match the expected binary layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MetricUndefined(ValueError):
    """A metric has no defined value for the given inputs."""
