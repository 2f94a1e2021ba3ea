"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class StateError(RuntimeError):
    """An object was used in an invalid state (e.g. repeated backward)."""


class NonFiniteError(FloatingPointError):
    """A forward computation produced NaN or Inf."""


class ConfigurationError(ValueError):
    """Invalid or unknown configuration."""


class IngestionError(ValueError):
    """A cohort file could not be parsed."""

    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column


class DegenerateFeatureError(ValueError):
    """A feature has zero variance where a spread is required."""
