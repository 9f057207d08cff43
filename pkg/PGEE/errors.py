"""Exceptions and warnings raised across the toolkit."""


class PgeeError(Exception):
    """Base class for every error raised by the toolkit."""


class DataError(PgeeError, ValueError):
    """Input data could not be read or violates the dataset invariants."""


class SpecificationError(PgeeError, ValueError):
    """A penalty, model, grid or study configuration is invalid."""


class NumericalError(PgeeError, ArithmeticError):
    """A numerical step failed (singular system, non-estimable quantity)."""


class ConvergenceWarning(UserWarning):
    """An iterative fit stopped at max_iterations without converging."""
