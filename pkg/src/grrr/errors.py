"""Exception types shared across the package."""


class GrrrError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(GrrrError):
    """An input is outside the mathematical domain of an operation
    (probabilities off [0, 1], NaN/Inf, boundary proportions where interior
    ones are required, infeasible moments, ...)."""


class DatasetError(GrrrError):
    """A dataset file or table failed validation. Messages carry line numbers
    where applicable."""


class ResourceLimitError(GrrrError):
    """A computation would exceed a configured resource cap."""


class ConvergenceError(GrrrError):
    """An iterative routine (optimiser, quadrature) failed to converge within
    its budget."""
