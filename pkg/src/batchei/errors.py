"""Exception types shared across the package."""


class ContractError(ValueError):
    """Raised when inputs violate a documented precondition."""


class NumericalError(ArithmeticError):
    """Raised when a computation cannot produce a trustworthy number."""


class DegenerateCovarianceError(NumericalError):
    """Covariance matrix is not positive definite, even after jitter."""
