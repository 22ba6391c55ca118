"""Exception hierarchy shared by the estimation pipeline and the CLI."""


class DataValidationError(ValueError):
    """A dataset or configuration violates a structural invariant.

    ``violations`` holds ``(record_id, message)`` pairs when the failure can be
    tied to individual records.
    """

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = list(violations or [])


class EstimationError(RuntimeError):
    """Base class for numerical failures during estimation."""


class SingularDesignError(EstimationError):
    """Weighted design or information matrix is rank deficient."""


class SeparationError(EstimationError):
    """Logistic likelihood has no finite maximiser (quasi-complete separation)."""


class PositivityError(EstimationError):
    """A probability that must lie strictly inside (0, 1) does not."""


class DomainError(EstimationError):
    """An estimate falls outside the domain of a downstream transform."""
