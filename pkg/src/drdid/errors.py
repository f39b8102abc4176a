"""Exception and warning classes raised across the package."""


class DrdidError(Exception):
    """Base class for all package errors."""


class ValidationError(DrdidError):
    """Input data or configuration failed validation (CLI exit code 2)."""


class MalformedFile(ValidationError):
    pass


class SchemaViolation(ValidationError):
    pass


class DegenerateDesign(ValidationError):
    """One of the two groups is empty."""


class NonPositiveLog(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class MissingNuisance(DrdidError):
    """An estimator was called without the nuisance fits it needs."""


class FittingError(DrdidError):
    """A model fit failed (CLI exit code 3)."""


class SingularInformation(FittingError):
    pass


class TooManyFailures(FittingError):
    pass


class SeparationDetected(UserWarning):
    """Logistic fit with probabilities pinned at the clamp."""


class NonConvergence(UserWarning):
    pass
