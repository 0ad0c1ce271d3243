class CacemixError(Exception):
    """
    Base class for every failure raised by the estimation library.

    Attributes:
        exit_code (int): Process exit code the command-line front-end uses for this failure.
            2 flags bad input or configuration, 3 flags an estimation failure.
    """

    exit_code: int = 3


class SchemaViolationError(CacemixError):
    """Trial data does not follow the expected column schema (missing columns, non-binary z/t)."""

    exit_code = 2


class NonFiniteError(CacemixError):
    """Inputs to a solver contain NaN or infinite values."""


class SingularSystemError(CacemixError):
    """The weighted information matrix stays singular after the ridge retry."""


class DomainError(CacemixError):
    """An argument lies outside the domain of the function (e.g. a non-positive variance)."""


class NonBinaryError(CacemixError):
    """A vector that must hold only 0/1 values holds something else."""

    exit_code = 2


class DegenerateDataError(CacemixError):
    """Too little information to fit the requested model (stratum without mass, fewer rows than columns)."""


class EmptySubsetError(CacemixError):
    """The data subset a step operates on has no rows."""


class LearnerContractViolationError(CacemixError):
    """A plugged-in learner returned predictions that break its contract."""


class PositivityViolationError(CacemixError):
    """Estimated probabilities reach the boundary where a ratio is undefined."""


class ComplierExpertUntrainedError(CacemixError):
    """The complier expert received too little posterior mass to be fitted."""


class TooManyFailuresError(CacemixError):
    """Too many bootstrap replicates failed for the interval to be trusted."""


class ZeroDenominatorError(CacemixError):
    """The first-stage difference of an instrumental-variable ratio is zero."""


class NoValidGroupsError(CacemixError):
    """Every matching group lacks one of the two assignment arms."""
