"""Exception hierarchy.

Two families matter to callers: :class:`InputError` for bad data or
configuration (CLI exit code 2) and :class:`NumericalError` for failures
inside estimation (CLI exit code 3).
"""


class AlqrError(Exception):
    """Base class for all package errors."""

    exit_code = 3


class InputError(AlqrError, ValueError):
    exit_code = 2


class NumericalError(AlqrError, ArithmeticError):
    exit_code = 3


# data / configuration
class LengthMismatch(InputError):
    pass


class NonFiniteValue(InputError):
    pass


class NonBinaryExposure(InputError):
    pass


class DegenerateWeights(InputError):
    pass


class KTooLarge(InputError):
    pass


class ConfigError(InputError):
    pass


class SchemaError(InputError):
    pass


class UnknownExperiment(InputError):
    pass


class NotBinary(InputError):
    pass


# learners
class RankDeficient(NumericalError):
    pass


class NotConverged(NumericalError):
    pass


class EmptyForest(NumericalError):
    pass


class SingularDesign(NumericalError):
    pass


class AllLearnersFailed(NumericalError):
    pass


class DegenerateResiduals(NumericalError):
    pass


# estimation
class DegenerateExposureVariance(NumericalError):
    pass


class NonPositiveQuantile(NumericalError):
    pass


class DegeneratePropensity(NumericalError):
    pass


class AllZeroCleverCovariates(NumericalError):
    pass


class AllReplicationsFailed(NumericalError):
    pass
