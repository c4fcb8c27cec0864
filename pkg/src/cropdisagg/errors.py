"""Exception hierarchy.

Every error raised by the package derives from :class:`DisaggError`. The
three intermediate classes map onto CLI exit codes: usage (2), data (3)
and numerical (4).
"""


class DisaggError(Exception):
    exit_code = 1


class UsageError(DisaggError):
    exit_code = 2


class DataError(DisaggError):
    exit_code = 3


class NumericalFailure(DisaggError):
    exit_code = 4


# hierarchy
class DuplicateIdError(DataError):
    pass


class MissingParentError(DataError):
    pass


class NonPositiveLandAreaError(DataError):
    pass


class UnknownRegionError(DataError):
    pass


class NotAParentError(DataError):
    pass


# dataio
class SchemaMismatchError(DataError):
    pass


class InconsistentShapeError(DataError):
    pass


class MissingLabelError(DataError):
    pass


class TooFewYearsError(DataError):
    pass


# synth
class InvalidConfigError(UsageError):
    pass


class IoError(DataError):
    pass


# diffcore
class ShapeMismatchError(DataError):
    pass


class NumericalError(NumericalFailure):
    pass


class NotScalarError(DisaggError):
    pass


# weaksup / baselines / evaluation
class DegenerateWeightsError(NumericalFailure):
    pass


class NonPositiveMeanError(DataError):
    pass


class EmptyBatchListError(DataError):
    pass


class EmptyGridError(UsageError):
    pass


class DegenerateFitError(NumericalFailure):
    pass


class MissingHistoryError(DataError):
    pass


class TooFewSamplesError(DataError):
    pass


class NonFiniteInputError(DataError):
    pass


class EmptyInputError(DataError):
    pass


class TooFewPairsError(DataError):
    pass


class MissingCoverageError(DataError):
    pass


class UnpairedDataError(DataError):
    pass


class MissingCheckpointError(DataError):
    pass
